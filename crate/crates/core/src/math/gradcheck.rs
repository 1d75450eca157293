//! Central finite-difference verification of reverse-mode gradients.

use crate::error::Result;
use crate::math::{Graph, ParamId, ParamStore, Tensor, Var};

/// Denominator floor of [`rel_error`]. Central differences with `h = 1e-5`
/// carry roundoff of about `1e-16·|f|/h`, so gradients smaller than this
/// floor are judged by absolute error (`< 1e-10` at a 1e-4 tolerance).
pub const REL_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Maximum relative error between the autograd gradient of the scalar
/// `f(x)` and central differences with step `h`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'static>, Var) -> Result<Var>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::detached();
        let v = g.input(t.clone());
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::detached();
    let v = g.leaf(x.clone());
    let out = f(&mut g, v)?;
    let grads = g.backward(out)?;
    let zeros = vec![0.0; x.numel()];
    let analytic = grads.leaf(v).unwrap_or(&zeros).to_vec();
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for j in 0..x.numel() {
        let orig = probe.data()[j];
        probe.data_mut()[j] = orig + h;
        let fp = eval(&probe)?;
        probe.data_mut()[j] = orig - h;
        let fm = eval(&probe)?;
        probe.data_mut()[j] = orig;
        worst = worst.max(rel_error(analytic[j], (fp - fm) / (2.0 * h)));
    }
    Ok(worst)
}

/// Worst relative error per parameter from [`grad_check_params`].
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub per_param: Vec<(String, f64)>,
    pub coords_checked: usize,
}

impl ParamCheck {
    pub fn max_error(&self) -> f64 {
        self.per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&(String, f64)> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal))
    }
}

/// Checks every coordinate of every parameter of `store` against central
/// differences of the scalar loss built by `f`. `f` must be deterministic
/// (evaluation-mode graphs).
pub fn grad_check_params<F>(store: &mut ParamStore, f: F, h: f64) -> Result<ParamCheck>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let out = f(&mut g)?;
        g.backward(out)?
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store);
        let out = f(&mut g)?;
        Ok(g.value(out).item())
    };
    let ids: Vec<ParamId> = store.ids().collect();
    let mut per_param = Vec::with_capacity(ids.len());
    let mut coords = 0;
    for id in ids {
        let n = store.value(id).numel();
        let grad = analytic.param(id).map(|g| g.to_vec()).unwrap_or(vec![0.0; n]);
        let mut worst: f64 = 0.0;
        for j in 0..n {
            let orig = store.value(id).data()[j];
            store.get_mut(id).value.data_mut()[j] = orig + h;
            let fp = eval(store)?;
            store.get_mut(id).value.data_mut()[j] = orig - h;
            let fm = eval(store)?;
            store.get_mut(id).value.data_mut()[j] = orig;
            worst = worst.max(rel_error(grad[j], (fp - fm) / (2.0 * h)));
        }
        coords += n;
        per_param.push((store.name(id).to_string(), worst));
    }
    Ok(ParamCheck {
        per_param,
        coords_checked: coords,
    })
}
