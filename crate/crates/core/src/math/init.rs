use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::math::{ParamId, ParamStore, Tensor};

/// Glorot/Xavier uniform sample: `U(−a, a)` with `a = √(6 / (fan_in + fan_out))`.
///
/// Matrices `[in × out]` use their two dimensions as fans; kernels
/// `[out × in × k × k]` scale both fans by the receptive field.
pub fn xavier_uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let (fan_in, fan_out) = match shape {
        [n] => (*n, *n),
        [i, o] => (*i, *o),
        [o, i, rest @ ..] => {
            let field: usize = rest.iter().product();
            (i * field, o * field)
        }
        [] => (1, 1),
    };
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-a..a);
    }
    t
}

/// Registers Xavier-initialized weights and zero biases in a store.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    pub fn weight(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let t = xavier_uniform(shape, self.rng);
        self.store.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::ones(shape))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn xavier_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = xavier_uniform(&[30, 20], &mut rng);
        let a = (6.0f64 / 50.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() < a));
        let mean = t.sum() / t.numel() as f64;
        assert!(mean.abs() < 0.05);
    }
}
