use crate::error::{Error, Result};
use crate::math::{Graph, Init, ParamId, Var};

/// Parameters of one LSTM cell, gate order (input, forget, candidate, output).
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(init: &mut Init<'_>, prefix: &str, input: usize, hidden: usize) -> Self {
        LstmCell {
            w_x: init.weight(&format!("{prefix}.w_x"), &[input, 4 * hidden]),
            w_h: init.weight(&format!("{prefix}.w_h"), &[hidden, 4 * hidden]),
            bias: init.zeros(&format!("{prefix}.b"), &[4 * hidden]),
            input,
            hidden,
        }
    }
}

/// One step for a batch: `x[B×d_in]`, `h_prev`, `c_prev` `[B×d_h]`.
/// Returns `(h, c)`. One-dimensional inputs are treated as a batch of one.
pub fn lstm_cell(g: &mut Graph<'_>, x: Var, h_prev: Var, c_prev: Var, p: &LstmCell) -> Result<(Var, Var)> {
    let x = as_matrix(g, x)?;
    let h_prev = as_matrix(g, h_prev)?;
    let c_prev = as_matrix(g, c_prev)?;
    for (what, v, want) in [("input", x, p.input), ("hidden", h_prev, p.hidden), ("cell", c_prev, p.hidden)] {
        if g.value(v).cols() != want {
            return Err(Error::Dimension(format!(
                "lstm {what} {:?} for cell with width {want}",
                g.value(v).shape()
            )));
        }
    }
    let (wx, wh, b) = (g.param(p.w_x), g.param(p.w_h), g.param(p.bias));
    let gx = g.matmul(x, wx)?;
    let gh = g.matmul(h_prev, wh)?;
    let gates = g.add(gx, gh)?;
    let gates = g.add_row(gates, b)?;
    let hc = g.lstm_pointwise(gates, c_prev)?;
    let h = g.slice_cols(hc, 0, p.hidden)?;
    let c = g.slice_cols(hc, p.hidden, 2 * p.hidden)?;
    Ok((h, c))
}

fn as_matrix(g: &mut Graph<'_>, v: Var) -> Result<Var> {
    if g.value(v).shape().len() == 1 {
        let n = g.value(v).numel();
        g.reshape(v, vec![1, n])
    } else {
        Ok(v)
    }
}
