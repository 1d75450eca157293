use crate::error::Result;
use crate::math::{Graph, Init, ParamId, Var};

/// Affine map `x·W + b` with `W[in × out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(init: &mut Init<'_>, name: &str, input: usize, output: usize) -> Self {
        Linear {
            w: init.weight(&format!("{name}.w"), &[input, output]),
            b: init.zeros(&format!("{name}.b"), &[output]),
            input,
            output,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.linear(x, w, b)
    }
}

/// Convolution kernels `[out × in × k × k]` plus per-channel bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl Conv {
    pub fn new(init: &mut Init<'_>, name: &str, c_in: usize, c_out: usize, k: usize) -> Self {
        Conv {
            kernel: init.weight(&format!("{name}.k"), &[c_out, c_in, k, k]),
            bias: init.zeros(&format!("{name}.b"), &[c_out]),
        }
    }

    /// Transposed-convolution kernels are stored `[in × out × k × k]`.
    pub fn new_transposed(init: &mut Init<'_>, name: &str, c_in: usize, c_out: usize, k: usize) -> Self {
        Conv {
            kernel: init.weight(&format!("{name}.k"), &[c_in, c_out, k, k]),
            bias: init.zeros(&format!("{name}.b"), &[c_out]),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let (k, b) = (g.param(self.kernel), g.param(self.bias));
        let y = g.conv2d(x, k, stride, pad)?;
        g.add_channel_bias(y, b)
    }

    pub fn forward_transposed(&self, g: &mut Graph<'_>, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let (k, b) = (g.param(self.kernel), g.param(self.bias));
        let y = g.conv_transpose2d(x, k, stride, pad)?;
        g.add_channel_bias(y, b)
    }
}
