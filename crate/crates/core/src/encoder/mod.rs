//! Content layer (stacked bidirectional LSTM) and sentence layer
//! (self-attention over position-augmented states, then max-pooling).
//!
//! Every sequence tensor is time-major, `[T·B × width]`. Padded positions
//! `t ≥ lengths[b]` never update a recurrent state: the forward direction
//! holds its last real state there and the backward direction holds its
//! initial (end) state, so reading position `lengths[b]` of the backward
//! sequence yields the end state.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::math::{Graph, Init, Linear, LstmCell, ParamId, Tensor, Var};

pub const FORWARD: usize = 0;
pub const BACKWARD: usize = 1;

/// Learned initial `(h, c)` of one direction of one layer.
#[derive(Clone, Debug)]
pub struct InitialState {
    pub h: ParamId,
    pub c: ParamId,
}

/// `L` layers of forward and backward LSTMs. Layer 1 reads the embeddings in
/// both directions; each direction of layer `l > 1` reads that direction's
/// layer `l − 1` states, which keeps the forward state at `t` a function of
/// positions `0..=t` only and the backward state of `t..` only.
#[derive(Clone, Debug)]
pub struct BiLstmStack {
    /// `cells[l][d]` for layer `l` and direction `d`.
    pub cells: Vec<[LstmCell; 2]>,
    pub initial: Vec<[InitialState; 2]>,
    pub input: usize,
    pub hidden: usize,
}

impl BiLstmStack {
    pub fn new(init: &mut Init<'_>, prefix: &str, input: usize, hidden: usize, layers: usize) -> Self {
        let mut cells = Vec::with_capacity(layers);
        let mut initial = Vec::with_capacity(layers);
        for l in 0..layers {
            let d_in = if l == 0 { input } else { hidden };
            let make = |init: &mut Init<'_>, dir: &str| {
                let p = format!("{prefix}.l{l}.{dir}");
                let cell = LstmCell::new(init, &p, d_in, hidden);
                let st = InitialState {
                    h: init.zeros(&format!("{p}.h0"), &[hidden]),
                    c: init.zeros(&format!("{p}.c0"), &[hidden]),
                };
                (cell, st)
            };
            let (fc, fs) = make(init, "fwd");
            let (bc, bs) = make(init, "bwd");
            cells.push([fc, bc]);
            initial.push([fs, bs]);
        }
        BiLstmStack {
            cells,
            initial,
            input,
            hidden,
        }
    }

    pub fn layers(&self) -> usize {
        self.cells.len()
    }

    /// Runs every layer over `x[T·B × input]` and returns all states.
    pub fn encode(&self, g: &mut Graph<'_>, x: Var, lengths: &[usize], dropout: f64) -> Result<EncoderState> {
        let batch = lengths.len();
        let rows = g.value(x).rows();
        if batch == 0 || rows == 0 || rows % batch != 0 {
            return Err(Error::Usage("cannot encode an empty sequence batch".into()));
        }
        let len = rows / batch;
        if lengths.iter().any(|&l| l == 0 || l > len) {
            return Err(Error::Usage(format!("sequence lengths {lengths:?} for {len} time steps")));
        }
        if g.value(x).cols() != self.input {
            return Err(Error::Dimension(format!(
                "encoder input width {} for stack expecting {}",
                g.value(x).cols(),
                self.input
            )));
        }
        let mut inputs = [x, x];
        let mut hidden = Vec::with_capacity(self.layers());
        let mut cell = Vec::with_capacity(self.layers());
        for (l, cells) in self.cells.iter().enumerate() {
            if l > 0 {
                for v in inputs.iter_mut() {
                    *v = g.dropout(*v, dropout);
                }
            }
            let mut hs = [x, x];
            let mut cs = [x, x];
            for dir in [FORWARD, BACKWARD] {
                let (h, c) = self.run_direction(g, inputs[dir], &cells[dir], &self.initial[l][dir], dir, lengths, len)?;
                hs[dir] = h;
                cs[dir] = c;
            }
            inputs = hs;
            hidden.push(hs);
            cell.push(cs);
        }
        let top = *hidden.last().expect("at least one layer");
        let content = g.concat_cols(&top)?;
        Ok(EncoderState {
            hidden,
            cell,
            content,
            lengths: lengths.to_vec(),
            max_len: len,
            hidden_size: self.hidden,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn run_direction(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        cell: &LstmCell,
        start: &InitialState,
        dir: usize,
        lengths: &[usize],
        len: usize,
    ) -> Result<(Var, Var)> {
        let batch = lengths.len();
        let hsz = self.hidden;
        let (wx, wh, b) = (g.param(cell.w_x), g.param(cell.w_h), g.param(cell.bias));
        let xw = g.matmul(x, wx)?;
        let xw = g.add_row(xw, b)?;
        let (h0, c0) = (g.param(start.h), g.param(start.c));
        let h0 = g.repeat_rows(h0, batch)?;
        let c0 = g.repeat_rows(c0, batch)?;
        let mut hc = g.concat_cols(&[h0, c0])?;
        let mut steps = vec![hc; len];
        let order: Vec<usize> = if dir == FORWARD {
            (0..len).collect()
        } else {
            (0..len).rev().collect()
        };
        for t in order {
            let gx = g.slice_rows(xw, t * batch, (t + 1) * batch)?;
            let h_prev = g.slice_cols(hc, 0, hsz)?;
            let c_prev = g.slice_cols(hc, hsz, 2 * hsz)?;
            let gh = g.matmul(h_prev, wh)?;
            let gates = g.add(gx, gh)?;
            let next = g.lstm_pointwise(gates, c_prev)?;
            let live: Vec<bool> = lengths.iter().map(|&l| t < l).collect();
            hc = if live.iter().all(|&m| m) {
                next
            } else {
                g.blend(next, hc, live)?
            };
            steps[t] = hc;
        }
        let all = g.concat_rows(&steps)?;
        let h = g.slice_cols(all, 0, hsz)?;
        let c = g.slice_cols(all, hsz, 2 * hsz)?;
        Ok((h, c))
    }

    /// Learned initial hidden state of the top layer in direction `dir`,
    /// repeated for `batch` rows.
    pub fn top_initial(&self, g: &mut Graph<'_>, dir: usize, batch: usize) -> Result<Var> {
        let h = g.param(self.initial[self.layers() - 1][dir].h);
        g.repeat_rows(h, batch)
    }
}

/// All recurrent states of one batch.
#[derive(Clone, Debug)]
pub struct EncoderState {
    /// `hidden[l][d]`: `[T·B × d_h]` hidden states of layer `l`, direction `d`.
    pub hidden: Vec<[Var; 2]>,
    pub cell: Vec<[Var; 2]>,
    /// `v^(i)`: top forward and backward hidden states side by side, `[T·B × 2·d_h]`.
    pub content: Var,
    pub lengths: Vec<usize>,
    pub max_len: usize,
    pub hidden_size: usize,
}

impl EncoderState {
    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn top(&self, dir: usize) -> Var {
        self.hidden.last().expect("at least one layer")[dir]
    }
}

/// Sinusoidal position table `[len × dim]`: even columns `sin(t / 10000^(2i/dim))`,
/// odd columns the matching cosine.
pub fn position_table(len: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(&[len, dim]);
    let data = t.data_mut();
    for pos in 0..len {
        for i in 0..dim / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data[pos * dim + 2 * i] = angle.sin();
            data[pos * dim + 2 * i + 1] = angle.cos();
        }
    }
    t
}

/// Self-attention aggregator producing the sentence vector `v^(s)`.
#[derive(Clone, Debug)]
pub struct SentenceLayer {
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    /// Maps the pooled `N + N_pe` vector back to `N`.
    pub proj: Linear,
    pub heads: usize,
    pub pos_dim: usize,
    pub content_dim: usize,
    pub eps: f64,
}

/// Sentence-layer outputs for a batch.
#[derive(Clone, Copy, Debug)]
pub struct Sentence {
    /// `[B × N]`.
    pub vector: Var,
    /// Attention node; see [`Graph::attention_weights`].
    pub attention: Var,
}

impl SentenceLayer {
    pub fn new(init: &mut Init<'_>, prefix: &str, cfg: &ModelConfig) -> Self {
        let d = cfg.attn_dim();
        SentenceLayer {
            ln_gain: init.ones(&format!("{prefix}.ln.g"), &[d]),
            ln_bias: init.zeros(&format!("{prefix}.ln.b"), &[d]),
            w_q: init.weight(&format!("{prefix}.w_q"), &[d, d]),
            w_k: init.weight(&format!("{prefix}.w_k"), &[d, d]),
            w_v: init.weight(&format!("{prefix}.w_v"), &[d, d]),
            w_o: init.weight(&format!("{prefix}.w_o"), &[d, d]),
            proj: Linear::new(init, &format!("{prefix}.proj"), d, cfg.content_dim()),
            heads: cfg.heads,
            pos_dim: cfg.pos_dim,
            content_dim: cfg.content_dim(),
            eps: cfg.ln_eps,
        }
    }

    /// `max_t(MultiHead(LN(v_+)) + v_+)` projected to `N`, where
    /// `v_+ = [v^(i) ; pe]` and the max runs over unmasked positions.
    pub fn aggregate(&self, g: &mut Graph<'_>, state: &EncoderState, dropout: f64) -> Result<Sentence> {
        let batch = state.batch();
        let len = state.max_len;
        let pe = position_table(len, self.pos_dim.max(1));
        let mut rows = Vec::with_capacity(len * batch * self.pos_dim);
        for t in 0..len {
            for _ in 0..batch {
                rows.extend_from_slice(&pe.row(t)[..self.pos_dim]);
            }
        }
        let plus = if self.pos_dim > 0 {
            let pe = g.input(Tensor::new(vec![len * batch, self.pos_dim], rows)?);
            g.concat_cols(&[state.content, pe])?
        } else {
            state.content
        };
        self.aggregate_augmented(g, plus, &state.lengths, dropout)
    }

    /// The same computation from an explicit `v_+ [T·B × (N + N_pe)]`.
    pub fn aggregate_augmented(&self, g: &mut Graph<'_>, plus: Var, lengths: &[usize], dropout: f64) -> Result<Sentence> {
        let (gain, bias) = (g.param(self.ln_gain), g.param(self.ln_bias));
        let normed = g.layer_norm(plus, gain, bias, self.eps)?;
        let mut proj = [normed; 3];
        for (p, w) in proj.iter_mut().zip([self.w_q, self.w_k, self.w_v]) {
            let w = g.param(w);
            *p = g.matmul(normed, w)?;
        }
        let attention = g.attention(proj[0], proj[1], proj[2], lengths, self.heads)?;
        let w_o = g.param(self.w_o);
        let mixed = g.matmul(attention, w_o)?;
        let mixed = g.dropout(mixed, dropout);
        let res = g.add(mixed, plus)?;
        let pooled = g.segment_max(res, lengths)?;
        let vector = self.proj.forward(g, pooled)?;
        Ok(Sentence { vector, attention })
    }
}
