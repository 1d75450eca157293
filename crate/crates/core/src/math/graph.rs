//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node appended to a vector, so the
//! node order is a topological order. [`Graph::backward`] walks the nodes
//! reachable from the loss once each, in reverse index order.
//!
//! Sequence tensors are laid out time-major: row `t·B + b` holds position `t`
//! of batch element `b`.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math::conv::{self, ConvGeom};
use crate::math::params::{Gradients, ParamId, ParamStore};
use crate::math::tensor::{gemm, Tensor};

/// Additive score given to masked attention keys.
pub const MASK_NEG: f64 = -1e30;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

#[derive(Debug)]
enum Op {
    Input,
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Sum(Var),
    WeightedSum(Var, Vec<f64>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    AssembleRows(Vec<Var>, Vec<(usize, usize)>),
    RepeatRows(Var),
    Blend(Var, Var, Vec<bool>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        lengths: Vec<usize>,
        probs: Vec<f64>,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    ConvTranspose2d {
        x: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    AddChannelBias(Var, Var),
    GlobalMaxPool(Var, Vec<usize>),
    SegmentMax(Var, Vec<usize>),
    Dropout(Var, Vec<f64>),
    Reshape(Var),
    CrossEntropyRows {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    MseRows(Var, Vec<f64>),
    BceWithLogits(Var, Vec<f64>),
    LstmPointwise {
        gates: Var,
        c_prev: Var,
        acts: Vec<f64>,
    },
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation over parameters borrowed from a store.
pub struct Graph<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    training: bool,
    rng: ChaCha8Rng,
}

impl Graph<'static> {
    /// A graph with no parameter store, for standalone tensor computations.
    pub fn detached() -> Self {
        Graph {
            store: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }
}

impl<'p> Graph<'p> {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new(store: &'p ParamStore) -> Self {
        Graph {
            store: Some(store),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Switches to training mode; dropout masks are drawn from a generator
    /// seeded with `seed`.
    pub fn training(mut self, seed: u64) -> Self {
        self.training = true;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self
                .store
                .expect("parameter node without store")
                .value(*id),
        }
    }

    fn data(&self, v: Var) -> &[f64] {
        self.value(v).data()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Leaf | Op::Param(_) => true,
            Op::Input => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, &[])
    }

    /// Non-parameter leaf whose gradient is reported by [`Graph::backward`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    /// Node for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        assert!(self.store.is_some(), "graph has no parameter store");
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    // ---------------------------------------------------------------- linear algebra

    /// Matrix product `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!(
                "matmul of {sa:?} by {sb:?}: inner dimensions disagree"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, self.data(a), false, self.data(b), false, 0.0, &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{what} of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("shape preserved");
        self.push(t, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_map(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_map(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_map(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// Adds `bias[c]` to every row of `x[..×c]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(bias).numel() != c {
            return Err(Error::Dimension(format!(
                "row bias {:?} for input {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let b = self.data(bias);
        let data = self
            .data(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(v, w)| v + w))
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::AddRow(x, bias), &[x, bias]))
    }

    /// `x·w + b` for `x[n×in]`, `w[in×out]`, `b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let data = self.data(x).iter().map(|v| v * s).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("shape preserved");
        self.push(t, Op::Scale(x, s), &[x])
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("shape preserved");
        self.push(t, op, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.map(
            x,
            move |v| if v > 0.0 { v } else { slope * v },
            Op::LeakyRelu(x, slope),
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let w = vec![1.0 / n; self.value(x).numel()];
        self.weighted_sum(x, w).expect("weights sized to input")
    }

    /// Scalar `Σ_i w_i · x_i`.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        if weights.len() != self.value(x).numel() {
            return Err(Error::Dimension(format!(
                "{} weights for input {:?}",
                weights.len(),
                self.shape(x)
            )));
        }
        let s = self.data(x).iter().zip(&weights).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(x, weights), &[x]))
    }

    // ---------------------------------------------------------------- structure

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            let shapes: Vec<_> = parts.iter().map(|&p| self.shape(p).to_vec()).collect();
            return Err(Error::Dimension(format!("concat_cols of {shapes:?}")));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let c = self.value(x).cols();
        if start >= end || end > c {
            return Err(Error::Index(format!("column slice {start}..{end} of width {c}")));
        }
        let rows = self.value(x).rows();
        let data = self
            .data(x)
            .chunks(c)
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        let t = Tensor::new(vec![rows, end - start], data)?;
        Ok(self.push(t, Op::SliceCols(x, start), &[x]))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != c) {
            let shapes: Vec<_> = parts.iter().map(|&p| self.shape(p).to_vec()).collect();
            return Err(Error::Dimension(format!("concat_rows of {shapes:?}")));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.data(p));
        }
        let rows = data.len() / c;
        let t = Tensor::new(vec![rows, c], data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, c) = (self.value(x).rows(), self.value(x).cols());
        if start >= end || end > rows {
            return Err(Error::Index(format!("row slice {start}..{end} of {rows} rows")));
        }
        let data = self.data(x)[start * c..end * c].to_vec();
        let t = Tensor::new(vec![end - start, c], data)?;
        Ok(self.push(t, Op::SliceRows(x, start), &[x]))
    }

    /// Picks rows of `x` by index (rows may repeat).
    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let (n, c) = (self.value(x).rows(), self.value(x).cols());
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Index(format!("row {bad} of a {n}-row matrix")));
        }
        if rows.is_empty() {
            return Err(Error::Usage("gather of zero rows".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in &rows {
            data.extend_from_slice(self.value(x).row(r));
        }
        let t = Tensor::new(vec![rows.len(), c], data)?;
        Ok(self.push(t, Op::GatherRows(x, rows), &[x]))
    }

    /// Builds a matrix whose row `i` is row `picks[i].1` of `sources[picks[i].0]`.
    pub fn assemble_rows(&mut self, sources: &[Var], picks: Vec<(usize, usize)>) -> Result<Var> {
        let c = self.value(sources[0]).cols();
        if sources.iter().any(|&s| self.value(s).cols() != c) {
            return Err(Error::Dimension("assemble_rows sources differ in width".into()));
        }
        let mut data = Vec::with_capacity(picks.len() * c);
        for &(s, r) in &picks {
            let src = sources
                .get(s)
                .ok_or_else(|| Error::Index(format!("source {s} of {}", sources.len())))?;
            if r >= self.value(*src).rows() {
                return Err(Error::Index(format!("row {r} of source {s}")));
            }
            data.extend_from_slice(self.value(*src).row(r));
        }
        let t = Tensor::new(vec![picks.len(), c], data)?;
        Ok(self.push(t, Op::AssembleRows(sources.to_vec(), picks), sources))
    }

    /// Repeats a single row (or vector) `n` times.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let c = self.value(x).numel();
        if self.value(x).rows() != 1 {
            return Err(Error::Dimension(format!("repeat_rows of {:?}", self.shape(x))));
        }
        let data = self.data(x).repeat(n);
        let t = Tensor::new(vec![n, c], data)?;
        Ok(self.push(t, Op::RepeatRows(x), &[x]))
    }

    /// Row-wise select: row `r` comes from `new` where `mask[r]`, else from `old`.
    pub fn blend(&mut self, new: Var, old: Var, mask: Vec<bool>) -> Result<Var> {
        self.same_shape(new, old, "blend")?;
        let c = self.value(new).cols();
        if mask.len() != self.value(new).rows() {
            return Err(Error::Dimension("blend mask length".into()));
        }
        let mut data = Vec::with_capacity(mask.len() * c);
        for (r, &m) in mask.iter().enumerate() {
            let src = if m { new } else { old };
            data.extend_from_slice(self.value(src).row(r));
        }
        let t = Tensor::new(self.shape(new).to_vec(), data)?;
        Ok(self.push(t, Op::Blend(new, old, mask), &[new, old]))
    }

    // ---------------------------------------------------------------- normalization

    /// Softmax along the last axis; the maximum is subtracted first.
    pub fn softmax(&mut self, x: Var) -> Var {
        let c = self.value(x).cols();
        let mut data = self.data(x).to_vec();
        data.chunks_mut(c).for_each(softmax_in_place);
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("shape preserved");
        self.push(t, Op::Softmax(x), &[x])
    }

    /// Normalizes each row to zero mean and unit variance (`eps` added to the
    /// variance), then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(gain).numel() != c || self.value(bias).numel() != c {
            return Err(Error::Dimension(format!(
                "layer_norm affine of {:?}/{:?} for width {c}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let rows = self.value(x).rows();
        let mut xhat = Vec::with_capacity(rows * c);
        let mut rstd = Vec::with_capacity(rows);
        for row in self.data(x).chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            xhat.extend(row.iter().map(|v| (v - mean) * r));
        }
        let (gd, bd) = (self.data(gain), self.data(bias));
        let out = xhat
            .chunks(c)
            .flat_map(|row| row.iter().zip(gd).zip(bd).map(|((h, g), b)| h * g + b))
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Element dropout with inverted scaling; identity outside training mode.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if !self.training || p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("shape preserved");
        self.push(t, Op::Dropout(x, mask), &[x])
    }

    // ---------------------------------------------------------------- attention

    /// Multi-head scaled dot-product attention over time-major sequences.
    ///
    /// `q`, `k`, `v` are `[T·B × D]` with `D` divisible by `heads`; head `j`
    /// uses columns `j·d..(j+1)·d`. Keys at `t ≥ lengths[b]` are masked.
    /// Output is the concatenation of head outputs, `[T·B × D]`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        lengths: &[usize],
        heads: usize,
    ) -> Result<Var> {
        self.same_shape(q, k, "attention q/k")?;
        self.same_shape(q, v, "attention q/v")?;
        let batch = lengths.len();
        let (rows, width) = (self.value(q).rows(), self.value(q).cols());
        if batch == 0 || rows % batch != 0 || heads == 0 || width % heads != 0 {
            return Err(Error::Dimension(format!(
                "attention over {rows}×{width} with batch {batch}, {heads} heads"
            )));
        }
        let len = rows / batch;
        if lengths.iter().any(|&l| l == 0 || l > len) {
            return Err(Error::Dimension("attention lengths out of range".into()));
        }
        let d = width / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![0.0; batch * heads * len * len];
        let mut out = vec![0.0; rows * width];
        let mut scores = vec![0.0; len];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * d;
                for ti in 0..len {
                    let qi = &qd[(ti * batch + b) * width + off..][..d];
                    for (tj, s) in scores.iter_mut().enumerate() {
                        *s = if tj < lengths[b] {
                            let kj = &kd[(tj * batch + b) * width + off..][..d];
                            qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale
                        } else {
                            MASK_NEG
                        };
                    }
                    softmax_in_place(&mut scores);
                    let p = &mut probs[((b * heads + h) * len + ti) * len..][..len];
                    p.copy_from_slice(&scores);
                    let o = &mut out[(ti * batch + b) * width + off..][..d];
                    for (tj, &w) in p.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let vj = &vd[(tj * batch + b) * width + off..][..d];
                        for (oo, vv) in o.iter_mut().zip(vj) {
                            *oo += w * vv;
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![rows, width], out)?;
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                lengths: lengths.to_vec(),
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Attention weights recorded by an [`Graph::attention`] node, laid out
    /// `[B][H][T_query][T_key]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Elementwise maximum over the first `lengths[b]` time steps of each
    /// batch element: `[T·B × D] → [B × D]`.
    pub fn segment_max(&mut self, x: Var, lengths: &[usize]) -> Result<Var> {
        let batch = lengths.len();
        let (rows, c) = (self.value(x).rows(), self.value(x).cols());
        if batch == 0 || rows % batch != 0 {
            return Err(Error::Dimension("segment_max batch".into()));
        }
        let len = rows / batch;
        if lengths.iter().any(|&l| l == 0 || l > len) {
            return Err(Error::Dimension("segment_max lengths out of range".into()));
        }
        let xd = self.data(x);
        let mut out = vec![f64::NEG_INFINITY; batch * c];
        let mut arg = vec![0usize; batch * c];
        for (b, &l) in lengths.iter().enumerate() {
            for t in 0..l {
                let r = t * batch + b;
                for j in 0..c {
                    let val = xd[r * c + j];
                    if val > out[b * c + j] {
                        out[b * c + j] = val;
                        arg[b * c + j] = r;
                    }
                }
            }
        }
        let t = Tensor::new(vec![batch, c], out)?;
        Ok(self.push(t, Op::SegmentMax(x, arg), &[x]))
    }

    // ---------------------------------------------------------------- convolution

    fn conv_dims(&self, x: Var, kernel: Var) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
        let (sx, sk) = (self.shape(x), self.shape(kernel));
        if sk.len() != 4 || sk[2] != sk[3] || !(sx.len() == 3 || sx.len() == 4) {
            return Err(Error::Dimension(format!(
                "convolution input {sx:?} with kernels {sk:?}"
            )));
        }
        let (b, c, h, w) = if sx.len() == 3 {
            (1, sx[0], sx[1], sx[2])
        } else {
            (sx[0], sx[1], sx[2], sx[3])
        };
        Ok((b, c, h, w, sk[0], sk[1], sk[2]))
    }

    /// Cross-correlation of `x[C_in×H×W]` (or a batch `[B×C_in×H×W]`) with
    /// `kernels[C_out×C_in×k×k]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (b, c, h, w, c_out, c_in, k) = self.conv_dims(x, kernel)?;
        if c != c_in {
            return Err(Error::Dimension(format!(
                "conv2d input {:?} has {c} channels, kernels {:?} expect {c_in}",
                self.shape(x),
                self.shape(kernel)
            )));
        }
        let (oh, ow) = match (
            conv::conv_out_size(h, k, stride, pad),
            conv::conv_out_size(w, k, stride, pad),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::Dimension(format!(
                    "kernel {k}×{k} larger than padded input {:?} (padding {pad})",
                    self.shape(x)
                )))
            }
        };
        let geom = ConvGeom {
            channels: c,
            in_h: h,
            in_w: w,
            k,
            stride,
            pad,
            out_h: oh,
            out_w: ow,
        };
        let (cr, cc) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![0.0; b * cr * cc];
        let mut out = vec![0.0; b * c_out * cc];
        let xd = self.data(x);
        let kd = self.data(kernel);
        for i in 0..b {
            let col = &mut cols[i * cr * cc..(i + 1) * cr * cc];
            conv::im2col(&xd[i * c * h * w..(i + 1) * c * h * w], &geom, col);
            gemm(c_out, cr, cc, 1.0, kd, false, col, false, 0.0, &mut out[i * c_out * cc..(i + 1) * c_out * cc]);
        }
        let shape = if self.shape(x).len() == 3 {
            vec![c_out, oh, ow]
        } else {
            vec![b, c_out, oh, ow]
        };
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Conv2d { x, kernel, geom, cols }, &[x, kernel]))
    }

    /// Adjoint of [`Graph::conv2d`]: maps `[C×H×W]` to
    /// `[C'×((H−1)s−2p+k)×((W−1)s−2p+k)]` with kernels `[C×C'×k×k]`.
    pub fn conv_transpose2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (b, c, h, w, k_in, c_out, k) = self.conv_dims(x, kernel)?;
        if c != k_in {
            return Err(Error::Dimension(format!(
                "transposed conv input {:?} has {c} channels, kernels {:?} expect {k_in}",
                self.shape(x),
                self.shape(kernel)
            )));
        }
        let (oh, ow) = match (
            conv::transposed_out_size(h, k, stride, pad),
            conv::transposed_out_size(w, k, stride, pad),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::Dimension(format!(
                    "transposed conv of {:?} with kernel {k} and padding {pad} has empty output",
                    self.shape(x)
                )))
            }
        };
        // Geometry of the forward convolution this operator is the adjoint of.
        let geom = ConvGeom {
            channels: c_out,
            in_h: oh,
            in_w: ow,
            k,
            stride,
            pad,
            out_h: h,
            out_w: w,
        };
        if conv::conv_out_size(oh, k, stride, pad) != Some(h)
            || conv::conv_out_size(ow, k, stride, pad) != Some(w)
        {
            return Err(Error::Dimension("transposed conv geometry does not invert".into()));
        }
        let (cr, cc) = (geom.col_rows(), geom.col_cols());
        let xd = self.data(x);
        let kd = self.data(kernel);
        let mut out = vec![0.0; b * c_out * oh * ow];
        let mut cols = vec![0.0; cr * cc];
        for i in 0..b {
            gemm(cr, c, cc, 1.0, kd, true, &xd[i * c * cc..(i + 1) * c * cc], false, 0.0, &mut cols);
            conv::col2im(&cols, &geom, &mut out[i * c_out * oh * ow..(i + 1) * c_out * oh * ow]);
        }
        let shape = if self.shape(x).len() == 3 {
            vec![c_out, oh, ow]
        } else {
            vec![b, c_out, oh, ow]
        };
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::ConvTranspose2d { x, kernel, geom }, &[x, kernel]))
    }

    /// Adds `bias[C]` to every spatial position of channel `C` in
    /// `[C×H×W]` or `[B×C×H×W]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let s = self.shape(x);
        let c = s[s.len() - 3];
        if self.value(bias).numel() != c {
            return Err(Error::Dimension(format!("channel bias {:?} for {:?}", self.shape(bias), s)));
        }
        let plane = s[s.len() - 1] * s[s.len() - 2];
        let bd = self.data(bias);
        let data = self
            .data(x)
            .chunks(plane)
            .enumerate()
            .flat_map(|(i, p)| {
                let b = bd[i % c];
                p.iter().map(move |v| v + b)
            })
            .collect();
        let t = Tensor::new(s.to_vec(), data)?;
        Ok(self.push(t, Op::AddChannelBias(x, bias), &[x, bias]))
    }

    /// Spatial max per feature map: `[B×C×H×W] → [B×C]` (`[C×H×W] → [1×C]`).
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 {
            return Err(Error::Dimension(format!("global_max_pool of {s:?}")));
        }
        let plane = s[s.len() - 1] * s[s.len() - 2];
        let c = s[s.len() - 3];
        let maps = self.value(x).numel() / plane;
        let mut out = Vec::with_capacity(maps);
        let mut arg = Vec::with_capacity(maps);
        for (i, p) in self.data(x).chunks(plane).enumerate() {
            let (mut best, mut at) = (p[0], 0);
            for (j, &v) in p.iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    at = j;
                }
            }
            out.push(best);
            arg.push(i * plane + at);
        }
        let t = Tensor::new(vec![maps / c, c], out)?;
        Ok(self.push(t, Op::GlobalMaxPool(x, arg), &[x]))
    }

    // ---------------------------------------------------------------- recurrent

    /// LSTM gate nonlinearities. `gates[B×4h]` holds pre-activations in the
    /// order (input, forget, candidate, output); returns `[B×2h] = [h | c]`.
    pub fn lstm_pointwise(&mut self, gates: Var, c_prev: Var) -> Result<Var> {
        let (b, h4) = (self.value(gates).rows(), self.value(gates).cols());
        let hd = h4 / 4;
        if h4 % 4 != 0 || self.value(c_prev).rows() != b || self.value(c_prev).cols() != hd {
            return Err(Error::Dimension(format!(
                "lstm gates {:?} with cell {:?}",
                self.shape(gates),
                self.shape(c_prev)
            )));
        }
        let (gd, cd) = (self.data(gates), self.data(c_prev));
        // acts per row: i, f, g, o, tanh(c)
        let mut acts = vec![0.0; b * 5 * hd];
        let mut out = vec![0.0; b * 2 * hd];
        for r in 0..b {
            let g = &gd[r * h4..(r + 1) * h4];
            let a = &mut acts[r * 5 * hd..(r + 1) * 5 * hd];
            let o = &mut out[r * 2 * hd..(r + 1) * 2 * hd];
            for j in 0..hd {
                let i_g = sigmoid(g[j]);
                let f_g = sigmoid(g[hd + j]);
                let c_g = g[2 * hd + j].tanh();
                let o_g = sigmoid(g[3 * hd + j]);
                let c = f_g * cd[r * hd + j] + i_g * c_g;
                let tc = c.tanh();
                a[j] = i_g;
                a[hd + j] = f_g;
                a[2 * hd + j] = c_g;
                a[3 * hd + j] = o_g;
                a[4 * hd + j] = tc;
                o[j] = o_g * tc;
                o[hd + j] = c;
            }
        }
        let t = Tensor::new(vec![b, 2 * hd], out)?;
        Ok(self.push(t, Op::LstmPointwise { gates, c_prev, acts }, &[gates, c_prev]))
    }

    // ---------------------------------------------------------------- losses

    /// Per-row `−log softmax(logits)[target]`: `[n×C] → [n]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        let (n, c) = (self.value(logits).rows(), self.value(logits).cols());
        if targets.len() != n {
            return Err(Error::Dimension(format!("{} targets for {n} rows", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index(format!("target {bad} for {c} classes")));
        }
        let mut probs = self.data(logits).to_vec();
        let mut losses = Vec::with_capacity(n);
        for (row, &t) in probs.chunks_mut(c).zip(&targets) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            losses.push(lse - row[t]);
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let t = Tensor::new(vec![n], losses)?;
        Ok(self.push(t, Op::CrossEntropyRows { logits, targets, probs }, &[logits]))
    }

    /// Scalar cross-entropy of a single logit vector.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let n = self.value(logits).numel();
        let row = self.reshape(logits, vec![1, n])?;
        let l = self.cross_entropy_rows(row, vec![target])?;
        Ok(self.sum(l))
    }

    /// Per-row mean squared error against a constant target of equal shape.
    pub fn mse_rows(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        if self.value(pred).numel() != target.numel() {
            return Err(Error::Dimension(format!(
                "mse of {:?} against {:?}",
                self.shape(pred),
                target.shape()
            )));
        }
        let (n, c) = (self.value(pred).rows(), self.value(pred).cols());
        let losses = self
            .data(pred)
            .chunks(c)
            .zip(target.data().chunks(c))
            .map(|(p, t)| p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / c as f64)
            .collect();
        let t = Tensor::new(vec![n], losses)?;
        Ok(self.push(t, Op::MseRows(pred, target.data().to_vec()), &[pred]))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let n = self.value(pred).numel();
        let flat = self.reshape(pred, vec![1, n])?;
        let t = target.clone().reshape(vec![1, n])?;
        let l = self.mse_rows(flat, &t)?;
        Ok(self.sum(l))
    }

    /// Elementwise binary cross-entropy of logits against labels in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: Vec<f64>) -> Result<Var> {
        if labels.len() != self.value(logits).numel() {
            return Err(Error::Dimension("bce labels length".into()));
        }
        let data = self
            .data(logits)
            .iter()
            .zip(&labels)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-(z.abs())).exp().ln_1p())
            .collect();
        let t = Tensor::new(self.shape(logits).to_vec(), data)?;
        Ok(self.push(t, Op::BceWithLogits(logits, labels), &[logits]))
    }

    // ---------------------------------------------------------------- backward

    /// Nodes reachable from `root`, in the order backward visits them.
    pub fn backward_order(&self, root: Var) -> Vec<Var> {
        let mut live = vec![false; root.0 + 1];
        live[root.0] = true;
        let mut order = Vec::new();
        for i in (0..=root.0).rev() {
            if !live[i] || !self.nodes[i].needs_grad {
                continue;
            }
            order.push(Var(i));
            for inp in self.inputs(i) {
                live[inp.0] = true;
            }
        }
        order
    }

    fn inputs(&self, i: usize) -> Vec<Var> {
        match &self.nodes[i].op {
            Op::Input | Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                vec![*a, *b]
            }
            Op::Blend(a, b, _) | Op::AddChannelBias(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::LeakyRelu(x, _)
            | Op::Sum(x)
            | Op::WeightedSum(x, _)
            | Op::SliceCols(x, _)
            | Op::SliceRows(x, _)
            | Op::GatherRows(x, _)
            | Op::RepeatRows(x)
            | Op::Softmax(x)
            | Op::GlobalMaxPool(x, _)
            | Op::SegmentMax(x, _)
            | Op::Dropout(x, _)
            | Op::Reshape(x)
            | Op::MseRows(x, _)
            | Op::BceWithLogits(x, _) => vec![*x],
            Op::ConcatCols(v) | Op::ConcatRows(v) | Op::AssembleRows(v, _) => v.clone(),
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::Conv2d { x, kernel, .. } | Op::ConvTranspose2d { x, kernel, .. } => vec![*x, *kernel],
            Op::CrossEntropyRows { logits, .. } => vec![*logits],
            Op::LstmPointwise { gates, c_prev, .. } => vec![*gates, *c_prev],
        }
    }

    /// Reverse-mode gradients of the scalar `loss` with respect to every
    /// parameter and leaf it depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();
        for var in self.backward_order(loss) {
            let i = var.0;
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Param(id) => out.params.push((*id, g)),
                Op::Leaf => {
                    out.leaves.insert(i, g);
                }
                _ => self.propagate(i, &g, &mut grads),
            }
        }
        out.params.sort_by_key(|(id, _)| *id);
        Ok(out)
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = self.value(Var(i)).data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.value(v).numel()]);
            f(slot);
        };
        match &node.op {
            Op::Input | Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| gemm(m, n, k, 1.0, g, false, bd, true, 1.0, ga));
                acc(*b, &mut |gb| gemm(k, m, n, 1.0, ad, true, g, false, 1.0, gb));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| {
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(bd) {
                        *d += s * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((d, s), x) in gb.iter_mut().zip(g).zip(ad) {
                        *d += s * x;
                    }
                });
            }
            Op::AddRow(x, bias) => {
                acc(*x, &mut |gx| add_into(gx, g));
                let c = self.value(*bias).numel();
                acc(*bias, &mut |gb| {
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |gx| {
                gx.iter_mut().zip(g).for_each(|(d, v)| *d += v * s)
            }),
            Op::Sigmoid(x) => acc(*x, &mut |gx| {
                for ((d, s), y) in gx.iter_mut().zip(g).zip(out) {
                    *d += s * y * (1.0 - y);
                }
            }),
            Op::Tanh(x) => acc(*x, &mut |gx| {
                for ((d, s), y) in gx.iter_mut().zip(g).zip(out) {
                    *d += s * (1.0 - y * y);
                }
            }),
            Op::LeakyRelu(x, slope) => {
                let xd = self.data(*x);
                acc(*x, &mut |gx| {
                    for ((d, s), v) in gx.iter_mut().zip(g).zip(xd) {
                        *d += if *v > 0.0 { *s } else { s * slope };
                    }
                })
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|d| *d += g[0])),
            Op::WeightedSum(x, w) => acc(*x, &mut |gx| {
                gx.iter_mut().zip(w).for_each(|(d, w)| *d += g[0] * w)
            }),
            Op::Reshape(x) => acc(*x, &mut |gx| add_into(gx, g)),
            Op::Dropout(x, mask) => acc(*x, &mut |gx| {
                for ((d, s), m) in gx.iter_mut().zip(g).zip(mask) {
                    *d += s * m;
                }
            }),
            Op::ConcatCols(parts) => {
                let rows = self.value(parts[0]).rows();
                let total = g.len() / rows;
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    acc(p, &mut |gp| {
                        for r in 0..rows {
                            add_into(&mut gp[r * c..(r + 1) * c], &g[r * total + off..][..c]);
                        }
                    });
                    off += c;
                }
            }
            Op::SliceCols(x, start) => {
                let c = self.value(*x).cols();
                let w = self.value(Var(i)).cols();
                acc(*x, &mut |gx| {
                    for (r, row) in g.chunks(w).enumerate() {
                        add_into(&mut gx[r * c + start..][..w], row);
                    }
                })
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    acc(p, &mut |gp| add_into(gp, &g[off..off + n]));
                    off += n;
                }
            }
            Op::SliceRows(x, start) => {
                let c = self.value(*x).cols();
                acc(*x, &mut |gx| add_into(&mut gx[start * c..start * c + g.len()], g))
            }
            Op::GatherRows(x, rows) => {
                let c = self.value(*x).cols();
                acc(*x, &mut |gx| {
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut gx[r * c..(r + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                })
            }
            Op::AssembleRows(sources, picks) => {
                let c = self.value(sources[0]).cols();
                for (si, &s) in sources.iter().enumerate() {
                    acc(s, &mut |gs| {
                        for (k, &(src, r)) in picks.iter().enumerate() {
                            if src == si {
                                add_into(&mut gs[r * c..(r + 1) * c], &g[k * c..(k + 1) * c]);
                            }
                        }
                    });
                }
            }
            Op::RepeatRows(x) => {
                let c = self.value(*x).numel();
                acc(*x, &mut |gx| {
                    for row in g.chunks(c) {
                        add_into(gx, row);
                    }
                })
            }
            Op::Blend(new, old, mask) => {
                let c = self.value(*new).cols();
                for (v, want) in [(*new, true), (*old, false)] {
                    acc(v, &mut |gv| {
                        for (r, &m) in mask.iter().enumerate() {
                            if m == want {
                                add_into(&mut gv[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                            }
                        }
                    });
                }
            }
            Op::Softmax(x) => {
                let c = self.value(*x).cols();
                acc(*x, &mut |gx| {
                    for ((d, s), y) in gx.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                        let dot: f64 = s.iter().zip(y).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            d[j] += y[j] * (s[j] - dot);
                        }
                    }
                })
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = self.value(*x).cols();
                let gd = self.data(*gain);
                acc(*gain, &mut |gg| {
                    for (s, h) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += s[j] * h[j];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for s in g.chunks(c) {
                        add_into(gb, s);
                    }
                });
                acc(*x, &mut |gx| {
                    let mut dxhat = vec![0.0; c];
                    for (r, (s, h)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        for j in 0..c {
                            dxhat[j] = s[j] * gd[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / c as f64;
                        let m2 = dxhat.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        let dst = &mut gx[r * c..(r + 1) * c];
                        for j in 0..c {
                            dst[j] += rstd[r] * (dxhat[j] - m1 - h[j] * m2);
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                lengths,
                probs,
            } => self.attention_backward(g, *q, *k, *v, *batch, *heads, lengths, probs, grads),
            Op::SegmentMax(x, arg) | Op::GlobalMaxPool(x, arg) => {
                let per = matches!(node.op, Op::SegmentMax(..));
                let c = self.value(Var(i)).cols();
                let xc = self.value(*x).cols();
                acc(*x, &mut |gx| {
                    for (j, &src) in arg.iter().enumerate() {
                        if per {
                            gx[src * xc + j % c] += g[j];
                        } else {
                            gx[src] += g[j];
                        }
                    }
                })
            }
            Op::Conv2d { x, kernel, geom, cols } => {
                let c_out = self.shape(*kernel)[0];
                let (cr, cc) = (geom.col_rows(), geom.col_cols());
                let b = self.value(*x).numel() / (geom.channels * geom.in_h * geom.in_w);
                let kd = self.data(*kernel);
                acc(*kernel, &mut |gk| {
                    for n in 0..b {
                        gemm(c_out, cc, cr, 1.0, &g[n * c_out * cc..][..c_out * cc], false, &cols[n * cr * cc..][..cr * cc], true, 1.0, gk);
                    }
                });
                acc(*x, &mut |gx| {
                    let mut dcols = vec![0.0; cr * cc];
                    let plane = geom.channels * geom.in_h * geom.in_w;
                    for n in 0..b {
                        gemm(cr, c_out, cc, 1.0, kd, true, &g[n * c_out * cc..][..c_out * cc], false, 0.0, &mut dcols);
                        conv::col2im(&dcols, geom, &mut gx[n * plane..(n + 1) * plane]);
                    }
                });
            }
            Op::ConvTranspose2d { x, kernel, geom } => {
                let c_in = self.shape(*kernel)[0];
                let (cr, cc) = (geom.col_rows(), geom.col_cols());
                let plane = geom.channels * geom.in_h * geom.in_w;
                let b = g.len() / plane;
                let xd = self.data(*x);
                let kd = self.data(*kernel);
                let mut dcols = vec![0.0; b * cr * cc];
                for n in 0..b {
                    conv::im2col(&g[n * plane..(n + 1) * plane], geom, &mut dcols[n * cr * cc..][..cr * cc]);
                }
                acc(*x, &mut |gx| {
                    for n in 0..b {
                        gemm(c_in, cr, cc, 1.0, kd, false, &dcols[n * cr * cc..][..cr * cc], false, 1.0, &mut gx[n * c_in * cc..][..c_in * cc]);
                    }
                });
                acc(*kernel, &mut |gk| {
                    for n in 0..b {
                        gemm(c_in, cc, cr, 1.0, &xd[n * c_in * cc..][..c_in * cc], false, &dcols[n * cr * cc..][..cr * cc], true, 1.0, gk);
                    }
                });
            }
            Op::AddChannelBias(x, bias) => {
                acc(*x, &mut |gx| add_into(gx, g));
                let s = self.shape(*x);
                let c = s[s.len() - 3];
                let plane = s[s.len() - 1] * s[s.len() - 2];
                acc(*bias, &mut |gb| {
                    for (k, p) in g.chunks(plane).enumerate() {
                        gb[k % c] += p.iter().sum::<f64>();
                    }
                });
            }
            Op::CrossEntropyRows { logits, targets, probs } => {
                let c = self.value(*logits).cols();
                acc(*logits, &mut |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &mut gl[r * c..(r + 1) * c];
                        let p = &probs[r * c..(r + 1) * c];
                        for j in 0..c {
                            row[j] += g[r] * p[j];
                        }
                        row[t] -= g[r];
                    }
                })
            }
            Op::MseRows(pred, target) => {
                let c = self.value(*pred).cols();
                let pd = self.data(*pred);
                acc(*pred, &mut |gp| {
                    for (j, d) in gp.iter_mut().enumerate() {
                        *d += g[j / c] * 2.0 * (pd[j] - target[j]) / c as f64;
                    }
                })
            }
            Op::BceWithLogits(logits, labels) => {
                let zd = self.data(*logits);
                acc(*logits, &mut |gz| {
                    for (j, d) in gz.iter_mut().enumerate() {
                        *d += g[j] * (sigmoid(zd[j]) - labels[j]);
                    }
                })
            }
            Op::LstmPointwise { gates, c_prev, acts } => {
                let b = self.value(*gates).rows();
                let hd = self.value(*gates).cols() / 4;
                let cd = self.data(*c_prev);
                let mut dc_all = vec![0.0; b * hd];
                for r in 0..b {
                    let a = &acts[r * 5 * hd..(r + 1) * 5 * hd];
                    for j in 0..hd {
                        let dh = g[r * 2 * hd + j];
                        let o_g = a[3 * hd + j];
                        let tc = a[4 * hd + j];
                        dc_all[r * hd + j] = g[r * 2 * hd + hd + j] + dh * o_g * (1.0 - tc * tc);
                    }
                }
                acc(*gates, &mut |gg| {
                    for r in 0..b {
                        let a = &acts[r * 5 * hd..(r + 1) * 5 * hd];
                        let row = &mut gg[r * 4 * hd..(r + 1) * 4 * hd];
                        for j in 0..hd {
                            let (i_g, f_g, c_g, o_g, tc) =
                                (a[j], a[hd + j], a[2 * hd + j], a[3 * hd + j], a[4 * hd + j]);
                            let dc = dc_all[r * hd + j];
                            let dh = g[r * 2 * hd + j];
                            row[j] += dc * c_g * i_g * (1.0 - i_g);
                            row[hd + j] += dc * cd[r * hd + j] * f_g * (1.0 - f_g);
                            row[2 * hd + j] += dc * i_g * (1.0 - c_g * c_g);
                            row[3 * hd + j] += dh * tc * o_g * (1.0 - o_g);
                        }
                    }
                });
                acc(*c_prev, &mut |gc| {
                    for r in 0..b {
                        for j in 0..hd {
                            gc[r * hd + j] += dc_all[r * hd + j] * acts[r * 5 * hd + hd + j];
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        lengths: &[usize],
        probs: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (rows, width) = (self.value(q).rows(), self.value(q).cols());
        let len = rows / batch;
        let d = width / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut dq = vec![0.0; rows * width];
        let mut dk = vec![0.0; rows * width];
        let mut dv = vec![0.0; rows * width];
        let mut dp = vec![0.0; len];
        for b in 0..batch {
            let l = lengths[b];
            for h in 0..heads {
                let off = h * d;
                for ti in 0..len {
                    let p = &probs[((b * heads + h) * len + ti) * len..][..len];
                    let go = &g[(ti * batch + b) * width + off..][..d];
                    for tj in 0..l {
                        let vj = &vd[(tj * batch + b) * width + off..][..d];
                        dp[tj] = go.iter().zip(vj).map(|(a, c)| a * c).sum();
                        let dvj = &mut dv[(tj * batch + b) * width + off..][..d];
                        for (x, y) in dvj.iter_mut().zip(go) {
                            *x += p[tj] * y;
                        }
                    }
                    let dot: f64 = (0..l).map(|tj| dp[tj] * p[tj]).sum();
                    let qi = &qd[(ti * batch + b) * width + off..][..d];
                    for tj in 0..l {
                        let ds = p[tj] * (dp[tj] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &kd[(tj * batch + b) * width + off..][..d];
                        let dqi = &mut dq[(ti * batch + b) * width + off..][..d];
                        for (x, y) in dqi.iter_mut().zip(kj) {
                            *x += ds * y;
                        }
                        let dkj = &mut dk[(tj * batch + b) * width + off..][..d];
                        for (x, y) in dkj.iter_mut().zip(qi) {
                            *x += ds * y;
                        }
                    }
                }
            }
        }
        for (var, grad) in [(q, dq), (k, dk), (v, dv)] {
            if !self.needs(var) {
                continue;
            }
            let slot = grads[var.0].get_or_insert_with(|| vec![0.0; rows * width]);
            add_into(slot, &grad);
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
