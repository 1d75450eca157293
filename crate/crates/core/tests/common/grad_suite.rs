//! Finite-difference checks for every differentiable graph op.

use quesnet::math::{grad_check, Graph, Tensor, Var};
use quesnet::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Projects a tensor-valued output to a scalar with fixed random weights so
/// every output coordinate carries a distinct gradient.
fn project(g: &mut Graph<'static>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let n = g.value(y).numel();
    let w = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    g.weighted_sum(y, w)
}

type OpFn = Box<dyn Fn(&mut Graph<'static>, Var) -> Result<Var>>;

/// `(op name, scalar function of one input, input sample)` for one seed.
pub fn cases(seed: u64) -> Vec<(&'static str, OpFn, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<(&'static str, OpFn, Tensor)> = Vec::new();
    let s = seed;

    let b = random(&[4, 3], &mut rng);
    cases.push((
        "matmul/lhs",
        Box::new(move |g, x| {
            let bv = g.input(b.clone());
            let y = g.matmul(x, bv)?;
            project(g, y, s)
        }),
        random(&[5, 4], &mut rng),
    ));
    let a = random(&[5, 4], &mut rng);
    cases.push((
        "matmul/rhs",
        Box::new(move |g, x| {
            let av = g.input(a.clone());
            let y = g.matmul(av, x)?;
            project(g, y, s)
        }),
        random(&[4, 3], &mut rng),
    ));
    let other = random(&[3, 4], &mut rng);
    cases.push((
        "add_sub_mul",
        Box::new(move |g, x| {
            let o = g.input(other.clone());
            let a = g.add(x, o)?;
            let m = g.mul(a, x)?;
            let d = g.sub(m, o)?;
            project(g, d, s)
        }),
        random(&[3, 4], &mut rng),
    ));
    let bias = random(&[4], &mut rng);
    cases.push((
        "add_row",
        Box::new(move |g, x| {
            let bv = g.leaf(bias.clone());
            let y = g.add_row(x, bv)?;
            let y = g.scale(y, 1.7);
            project(g, y, s)
        }),
        random(&[3, 4], &mut rng),
    ));
    cases.push((
        "sigmoid_tanh",
        Box::new(move |g, x| {
            let a = g.sigmoid(x);
            let b = g.tanh(x);
            let y = g.mul(a, b)?;
            project(g, y, s)
        }),
        random(&[3, 5], &mut rng),
    ));
    cases.push((
        "leaky_relu",
        Box::new(move |g, x| {
            let y = g.leaky_relu(x, 0.01);
            project(g, y, s)
        }),
        random(&[4, 5], &mut rng),
    ));
    cases.push((
        "sum_mean",
        Box::new(move |g, x| {
            let sq = g.mul(x, x)?;
            let a = g.sum(sq);
            let b = g.mean(x);
            let y = g.concat_cols(&[a, b])?;
            project(g, y, s)
        }),
        random(&[3, 3], &mut rng),
    ));
    let right = random(&[3, 2], &mut rng);
    cases.push((
        "concat_slice",
        Box::new(move |g, x| {
            let r = g.input(right.clone());
            let c = g.concat_cols(&[r, x, x])?;
            let a = g.slice_cols(c, 1, 6)?;
            let st = g.concat_rows(&[a, a])?;
            let b = g.slice_rows(st, 2, 5)?;
            project(g, b, s)
        }),
        random(&[3, 3], &mut rng),
    ));
    cases.push((
        "gather_assemble_repeat",
        Box::new(move |g, x| {
            let ga = g.gather_rows(x, vec![2, 0, 2, 1])?;
            let row = g.slice_rows(x, 1, 2)?;
            let rep = g.repeat_rows(row, 3)?;
            let asm = g.assemble_rows(&[ga, rep], vec![(1, 0), (0, 3), (0, 0), (1, 2)])?;
            project(g, asm, s)
        }),
        random(&[3, 4], &mut rng),
    ));
    let old = random(&[4, 3], &mut rng);
    cases.push((
        "blend",
        Box::new(move |g, x| {
            let o = g.leaf(old.clone());
            let y = g.blend(x, o, vec![true, false, false, true])?;
            let y = g.tanh(y);
            project(g, y, s)
        }),
        random(&[4, 3], &mut rng),
    ));
    cases.push((
        "softmax",
        Box::new(move |g, x| {
            let y = g.softmax(x);
            project(g, y, s)
        }),
        random(&[3, 6], &mut rng).scaled(3.0),
    ));
    let gain = random(&[8], &mut rng);
    let lbias = random(&[8], &mut rng);
    cases.push((
        "layer_norm",
        Box::new(move |g, x| {
            let gv = g.leaf(gain.clone());
            let bv = g.leaf(lbias.clone());
            let y = g.layer_norm(x, gv, bv, 1e-5)?;
            project(g, y, s)
        }),
        random(&[4, 8], &mut rng),
    ));
    cases.push((
        "layer_norm/affine",
        Box::new(move |g, x| {
            let xs = g.input(Tensor::new(vec![2, 3], vec![0.3, -1.0, 2.0, 0.5, 0.1, -0.7]).unwrap());
            let gain = g.slice_cols(x, 0, 3)?;
            let bias = g.slice_cols(x, 3, 6)?;
            let y = g.layer_norm(xs, gain, bias, 1e-5)?;
            project(g, y, s)
        }),
        random(&[1, 6], &mut rng),
    ));
    let (t, bsz, d) = (4, 2, 6);
    let k = random(&[t * bsz, d], &mut rng);
    let v = random(&[t * bsz, d], &mut rng);
    cases.push((
        "attention/q",
        Box::new(move |g, x| {
            let kv = g.input(k.clone());
            let vv = g.input(v.clone());
            let y = g.attention(x, kv, vv, &[4, 3], 2)?;
            project(g, y, s)
        }),
        random(&[t * bsz, d], &mut rng),
    ));
    cases.push((
        "attention/self",
        Box::new(move |g, x| {
            let y = g.attention(x, x, x, &[2, 4], 3)?;
            project(g, y, s)
        }),
        random(&[t * bsz, d], &mut rng),
    ));
    cases.push((
        "segment_max",
        Box::new(move |g, x| {
            let y = g.segment_max(x, &[3, 2])?;
            project(g, y, s)
        }),
        random(&[6, 4], &mut rng),
    ));
    let kernels = random(&[4, 2, 3, 3], &mut rng);
    cases.push((
        "conv2d/input",
        Box::new(move |g, x| {
            let kv = g.input(kernels.clone());
            let y = g.conv2d(x, kv, 1, 1)?;
            project(g, y, s)
        }),
        random(&[2, 8, 8], &mut rng),
    ));
    let image = random(&[2, 2, 6, 6], &mut rng);
    cases.push((
        "conv2d/kernels",
        Box::new(move |g, x| {
            let iv = g.input(image.clone());
            let y = g.conv2d(iv, x, 2, 1)?;
            project(g, y, s)
        }),
        random(&[3, 2, 4, 4], &mut rng),
    ));
    let tk = random(&[3, 2, 4, 4], &mut rng);
    cases.push((
        "transposed_conv2d/input",
        Box::new(move |g, x| {
            let kv = g.input(tk.clone());
            let y = g.conv_transpose2d(x, kv, 2, 1)?;
            project(g, y, s)
        }),
        random(&[3, 3, 3], &mut rng),
    ));
    let tin = random(&[2, 3, 3, 3], &mut rng);
    cases.push((
        "transposed_conv2d/kernels",
        Box::new(move |g, x| {
            let iv = g.input(tin.clone());
            let y = g.conv_transpose2d(iv, x, 2, 1)?;
            project(g, y, s)
        }),
        random(&[3, 2, 4, 4], &mut rng),
    ));
    let cb = random(&[3], &mut rng);
    cases.push((
        "channel_bias_maxpool",
        Box::new(move |g, x| {
            let bv = g.leaf(cb.clone());
            let y = g.add_channel_bias(x, bv)?;
            let y = g.global_max_pool(y)?;
            project(g, y, s)
        }),
        random(&[2, 3, 4, 4], &mut rng),
    ));
    cases.push((
        "reshape",
        Box::new(move |g, x| {
            let y = g.reshape(x, vec![3, 4])?;
            let y = g.tanh(y);
            project(g, y, s)
        }),
        random(&[2, 6], &mut rng),
    ));
    let c_prev = random(&[2, 3], &mut rng);
    cases.push((
        "lstm_pointwise/gates",
        Box::new(move |g, x| {
            let c = g.input(c_prev.clone());
            let y = g.lstm_pointwise(x, c)?;
            project(g, y, s)
        }),
        random(&[2, 12], &mut rng).scaled(2.0),
    ));
    let gates = random(&[2, 12], &mut rng);
    cases.push((
        "lstm_pointwise/cell",
        Box::new(move |g, x| {
            let gv = g.input(gates.clone());
            let y = g.lstm_pointwise(gv, x)?;
            project(g, y, s)
        }),
        random(&[2, 3], &mut rng),
    ));
    cases.push((
        "cross_entropy",
        Box::new(move |g, x| {
            let y = g.cross_entropy_rows(x, vec![0, 3, 2])?;
            project(g, y, s)
        }),
        random(&[3, 5], &mut rng).scaled(2.0),
    ));
    let target = random(&[3, 4], &mut rng);
    cases.push((
        "mse",
        Box::new(move |g, x| {
            let a = g.mse_rows(x, &target)?;
            let b = g.mse(x, &target)?;
            let y = g.concat_cols(&[a, b])?;
            project(g, y, s)
        }),
        random(&[3, 4], &mut rng),
    ));
    cases.push((
        "bce_with_logits",
        Box::new(move |g, x| {
            let y = g.bce_with_logits(x, vec![1.0, 0.0, 0.0, 1.0, 1.0])?;
            project(g, y, s)
        }),
        random(&[5], &mut rng).scaled(3.0),
    ));
    cases
}

/// Runs every case for `seed`, returning `(op, max relative error)`.
pub fn run(seed: u64) -> Vec<(&'static str, f64)> {
    cases(seed)
        .into_iter()
        .map(|(name, f, x)| {
            let err = grad_check(f, &x, STEP).unwrap_or_else(|e| panic!("{name}: {e}"));
            (name, err)
        })
        .collect()
}

trait Scaled {
    fn scaled(self, s: f64) -> Self;
}

impl Scaled for Tensor {
    fn scaled(mut self, s: f64) -> Self {
        self.data_mut().iter_mut().for_each(|v| *v *= s);
        self
    }
}
