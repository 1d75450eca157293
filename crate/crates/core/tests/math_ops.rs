mod common;

use common::grad_suite;
use quesnet::math::{grad_check, lstm_cell, Graph, Init, LstmCell, ParamStore, Tensor};
use quesnet::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn every_op_matches_finite_differences_for_three_seeds() {
    for seed in [1, 2, 3] {
        for (name, err) in grad_suite::run(seed) {
            assert!(err < 1e-4, "{name} seed {seed}: relative error {err:e}");
        }
    }
}

#[test]
fn matmul_examples() {
    let mut g = Graph::detached();
    let eye = g.input(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
    let a_t = t(&[3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
    let a = g.input(a_t.clone());
    let y = g.matmul(eye, a).unwrap();
    assert_eq!(g.value(y), &a_t);

    let m = g.input(t(&[2, 2], &[1., 2., 3., 4.]));
    let ones = g.input(t(&[2, 1], &[1., 1.]));
    let y = g.matmul(m, ones).unwrap();
    assert_eq!(g.value(y).data(), &[3., 7.]);

    let bad = g.matmul(m, eye).unwrap_err();
    let msg = bad.to_string();
    assert!(msg.contains("[2, 2]") && msg.contains("[3, 3]"), "{msg}");
}

#[test]
fn matmul_gradient_is_ones_times_b_transposed() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = grad_suite::random(&[5, 4], &mut rng);
    let b = grad_suite::random(&[4, 3], &mut rng);
    let mut g = Graph::detached();
    let av = g.leaf(a.clone());
    let bv = g.input(b.clone());
    let y = g.matmul(av, bv).unwrap();
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    let ga = grads.leaf(av).unwrap();
    for i in 0..5 {
        for k in 0..4 {
            let expect: f64 = (0..3).map(|j| b.data()[k * 3 + j]).sum();
            assert!((ga[i * 4 + k] - expect).abs() < 1e-12);
        }
    }
    let bc = b.clone();
    let err = grad_check(
        move |g, x| {
            let bv = g.input(bc.clone());
            let y = g.matmul(x, bv)?;
            Ok(g.sum(y))
        },
        &a,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn conv2d_examples() {
    let mut g = Graph::detached();
    let x_t = t(&[1, 2, 2], &[1., 2., 3., 4.]);
    let x = g.input(x_t.clone());
    let unit = g.input(t(&[1, 1, 1, 1], &[1.]));
    let y = g.conv2d(x, unit, 1, 0).unwrap();
    assert_eq!(g.value(y), &x_t);
    let ones = g.input(Tensor::ones(&[1, 1, 2, 2]));
    let y = g.conv2d(x, ones, 1, 0).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 1]);
    assert_eq!(g.value(y).data(), &[10.]);
    let big = g.input(Tensor::ones(&[1, 1, 3, 3]));
    assert!(matches!(g.conv2d(x, big, 1, 0), Err(Error::Dimension(_))));
    let y = g.conv_transpose2d(x, unit, 1, 0).unwrap();
    assert_eq!(g.value(y), &x_t);
}

#[test]
fn transposed_conv_restores_spatial_size_and_is_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (h, w, k, s, p) in [(8, 8, 4, 2, 1), (7, 5, 3, 1, 1), (32, 32, 4, 2, 1), (9, 9, 3, 2, 1)] {
        let x = grad_suite::random(&[2, h, w], &mut rng);
        let kern = grad_suite::random(&[3, 2, k, k], &mut rng);
        let mut g = Graph::detached();
        let xv = g.input(x.clone());
        let kv = g.input(kern.clone());
        let y = g.conv2d(xv, kv, s, p).unwrap();
        let ys = g.value(y).shape().to_vec();
        let probe = grad_suite::random(&ys, &mut rng);
        let pv = g.input(probe.clone());
        let back = g.conv_transpose2d(pv, kv, s, p).unwrap();
        assert_eq!(&g.value(back).shape()[1..], &[h, w]);
        let lhs = g.value(y).dot(&probe);
        let rhs = x.dot(g.value(back));
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::detached();
    let z = g.input(Tensor::zeros(&[4]));
    let y = g.softmax(z);
    assert_eq!(g.value(y).data(), &[0.25; 4]);
    let l = g.input(Tensor::vector(vec![1f64.ln(), 2f64.ln(), 3f64.ln()]));
    let y = g.softmax(l);
    for (a, b) in g.value(y).data().iter().zip([1. / 6., 2. / 6., 3. / 6.]) {
        assert!((a - b).abs() < 1e-15);
    }
    let base = Tensor::vector(vec![0.3, -1.2, 2.5, 0.0]);
    let shifted = Tensor::vector(base.data().iter().map(|v| v + 37.0).collect());
    let (a, b) = (g.input(base), g.input(shifted));
    let (ya, yb) = (g.softmax(a), g.softmax(b));
    for (u, v) in g.value(ya).data().iter().zip(g.value(yb).data()) {
        assert!((u - v).abs() < 1e-15);
    }
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::detached();
    let gain = g.input(Tensor::ones(&[3]));
    let bias = g.input(Tensor::zeros(&[3]));
    let x = g.input(Tensor::ones(&[1, 3]));
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    assert_eq!(g.value(y).data(), &[0.0; 3]);
    let gain = g.input(Tensor::ones(&[2]));
    let bias = g.input(Tensor::zeros(&[2]));
    let x = g.input(t(&[1, 2], &[-1., 1.]));
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    let d = g.value(y).data();
    assert!((d[0] + 1.0).abs() < 1e-5 && (d[1] - 1.0).abs() < 1e-5);
}

#[test]
fn loss_examples() {
    let mut g = Graph::detached();
    let z = g.input(Tensor::zeros(&[1000]));
    let ce = g.cross_entropy(z, 17).unwrap();
    assert!((g.value(ce).item() - 1000f64.ln()).abs() < 1e-12);
    assert!(matches!(g.cross_entropy(z, 1000), Err(Error::Index(_))));
    let x_t = t(&[2, 2], &[0.1, 0.2, -3., 4.]);
    let x = g.input(x_t.clone());
    let m = g.mse(x, &x_t).unwrap();
    assert_eq!(g.value(m).item(), 0.0);
    let zero = g.input(Tensor::scalar(0.0));
    let b = g.bce_with_logits(zero, vec![1.0]).unwrap();
    assert!((g.value(b).item() - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn backward_examples_and_errors() {
    let x_t = t(&[2, 3], &[1., -2., 0.5, 3., 0., -1.]);
    let mut g = Graph::detached();
    let x = g.leaf(x_t.clone());
    let s = g.sum(x);
    assert_eq!(g.backward(s).unwrap().leaf(x).unwrap(), &[1.0; 6]);
    let sq = g.mul(x, x).unwrap();
    let s2 = g.sum(sq);
    let grad = g.backward(s2).unwrap();
    let expect: Vec<f64> = x_t.data().iter().map(|v| 2.0 * v).collect();
    assert_eq!(grad.leaf(x).unwrap(), expect.as_slice());
    assert!(matches!(g.backward(x), Err(Error::Usage(_))));
}

#[test]
fn backward_visits_each_node_once_in_reverse_order() {
    let mut g = Graph::detached();
    let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
    let a = g.tanh(x);
    let b = g.mul(a, x).unwrap();
    let c = g.add(a, b).unwrap();
    let unused = g.sigmoid(x);
    let s = g.sum(c);
    let order = g.backward_order(s);
    let mut sorted = order.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), order.len());
    assert!(order.windows(2).all(|w| w[0] > w[1]));
    assert!(!order.contains(&unused));
    assert_eq!(order, vec![s, c, b, a, x]);
}

#[test]
fn accumulation_is_additive_until_zeroed() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::vector(vec![1.0, 2.0]));
    for _ in 0..2 {
        let grads = {
            let mut g = Graph::new(&store);
            let w = g.param(id);
            let sq = g.mul(w, w).unwrap();
            let s = g.sum(sq);
            g.backward(s).unwrap()
        };
        store.accumulate(&grads);
    }
    assert_eq!(store.get(id).grad.data(), &[4.0, 8.0]);
    store.zero_grad();
    assert_eq!(store.get(id).grad.data(), &[0.0, 0.0]);
}

#[test]
fn dropout_rate_scaling_and_eval_identity() {
    let store = ParamStore::new();
    let p = 0.2;
    let mut g = Graph::new(&store).training(42);
    let x = g.input(Tensor::ones(&[100_000]));
    let y = g.dropout(x, p);
    let d = g.value(y).data();
    let zeros = d.iter().filter(|v| **v == 0.0).count() as f64 / d.len() as f64;
    assert!((zeros - p).abs() < 0.02, "{zeros}");
    assert!(d.iter().all(|v| *v == 0.0 || (*v - 1.0 / (1.0 - p)).abs() < 1e-15));
    let mut e = Graph::new(&store);
    let x = e.input(Tensor::ones(&[10]));
    assert_eq!(e.dropout(x, p), x);
}

fn cell_store(input: usize, hidden: usize, seed: u64) -> (ParamStore, LstmCell) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cell = LstmCell::new(&mut Init { store: &mut store, rng: &mut rng }, "cell", input, hidden);
    (store, cell)
}

#[test]
fn lstm_zero_weights_give_zero_state() {
    let (mut store, cell) = cell_store(3, 4, 0);
    for id in [cell.w_x, cell.w_h] {
        let shape = store.value(id).shape().to_vec();
        store.set_value(id, Tensor::zeros(&shape)).unwrap();
    }
    let mut g = Graph::new(&store);
    let x = g.input(Tensor::vector(vec![5.0, -3.0, 2.0]));
    let h0 = g.input(Tensor::zeros(&[4]));
    let c0 = g.input(Tensor::zeros(&[4]));
    let (h, c) = lstm_cell(&mut g, x, h0, c0, &cell).unwrap();
    assert_eq!(g.value(h).data(), &[0.0; 4]);
    assert_eq!(g.value(c).data(), &[0.0; 4]);
    let wrong = g.input(Tensor::zeros(&[5]));
    assert!(matches!(lstm_cell(&mut g, wrong, h0, c0, &cell), Err(Error::Dimension(_))));
}

#[test]
fn lstm_cell_bound_and_unrolled_gradients() {
    let (mut store, cell) = cell_store(3, 4, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let xs: Vec<Tensor> = (0..3).map(|_| grad_suite::random(&[2, 3], &mut rng)).collect();
    {
        let mut g = Graph::new(&store);
        let mut h = g.input(Tensor::zeros(&[2, 4]));
        let mut c = g.input(grad_suite::random(&[2, 4], &mut rng));
        for x in &xs {
            let xv = g.input(x.clone());
            let (h2, c2) = lstm_cell(&mut g, xv, h, c, &cell).unwrap();
            for (new, old) in g.value(c2).data().iter().zip(g.value(c).data()) {
                assert!(new.abs() <= old.abs() + 1.0);
            }
            h = h2;
            c = c2;
        }
    }
    let check = quesnet::math::grad_check_params(
        &mut store,
        |g| {
            let mut h = g.input(Tensor::zeros(&[2, 4]));
            let mut c = g.input(Tensor::zeros(&[2, 4]));
            for x in &xs {
                let xv = g.input(x.clone());
                (h, c) = lstm_cell(g, xv, h, c, &cell)?;
            }
            let hc = g.concat_cols(&[h, c])?;
            let w = (0..16).map(|i| (i as f64 * 0.7).sin()).collect();
            g.weighted_sum(hc, w)
        },
        1e-5,
    )
    .unwrap();
    assert!(check.max_error() < 1e-5, "{:?}", check.worst());
}
