use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck;
use super::*;
use crate::error::Error;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k) = a.dims2().unwrap();
    let (_, n) = b.dims2().unwrap();
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.at(i, p) * b.at(p, j);
            }
            c[i * n + j] = s;
        }
    }
    c
}

#[test]
fn sigmoid_of_zero_is_half() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::scalar(0.0));
    assert_eq!(x.sigmoid().value().data()[0], 0.5);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::matrix(1, 3, vec![1.0; 3]).unwrap());
    let y = x.softmax(1).unwrap();
    for v in y.value().data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 2], &mut rng);
    let tape = Tape::new();
    let c = tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap();
    let want = triple_loop(&a, &b);
    for (x, y) in c.value().data().iter().zip(&want) {
        assert!((x - y).abs() <= 1e-12);
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = a.matmul(b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
    assert!(matches!(err, Error::ShapeMismatch { .. }));
}

#[test]
fn sum_gradient_is_ones() {
    let tape = Tape::new();
    let w = tape.param(Tensor::from_fn(&[3, 5], |i| i as f64));
    let loss = w.sum(None).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert!(grads.get(w).unwrap().data().iter().all(|&g| g == 1.0));
}

#[test]
fn half_square_gradient_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let w0 = random(&[4, 3], &mut rng);
    let tape = Tape::new();
    let w = tape.param(w0.clone());
    let loss = w.mul(w).unwrap().sum(None).unwrap().scale(0.5);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(w).unwrap(), &w0);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let tape = Tape::new();
    let w = tape.param(Tensor::zeros(&[2, 2]));
    assert!(matches!(tape.backward(w), Err(Error::NonScalarLoss(_))));
}

#[test]
fn second_backward_is_an_error() {
    let tape = Tape::new();
    let w = tape.param(Tensor::scalar(2.0));
    let loss = w.mul(w).unwrap();
    tape.backward(loss).unwrap();
    assert!(matches!(tape.backward(loss), Err(Error::TapeConsumed)));
}

#[test]
fn dropout_rate_validation_and_eval_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let tape = Tape::new();
    let x = tape.param(random(&[4, 4], &mut rng));
    assert!(matches!(x.dropout(1.0, true, &mut rng), Err(Error::InvalidDropout(_))));
    assert!(matches!(x.dropout(-0.1, true, &mut rng), Err(Error::InvalidDropout(_))));
    let y = x.dropout(0.5, false, &mut rng).unwrap();
    assert_eq!(y.id(), x.id());
    assert_eq!(*y.value(), *x.value());
}

#[test]
fn dropout_keeps_expectation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tape = Tape::new();
    let x = tape.constant(Tensor::filled(&[200, 100], 1.0));
    let y = x.dropout(0.1, true, &mut rng).unwrap();
    let mean = y.value().sum() / 20_000.0;
    assert!((mean - 1.0).abs() < 0.02, "{mean}");
    let kept = y.value().data().iter().filter(|&&v| v != 0.0).count();
    assert!((kept as f64 / 20_000.0 - 0.9).abs() < 0.01);
}

#[test]
fn constants_are_not_recorded_with_ops() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::scalar(1.0));
    let y = x.exp();
    assert!(!y.requires_grad());
    let grads = tape.backward(y).unwrap();
    assert!(grads.get(x).is_none());
}

#[test]
fn cross_entropy_rejects_bad_labels() {
    let tape = Tape::new();
    let l = tape.constant(Tensor::zeros(&[2, 10]));
    assert!(matches!(tape.cross_entropy(l, &[0, 10]), Err(Error::LabelOutOfRange(10))));
    assert!(tape.cross_entropy(l, &[0]).is_err());
}

/// Weighted sum with fixed pseudo-random weights, so every output element
/// carries a distinct nonzero gradient.
fn probe<'t>(y: Var<'t>) -> Result<Var<'t>, Error> {
    let shape = y.shape();
    let w = Tensor::from_fn(&shape, |i| ((i as f64 + 1.0) * 0.7548776662).sin() + 0.1);
    let w = y.tape().constant(w);
    y.mul(w)?.sum(None)
}

fn check(params: Vec<Tensor>, f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, Error>) {
    let report = gradcheck::check(&params, f, 1e-5, None).unwrap();
    assert!(
        report.max_rel_error < 1e-4,
        "max relative error {} at {:?}",
        report.max_rel_error,
        report.worst
    );
}

#[test]
fn finite_differences_agree_for_every_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 5], &mut rng);
    let c = random(&[3, 4], &mut rng);
    let bias = random(&[4], &mut rng);
    let pos = Tensor::from_fn(&[3, 4], |_| rng.random_range(0.5..2.0));

    check(vec![a.clone(), b.clone()], |_, v| probe(v[0].matmul(v[1])?));
    check(vec![a.clone(), c.clone()], |_, v| probe(v[0].add(v[1])?));
    check(vec![a.clone(), c.clone()], |_, v| probe(v[0].sub(v[1])?));
    check(vec![a.clone(), c.clone()], |_, v| probe(v[0].mul(v[1])?));
    check(vec![a.clone(), bias.clone()], |_, v| probe(v[0].add_row(v[1])?));
    check(vec![a.clone(), c.clone()], |t, v| probe(t.concat(&[v[0], v[1]], 1)?));
    check(vec![a.clone(), c.clone()], |t, v| probe(t.concat(&[v[0], v[1]], 0)?));
    check(vec![a.clone()], |_, v| probe(v[0].sigmoid()));
    check(vec![a.clone()], |_, v| probe(v[0].tanh()));
    check(vec![a.clone()], |_, v| probe(v[0].relu()));
    check(vec![a.clone()], |_, v| probe(v[0].exp()));
    check(vec![pos.clone()], |_, v| probe(v[0].ln()));
    check(vec![a.clone()], |_, v| probe(v[0].scale(-2.5).add_scalar(1.0)));
    check(vec![a.clone()], |_, v| probe(v[0].sum(Some(0))?));
    check(vec![a.clone()], |_, v| probe(v[0].sum(Some(1))?));
    check(vec![a.clone()], |_, v| probe(v[0].softmax(0)?));
    check(vec![a.clone()], |_, v| probe(v[0].softmax(1)?));
    check(vec![a.clone()], |_, v| probe(v[0].segment_mean(3)?));
    let block = Arc::new(random(&[3, 3], &mut rng));
    let stacked = random(&[6, 2], &mut rng);
    check(vec![stacked], move |_, v| probe(v[0].block_left_mul(&block)?));
    let labels = [1usize, 3, 0];
    check(vec![a.clone()], move |t, v| t.cross_entropy(v[0], &labels));
}

#[test]
fn finite_differences_agree_for_dropout_with_fixed_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(&[6, 6], &mut rng);
    check(vec![a], |_, v| {
        let mut r = ChaCha8Rng::seed_from_u64(77);
        probe(v[0].dropout(0.3, true, &mut r)?)
    });
}

fn two_graph_layout() -> Arc<AttentionLayout> {
    // node 0: {0,1}; node 1: {0,1,2}; node 2: {2,1}
    Arc::new(AttentionLayout {
        nodes: 3,
        offsets: vec![0, 2, 5, 7],
        neighbors: vec![0, 1, 0, 1, 2, 2, 1],
    })
}

#[test]
fn finite_differences_agree_for_graph_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let layout = two_graph_layout();
    let q = random(&[6, 4], &mut rng);
    let k = random(&[6, 4], &mut rng);
    let v = random(&[6, 4], &mut rng);
    let e = random(&[7, 4], &mut rng);
    let l = Arc::clone(&layout);
    check(vec![q.clone(), k.clone(), v.clone(), e], move |t, p| {
        probe(t.graph_attention(p[0], p[1], p[2], Some(p[3]), &l, 2)?.0)
    });
    check(vec![q, k, v], move |t, p| {
        probe(t.graph_attention(p[0], p[1], p[2], None, &layout, 2)?.0)
    });
}

/// The GRU update built from primitive ops.
fn composed_gru<'t>(t: &'t Tape, v: &[Var<'t>]) -> Result<Var<'t>, Error> {
    let (x, h) = (v[0], v[1]);
    let hx = t.concat(&[h, x], 1)?;
    let r = hx.matmul(v[2])?.add_row(v[5])?.sigmoid();
    let z = hx.matmul(v[3])?.add_row(v[6])?.sigmoid();
    let c = t.concat(&[r.mul(h)?, x], 1)?.matmul(v[4])?.add_row(v[7])?.tanh();
    z.scale(-1.0).add_scalar(1.0).mul(h)?.add(z.mul(c)?)
}

fn gru_inputs(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let (m, h, f) = (5, 3, 2);
    let mut v = vec![random(&[m, f], rng), random(&[m, h], rng)];
    v.extend((0..3).map(|_| random(&[h + f, h], rng)));
    v.extend((0..3).map(|_| random(&[h], rng)));
    v
}

#[test]
fn fused_gru_cell_matches_composed_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let inputs = gru_inputs(&mut rng);
    let tape = Tape::new();
    let v: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let fused = tape.gru_cell(v[0], v[1], [v[2], v[3], v[4]], [v[5], v[6], v[7]]).unwrap();
    let composed = composed_gru(&tape, &v).unwrap();
    assert!(fused.value().max_abs_diff(&composed.value()) < 1e-14);

    let loss = probe(fused).unwrap().add(probe(composed).unwrap().scale(-1.0)).unwrap();
    let grads = tape.backward(loss).unwrap();
    for var in &v {
        // Both paths feed the loss with opposite signs, so matching backward
        // rules cancel.
        let g = grads.get(*var).unwrap();
        assert!(g.data().iter().all(|x| x.abs() < 1e-13), "{var:?}");
    }
}

#[test]
fn finite_differences_agree_for_gru_cell() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    check(gru_inputs(&mut rng), |t, v| {
        probe(t.gru_cell(v[0], v[1], [v[2], v[3], v[4]], [v[5], v[6], v[7]])?)
    });
}

#[test]
fn gru_cell_rejects_mismatched_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let inputs = gru_inputs(&mut rng);
    let tape = Tape::new();
    let v: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let short_h = tape.constant(Tensor::zeros(&[4, 3]));
    let wide_w = tape.constant(Tensor::zeros(&[5, 4]));
    let long_b = tape.constant(Tensor::zeros(&[4]));
    let bad = [
        tape.gru_cell(v[0], short_h, [v[2], v[3], v[4]], [v[5], v[6], v[7]]),
        tape.gru_cell(v[0], v[1], [v[2], wide_w, v[4]], [v[5], v[6], v[7]]),
        tape.gru_cell(v[0], v[1], [v[2], v[3], v[4]], [v[5], v[6], long_b]),
    ];
    assert!(bad.iter().all(|r| matches!(r, Err(Error::ShapeMismatch { .. }))));
}

#[test]
fn replayed_backward_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = random(&[5, 4], &mut rng);
        let b = random(&[4, 3], &mut rng);
        let tape = Tape::new();
        let va = tape.param(a);
        let vb = tape.param(b);
        let y = va.matmul(vb).unwrap().tanh().dropout(0.2, true, &mut rng).unwrap();
        let loss = y.softmax(1).unwrap().ln().sum(None).unwrap();
        let g = tape.backward(loss).unwrap();
        (g.get(va).unwrap().clone(), g.get(vb).unwrap().clone())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        data in proptest::collection::vec(-50.0f64..50.0, 12),
    ) {
        let tape = Tape::new();
        let x = tape.constant(Tensor::matrix(3, 4, data).unwrap());
        let y = x.softmax(1).unwrap();
        let y = y.value();
        for r in 0..3 {
            let row = &y.data()[r * 4..(r + 1) * 4];
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn dropout_eval_is_identity(data in proptest::collection::vec(-1e6f64..1e6, 1..40), rate in 0.0f64..0.99) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tape = Tape::new();
        let n = data.len();
        let x = tape.param(Tensor::vector(data));
        let y = x.dropout(rate, false, &mut rng).unwrap();
        let (yv, xv) = (y.value().clone(), x.value().clone());
        prop_assert_eq!(yv.data(), xv.data());
        prop_assert_eq!(y.value().len(), n);
    }
}
