use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), v.to_vec(), true).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
}

#[test]
fn matmul_identity_and_selector() {
    let mut tape = Tape::new();
    let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let p = tape.matmul(i, m).unwrap();
    assert_eq!(tape.values(p), &[1.0, 2.0, 3.0, 4.0]);

    let r = tape.constant(t(&[1, 2], &[1.0, 0.0]));
    let c = tape.constant(t(&[2, 1], &[2.0, 5.0]));
    let p = tape.matmul(r, c).unwrap();
    assert_eq!(tape.values(p), &[2.0]);

    let bad = tape.matmul(r, r).unwrap_err();
    assert!(matches!(
        bad,
        TensorError::ShapeMismatch { op: "matmul", .. }
    ));
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random(&mut rng, 12);
    let b = random(&mut rng, 8);
    let mut expected = vec![0.0; 6];
    for i in 0..3 {
        for j in 0..2 {
            for k in 0..4 {
                expected[i * 2 + j] += a[i * 4 + k] * b[k * 2 + j];
            }
        }
    }
    let mut tape = Tape::new();
    let va = tape.constant(t(&[3, 4], &a));
    let vb = tape.constant(t(&[4, 2], &b));
    let p = tape.matmul(va, vb).unwrap();
    assert!(close(tape.values(p), &expected, 1e-12));
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    let r = tape.relu(x).unwrap();
    assert_eq!(tape.values(r), &[0.0, 0.0, 2.0]);

    let z = tape.constant(t(&[1], &[0.0]));
    let s = tape.sigmoid(z).unwrap();
    assert_eq!(tape.values(s), &[0.5]);

    let n = tape.constant(t(&[1], &[-5.0]));
    let l = tape.leaky_relu(n, 0.2).unwrap();
    assert_eq!(tape.values(l), &[-1.0]);

    let err = tape.log(x).unwrap_err();
    assert!(matches!(err, TensorError::LogDomain(_)));

    let a = tape.constant(t(&[2], &[1.0, 2.0]));
    let b = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
    assert!(tape.add(a, b).is_err());
}

#[test]
fn softplus_is_stable() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[4], &[-800.0, -50.0, 50.0, 800.0]));
    let y = tape.softplus(x).unwrap();
    let v = tape.values(y);
    assert!(v.iter().all(|v| v.is_finite()));
    assert_eq!(v[3], 800.0);
    assert!(v[0] >= 0.0 && v[0] < 1e-300);
}

#[test]
fn segment_softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1], &[5.0]));
    let s = tape.segment_softmax(x, &[0]).unwrap();
    assert_eq!(tape.values(s), &[1.0]);

    let x = tape.constant(t(&[2], &[1.0, 1.0]));
    let s = tape.segment_softmax(x, &[0, 0]).unwrap();
    assert_eq!(tape.values(s), &[0.5, 0.5]);

    let x = tape.constant(t(&[2], &[0.0, 3f64.ln()]));
    let s = tape.segment_softmax(x, &[0, 0]).unwrap();
    assert!(close(tape.values(s), &[0.25, 0.75], 1e-15));

    let e = tape.constant(Tensor::zeros([0]));
    assert!(matches!(
        tape.segment_softmax(e, &[]).unwrap_err(),
        TensorError::EmptyInput(_)
    ));
}

#[test]
fn reduce_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2, 2], &[2.0, 4.0, 6.0, 8.0]));
    let m = tape.mean(x, Some(0)).unwrap();
    assert_eq!(tape.values(m), &[4.0, 6.0]);
    assert_eq!(tape.shape(m), &[2]);

    let z = tape.constant(Tensor::zeros([5]));
    let s = tape.sum(z, None).unwrap();
    assert_eq!(tape.values(s), &[0.0]);

    assert!(matches!(
        tape.sum(x, Some(2)).unwrap_err(),
        TensorError::InvalidAxis { .. }
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let v = random(&mut rng, 21);
    let x = tape.constant(t(&[3, 7], &v));
    let s = tape.sum(x, Some(1)).unwrap();
    let m = tape.mean(x, Some(1)).unwrap();
    let (sv, mv) = (tape.values(s).to_vec(), tape.values(m).to_vec());
    for (a, b) in sv.iter().zip(&mv) {
        assert!((a - b * 7.0).abs() < 1e-12);
    }
}

#[test]
fn concat_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2], &[1.0, 2.0]));
    let b = tape.constant(t(&[1], &[3.0]));
    let c = tape.concat(&[a, b], 0).unwrap();
    assert_eq!(tape.values(c), &[1.0, 2.0, 3.0]);

    let e = tape.constant(Tensor::zeros([0]));
    let c = tape.concat(&[a, e], 0).unwrap();
    assert_eq!(tape.values(c), &[1.0, 2.0]);

    let parts: Vec<Var> = (0..3)
        .map(|_| tape.constant(Tensor::zeros([1, 24])))
        .collect();
    let c = tape.concat(&parts, 1).unwrap();
    assert_eq!(tape.shape(c), &[1, 72]);

    let m = tape.constant(Tensor::zeros([2, 3]));
    let n = tape.constant(Tensor::zeros([3, 3]));
    assert!(tape.concat(&[m, n], 1).is_err());
    let rows = tape.concat(&[m, n], 0).unwrap();
    assert_eq!(tape.shape(rows), &[5, 3]);
}

#[test]
fn l2_norm_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[2], &[3.0, 4.0]));
    let n = tape.l2_norm(x).unwrap();
    assert_eq!(tape.values(n), &[5.0]);

    let z = tape.leaf(t(&[2], &[0.0, 0.0]));
    let n = tape.l2_norm(z).unwrap();
    assert_eq!(tape.values(n), &[0.0]);
    let c = tape.clamp_min(n, 1e-12).unwrap();
    assert_eq!(tape.values(c), &[1e-12]);
    tape.backward(c).unwrap();
    assert_eq!(tape.grad(z).unwrap(), &[0.0, 0.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let v = random(&mut rng, 17);
    let oracle = v.iter().fold(0.0, |acc, x| acc + x * x).sqrt();
    let x = tape.constant(t(&[17], &v));
    let n = tape.l2_norm(x).unwrap();
    assert!((tape.values(n)[0] - oracle).abs() < 1e-12);
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]));
    let s = tape.scale(x, 3.0).unwrap();
    let l = tape.sum(s, None).unwrap();
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[3.0, 3.0, 3.0]);

    // accumulation across two calls
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[6.0, 6.0, 6.0]);
    tape.zero_grad();
    assert!(tape.grad(x).is_none());

    let mut tape = Tape::new();
    let x = tape.leaf(t(&[], &[5.0]));
    let sq = tape.mul(x, x).unwrap();
    tape.backward(sq).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[10.0]);

    let mut tape = Tape::new();
    let x = tape.leaf(t(&[1], &[0.3]));
    let y = tape.add(x, x).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0]);

    let v = tape.leaf(t(&[2], &[1.0, 2.0]));
    assert!(matches!(
        tape.backward(v).unwrap_err(),
        TensorError::NonScalarLoss(_)
    ));
}

/// Builds `sum(w ⊙ op(x))` with fixed random weights so every output entry
/// contributes a distinct upstream gradient.
fn weighted<F>(
    shape_out: usize,
    seed: u64,
    build: F,
) -> impl Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, shape_out);
    move |tape: &mut Tape, vars: &[Var]| {
        let y = build(tape, vars)?;
        let shape = tape.shape(y).to_vec();
        let wv = tape.constant(Tensor::new(shape, w.clone(), false)?);
        let p = tape.mul(y, wv)?;
        tape.sum(p, None)
    }
}

fn check<F>(params: Vec<Tensor>, f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let r = grad_check(f, &params, 1e-5).unwrap();
    assert!(r.max_relative_error < 1e-6, "{r:?}");
}

#[test]
fn gradients_of_every_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let a = t(&[3, 4], &random(&mut rng, 12));
    let b = t(&[4, 2], &random(&mut rng, 8));
    check(
        vec![a.clone(), b],
        weighted(6, 1, |t, v| t.matmul(v[0], v[1])),
    );

    let row = t(&[4], &random(&mut rng, 4));
    let col = t(&[3, 1], &random(&mut rng, 3));
    for kind in [Binary::Add, Binary::Sub, Binary::Mul] {
        check(
            vec![a.clone(), row.clone()],
            weighted(12, 2, move |t, v| t.binary(kind, v[0], v[1])),
        );
        check(
            vec![a.clone(), col.clone()],
            weighted(12, 3, move |t, v| t.binary(kind, v[0], v[1])),
        );
    }
    let pos = t(&[3, 1], &[0.7, 1.3, 2.1]);
    check(
        vec![a.clone(), pos],
        weighted(12, 4, |t, v| t.div(v[0], v[1])),
    );
    check(
        vec![a.clone(), t(&[], &[1.7])],
        weighted(12, 5, |t, v| t.mul(v[0], v[1])),
    );

    // keep inputs away from kinks
    let smooth: Vec<f64> = random(&mut rng, 12)
        .into_iter()
        .map(|v| if v.abs() < 0.05 { v + 0.2 } else { v })
        .collect();
    let x = t(&[3, 4], &smooth);
    for kind in [
        Unary::Relu,
        Unary::LeakyRelu(0.2),
        Unary::Sigmoid,
        Unary::Exp,
        Unary::Softplus,
        Unary::Scale(-1.3),
        Unary::AddScalar(0.4),
        Unary::ClampMin(0.0),
    ] {
        check(
            vec![x.clone()],
            weighted(12, 6, move |t, v| t.unary(kind, v[0])),
        );
    }
    let positive = t(&[5], &[0.3, 1.0, 1.7, 0.9, 2.0]);
    check(vec![positive], weighted(5, 7, |t, v| t.log(v[0])));

    for axis in [None, Some(0), Some(1)] {
        let n = match axis {
            None => 1,
            Some(0) => 4,
            _ => 3,
        };
        check(
            vec![a.clone()],
            weighted(n, 8, move |t, v| t.sum(v[0], axis)),
        );
        check(
            vec![a.clone()],
            weighted(n, 9, move |t, v| t.mean(v[0], axis)),
        );
    }

    let c = t(&[3, 2], &random(&mut rng, 6));
    check(
        vec![a.clone(), c],
        weighted(18, 10, |t, v| t.concat(&[v[0], v[1]], 1)),
    );
    check(vec![a.clone()], weighted(1, 11, |t, v| t.l2_norm(v[0])));
    check(vec![a.clone()], weighted(3, 12, |t, v| t.row_norms(v[0])));

    let s = t(&[6], &random(&mut rng, 6));
    check(
        vec![s.clone()],
        weighted(6, 13, |t, v| t.segment_softmax(v[0], &[0, 1, 0, 2, 1, 0])),
    );
    check(
        vec![a.clone()],
        weighted(20, 14, |t, v| t.gather_rows(v[0], &[2, 0, 2, 1, 1])),
    );
    check(
        vec![a.clone()],
        weighted(16, 15, |t, v| t.segment_sum(v[0], &[3, 0, 3], 4)),
    );
    check(vec![s], weighted(6, 16, |t, v| t.reshape(v[0], [2, 3])));
}

#[test]
fn identical_inputs_give_identical_bits() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[5, 6], &random(&mut rng, 30)));
        let b = tape.leaf(t(&[6, 3], &random(&mut rng, 18)));
        let p = tape.matmul(a, b).unwrap();
        let s = tape.sigmoid(p).unwrap();
        let l = tape.sum(s, None).unwrap();
        tape.backward(l).unwrap();
        let mut out = tape.values(l).to_vec();
        out.extend_from_slice(tape.grad(a).unwrap());
        out.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn segment_softmax_sums_to_one_and_shift_invariant(
        vals in prop::collection::vec(-5.0f64..5.0, 1..20),
        shift in -10.0f64..10.0,
        nseg in 1usize..4,
    ) {
        let segs: Vec<usize> = (0..vals.len()).map(|i| i % nseg).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vals.clone()));
        let y = tape.segment_softmax(x, &segs).unwrap();
        let out = tape.values(y).to_vec();
        let mut sums = vec![0.0; nseg];
        for (v, &s) in out.iter().zip(&segs) {
            prop_assert!(*v > 0.0);
            sums[s] += v;
        }
        for (s, total) in sums.iter().enumerate() {
            if segs.contains(&s) {
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
        }
        let shifted: Vec<f64> = vals.iter().map(|v| v + shift).collect();
        let x2 = tape.constant(Tensor::vector(shifted));
        let y2 = tape.segment_softmax(x2, &segs).unwrap();
        for (a, b) in out.iter().zip(tape.values(y2)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn smooth_chain_matches_finite_differences(vals in prop::collection::vec(-2.0f64..2.0, 6)) {
        let params = vec![Tensor::new([2, 3], vals, true).unwrap()];
        let r = grad_check(|t, v| {
            let s = t.sigmoid(v[0])?;
            let e = t.exp(s)?;
            let n = t.row_norms(e)?;
            let m = t.mean(e, Some(0))?;
            let a = t.sum(n, None)?;
            let b = t.sum(m, None)?;
            t.mul(a, b)
        }, &params, 1e-5).unwrap();
        prop_assert!(r.max_relative_error < 1e-6, "{:?}", r);
    }
}
