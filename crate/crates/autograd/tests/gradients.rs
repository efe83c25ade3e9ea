//! Every primitive's analytic gradient against central finite differences.

use intuition_autograd::{grad_check, Primitive, Reduce, Result, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-3;
const PRIMITIVE_TOL: f64 = 1e-4;
const SHAPE: [usize; 2] = [3, 4];

fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// `sum(out * w)` with fixed random weights, so every output coordinate
/// contributes a distinct amount.
fn weighted_sum(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let w = random(tape.shape(out), -1.0, 1.0, seed);
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p, Reduce::All))
}

fn check_unary(p: Primitive, point: &Tensor<f64>) -> f64 {
    grad_check(
        |tape, x| {
            let y = tape.apply(&p, &[x])?;
            weighted_sum(tape, y, 99)
        },
        point,
        H,
    )
    .unwrap()
}

/// Checks both operand positions of a binary primitive.
fn check_binary(p: Primitive, point: &Tensor<f64>, other: &Tensor<f64>) -> f64 {
    let lhs = grad_check(
        |tape, x| {
            let o = tape.constant(other.clone());
            let y = tape.apply(&p, &[x, o])?;
            weighted_sum(tape, y, 7)
        },
        point,
        H,
    )
    .unwrap();
    let rhs = grad_check(
        |tape, x| {
            let o = tape.constant(point.clone());
            let y = tape.apply(&p, &[o, x])?;
            weighted_sum(tape, y, 8)
        },
        other,
        H,
    )
    .unwrap();
    lhs.max(rhs)
}

fn values(lo: f64, hi: f64) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(lo..hi, 12).prop_map(|v| Tensor::new(SHAPE, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn unary_primitives(x in values(-2.0, 2.0)) {
        for p in [
            Primitive::Scale(-1.7),
            Primitive::Sigmoid,
            Primitive::Softmax,
            Primitive::LogSoftmax,
            Primitive::Exp,
            Primitive::Mean(Reduce::All),
            Primitive::Mean(Reduce::LastKeepDim),
            Primitive::Sum(Reduce::All),
            Primitive::Sum(Reduce::LastKeepDim),
            Primitive::Transpose,
            Primitive::LayerNorm,
            Primitive::Slice { axis: 1, start: 1, end: 3 },
            Primitive::Slice { axis: 0, start: 0, end: 2 },
            Primitive::Gather(vec![2, 0, 2, 1]),
        ] {
            let err = check_unary(p.clone(), &x);
            prop_assert!(err < PRIMITIVE_TOL, "{} error {err}", p.name());
        }
    }

    #[test]
    fn log_on_positive_inputs(x in values(0.1, 2.0)) {
        let err = check_unary(Primitive::Log, &x);
        prop_assert!(err < PRIMITIVE_TOL, "log error {err}");
    }

    #[test]
    fn relu_away_from_kink(x in values(-2.0, 2.0)) {
        let x = x.map(|v| if v.abs() < 0.01 { 0.5 } else { v });
        let err = check_unary(Primitive::Relu, &x);
        prop_assert!(err < PRIMITIVE_TOL, "relu error {err}");
    }

    #[test]
    fn binary_same_shape(a in values(-2.0, 2.0), b in values(-2.0, 2.0)) {
        for p in [Primitive::Add, Primitive::Sub, Primitive::Mul] {
            let err = check_binary(p.clone(), &a, &b);
            prop_assert!(err < PRIMITIVE_TOL, "{} error {err}", p.name());
        }
        let denom = b.map(|v| v.abs() + 0.5);
        let err = check_binary(Primitive::Div, &a, &denom);
        prop_assert!(err < PRIMITIVE_TOL, "div error {err}");
    }

    #[test]
    fn binary_broadcast(a in values(-2.0, 2.0), seed in 0u64..1000) {
        let row = random(&[4], -2.0, 2.0, seed);
        let col = random(&[3, 1], 0.5, 2.0, seed + 1);
        let s = random(&[], 0.5, 2.0, seed + 2);
        for (p, other) in [
            (Primitive::Add, &row),
            (Primitive::Sub, &col),
            (Primitive::Mul, &row),
            (Primitive::Mul, &s),
            (Primitive::Div, &col),
            (Primitive::Div, &s),
        ] {
            let err = check_binary(p.clone(), &a, other);
            prop_assert!(err < PRIMITIVE_TOL, "{} broadcast {:?} error {err}", p.name(), other.shape());
        }
    }

    #[test]
    fn matmul_both_sides(a in values(-2.0, 2.0), seed in 0u64..1000) {
        let b = random(&[4, 5], -2.0, 2.0, seed);
        let err = check_binary(Primitive::MatMul, &a, &b);
        prop_assert!(err < PRIMITIVE_TOL, "matmul error {err}");
    }

    #[test]
    fn concat_each_input(a in values(-2.0, 2.0), seed in 0u64..1000) {
        let b = random(&[3, 2], -2.0, 2.0, seed);
        let err = check_binary(Primitive::Concat { axis: 1 }, &a, &b);
        prop_assert!(err < PRIMITIVE_TOL, "concat error {err}");
    }

    #[test]
    fn softmax_rows_are_distributions(x in prop::collection::vec(-30.0f32..30.0, 12)) {
        let mut tape = Tape::<f32>::new();
        let v = tape.constant(Tensor::new(SHAPE, x).unwrap());
        let y = tape.softmax(v);
        for row in tape.value(y).data().chunks(4) {
            let s: f64 = row.iter().map(|&p| p as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&p| p >= 0.0 && p <= 1.0));
        }
    }

    #[test]
    fn stop_gradient_is_bit_identity(x in prop::collection::vec(-1e6f32..1e6, 12)) {
        let mut tape = Tape::<f32>::new();
        let v = tape.param(Tensor::new(SHAPE, x).unwrap());
        let s = tape.stop_gradient(v);
        let (a, b) = (tape.value(v).data(), tape.value(s).data());
        prop_assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn softmax_rows_strictly_inside_unit_interval_for_moderate_logits() {
    let mut tape = Tape::<f32>::new();
    let v = tape.constant(Tensor::new([2, 3], vec![-2.0, 0.0, 2.0, 1.0, 1.0, 1.0]).unwrap());
    let y = tape.softmax(v);
    assert!(tape.value(y).data().iter().all(|&p| p > 0.0 && p < 1.0));
}

#[test]
fn straight_through_gradient_checks_as_identity() {
    let x = random(&SHAPE, -2.0, 2.0, 5);
    let q = random(&SHAPE, -2.0, 2.0, 6);
    let err = grad_check(
        |tape, v| {
            let qv = tape.constant(q.clone());
            let st = tape.straight_through(v, qv)?;
            // downstream of the quantized value, plus a direct term in x
            let sq = tape.mul(st, st)?;
            let a = tape.sum(sq, Reduce::All);
            let b = weighted_sum(tape, v, 3)?;
            tape.add(a, b)
        },
        &x,
        H,
    );
    // the numeric derivative sees only the direct term; the analytic one
    // also carries 2*q through the estimator, so they must disagree
    assert!(err.unwrap() > 1e-2);
}

#[test]
fn sigmoid_sum_at_zero() {
    let point = Tensor::zeros([4]);
    let err = grad_check(
        |tape, x| {
            let s = tape.sum(x, Reduce::All);
            Ok(tape.sigmoid(s))
        },
        &point,
        H,
    )
    .unwrap();
    assert!(err < 1e-4);
    let mut tape = Tape::<f64>::new();
    let x = tape.param(point);
    let s = tape.sum(x, Reduce::All);
    let y = tape.sigmoid(s);
    tape.backward(y).unwrap();
    assert!(tape.grad(x).unwrap().data().iter().all(|&g| (g - 0.25).abs() < 1e-12));
}

#[test]
fn constant_function_has_zero_error() {
    let point = random(&SHAPE, -2.0, 2.0, 1);
    let err = grad_check(|tape, _x| Ok(tape.scalar(3.0)), &point, H).unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn two_layer_composition_matches_finite_differences() {
    let w1 = random(&[4, 6], -1.0, 1.0, 11);
    let w2 = random(&[6, 2], -1.0, 1.0, 12);
    let x = random(&SHAPE, -2.0, 2.0, 13);
    let err = grad_check(
        |tape, v| {
            let a = tape.constant(w1.clone());
            let b = tape.constant(w2.clone());
            let h = tape.matmul(v, a)?;
            let h = tape.sigmoid(h);
            let o = tape.matmul(h, b)?;
            let o = tape.log_softmax(o);
            Ok(tape.mean(o, Reduce::All))
        },
        &x,
        H,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn primitive_suite_passes() {
    let results = intuition_autograd::primitive_suite(H).unwrap();
    assert!(results.len() >= 20);
    for (name, err) in results {
        assert!(err < PRIMITIVE_TOL, "{name}: {err}");
    }
}
