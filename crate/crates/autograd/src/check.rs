//! Central finite-difference gradient checking in double precision.

use crate::error::Result;
use crate::primitive::Primitive;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `|a - n| / (|a| + |n| + 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-8)
}

/// Central difference `(f(x + h e_i) - f(x - h e_i)) / 2h` for every
/// coordinate `i` of `point`.
pub fn numeric_gradient<F>(f: &F, point: &Tensor<f64>, h: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let eval = |p: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(p);
        let y = f(&mut tape, x)?;
        Ok(tape.value(y).data().iter().sum())
    };
    let mut out = Vec::with_capacity(point.numel());
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        out.push((eval(plus)? - eval(minus)?) / (2.0 * h));
    }
    Ok(out)
}

/// Reverse-mode gradient of the scalar `f` at `point`.
pub fn analytic_gradient<F>(f: &F, point: &Tensor<f64>) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let y = f(&mut tape, x)?;
    tape.backward(y)?;
    Ok(tape
        .grad(x)
        .map(Tensor::into_data)
        .unwrap_or_else(|| vec![0.0; point.numel()]))
}

/// Largest relative error between the analytic gradient of `f` and its
/// central-difference estimate over all coordinates of `point`.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let analytic = analytic_gradient(&f, point)?;
    let numeric = numeric_gradient(&f, point, h)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max))
}

/// Deterministic, well-spread test values in `[lo, hi]`.
fn spread(shape: &[usize], lo: f64, hi: f64, salt: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |i| {
        let u = 0.5 + 0.5 * ((i as f64 + 1.0) * 1.618_033_988_75 + salt).sin();
        lo + (hi - lo) * u
    })
}

/// Sums `out` against fixed distinct weights.
fn weighted(tape: &mut Tape<f64>, out: Var, salt: f64) -> Result<Var> {
    let w = tape.constant(spread(tape.shape(out), -1.0, 1.0, salt));
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p, crate::tape::Reduce::All))
}

/// Checks `p` with each operand in turn as the variable and the others
/// held constant.
fn check_operands(p: &Primitive, operands: &[Tensor<f64>], h: f64) -> Result<f64> {
    let mut worst = 0.0f64;
    for pos in 0..operands.len() {
        let err = grad_check(
            |tape, x| {
                let vars: Vec<Var> = operands
                    .iter()
                    .enumerate()
                    .map(|(i, t)| if i == pos { x } else { tape.constant(t.clone()) })
                    .collect();
                let y = tape.apply(p, &vars)?;
                weighted(tape, y, 0.37)
            },
            &operands[pos],
            h,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Finite-difference check of every differentiable primitive at fixed
/// points, returning `(case, max relative error)` pairs.
///
/// `stop_gradient` and `straight_through` are excluded: their backward rules
/// deliberately differ from the derivative of their forward values.
pub fn primitive_suite(h: f64) -> Result<Vec<(String, f64)>> {
    use crate::tape::Reduce;
    let m = [3, 4];
    let x = spread(&m, -1.5, 1.5, 0.0);
    let y = spread(&m, -1.5, 1.5, 2.0);
    let pos = spread(&m, 0.5, 2.0, 1.0);
    // Keep ReLU inputs away from the kink.
    let kinkless = x.map(|v| if v.abs() < 0.2 { v.signum() * 0.2 + v } else { v });
    let cases: Vec<(String, Primitive, Vec<Tensor<f64>>)> = vec![
        ("add".into(), Primitive::Add, vec![x.clone(), y.clone()]),
        ("add broadcast row".into(), Primitive::Add, vec![x.clone(), spread(&[1, 4], -1.0, 1.0, 3.0)]),
        ("sub".into(), Primitive::Sub, vec![x.clone(), y.clone()]),
        ("mul".into(), Primitive::Mul, vec![x.clone(), y.clone()]),
        ("mul broadcast column".into(), Primitive::Mul, vec![x.clone(), spread(&[3, 1], -1.0, 1.0, 4.0)]),
        ("div".into(), Primitive::Div, vec![x.clone(), pos.clone()]),
        ("matmul".into(), Primitive::MatMul, vec![x.clone(), spread(&[4, 2], -1.0, 1.0, 5.0)]),
        ("scale".into(), Primitive::Scale(-1.7), vec![x.clone()]),
        ("sigmoid".into(), Primitive::Sigmoid, vec![x.clone()]),
        ("softmax".into(), Primitive::Softmax, vec![x.clone()]),
        ("log_softmax".into(), Primitive::LogSoftmax, vec![x.clone()]),
        ("log".into(), Primitive::Log, vec![pos.clone()]),
        ("exp".into(), Primitive::Exp, vec![x.clone()]),
        ("relu".into(), Primitive::Relu, vec![kinkless]),
        ("layer_norm".into(), Primitive::LayerNorm, vec![x.clone()]),
        ("mean all".into(), Primitive::Mean(Reduce::All), vec![x.clone()]),
        ("mean last".into(), Primitive::Mean(Reduce::LastKeepDim), vec![x.clone()]),
        ("sum all".into(), Primitive::Sum(Reduce::All), vec![x.clone()]),
        ("sum last".into(), Primitive::Sum(Reduce::LastKeepDim), vec![x.clone()]),
        ("gather".into(), Primitive::Gather(vec![2, 0, 2, 1]), vec![x.clone()]),
        ("transpose".into(), Primitive::Transpose, vec![x.clone()]),
        ("concat rows".into(), Primitive::Concat { axis: 0 }, vec![x.clone(), spread(&[2, 4], -1.0, 1.0, 6.0)]),
        ("concat columns".into(), Primitive::Concat { axis: 1 }, vec![x.clone(), spread(&[3, 2], -1.0, 1.0, 7.0)]),
        ("slice".into(), Primitive::Slice { axis: 1, start: 1, end: 3 }, vec![x.clone()]),
    ];
    cases
        .into_iter()
        .map(|(name, p, ops)| Ok((name, check_operands(&p, &ops, h)?)))
        .collect()
}
