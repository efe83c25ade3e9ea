use crate::element::Element;
use crate::error::{AutogradError, Result};
use crate::tape::{Reduce, Tape, Var};

/// The closed set of differentiable operations a [`Tape`] records.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    MatMul,
    Add,
    Mul,
    Sub,
    Div,
    Scale(f64),
    Sigmoid,
    Softmax,
    LogSoftmax,
    Log,
    Exp,
    Mean(Reduce),
    Sum(Reduce),
    Gather(Vec<usize>),
    Transpose,
    Relu,
    LayerNorm,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    StopGradient,
    StraightThrough,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::Sub => "sub",
            Primitive::Div => "div",
            Primitive::Scale(_) => "scale",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Softmax => "softmax",
            Primitive::LogSoftmax => "log_softmax",
            Primitive::Log => "log",
            Primitive::Exp => "exp",
            Primitive::Mean(_) => "mean",
            Primitive::Sum(_) => "sum",
            Primitive::Gather(_) => "gather",
            Primitive::Transpose => "transpose",
            Primitive::Relu => "relu",
            Primitive::LayerNorm => "layer_norm",
            Primitive::Concat { .. } => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::StopGradient => "stop_gradient",
            Primitive::StraightThrough => "straight_through",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::MatMul
            | Primitive::Add
            | Primitive::Mul
            | Primitive::Sub
            | Primitive::Div
            | Primitive::StraightThrough => Some(2),
            Primitive::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

impl<T: Element> Tape<T> {
    /// Applies `primitive` to `operands`, dispatching to the typed method.
    pub fn apply(&mut self, primitive: &Primitive, operands: &[Var]) -> Result<Var> {
        if let Some(n) = primitive.arity() {
            if operands.len() != n {
                return Err(AutogradError::Arity {
                    op: primitive.name(),
                    expected: n,
                    got: operands.len(),
                });
            }
        }
        let a = operands.first().copied().ok_or(AutogradError::Arity {
            op: primitive.name(),
            expected: 1,
            got: 0,
        })?;
        Ok(match primitive {
            Primitive::MatMul => self.matmul(a, operands[1])?,
            Primitive::Add => self.add(a, operands[1])?,
            Primitive::Mul => self.mul(a, operands[1])?,
            Primitive::Sub => self.sub(a, operands[1])?,
            Primitive::Div => self.div(a, operands[1])?,
            Primitive::Scale(c) => self.scale(a, *c),
            Primitive::Sigmoid => self.sigmoid(a),
            Primitive::Softmax => self.softmax(a),
            Primitive::LogSoftmax => self.log_softmax(a),
            Primitive::Log => self.log(a),
            Primitive::Exp => self.exp(a),
            Primitive::Mean(r) => self.mean(a, *r),
            Primitive::Sum(r) => self.sum(a, *r),
            Primitive::Gather(ids) => self.gather(a, ids)?,
            Primitive::Transpose => self.transpose(a)?,
            Primitive::Relu => self.relu(a),
            Primitive::LayerNorm => self.layer_norm(a, LAYER_NORM_EPS),
            Primitive::Concat { axis } => self.concat(operands, *axis)?,
            Primitive::Slice { axis, start, end } => self.slice(a, *axis, *start, *end)?,
            Primitive::StopGradient => self.stop_gradient(a),
            Primitive::StraightThrough => self.straight_through(a, operands[1])?,
        })
    }
}
