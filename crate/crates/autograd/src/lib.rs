//! Dense tensor arithmetic with tape-based reverse-mode differentiation.
//!
//! ```
//! use intuition_autograd::{Reduce, Tape, Tensor};
//!
//! let mut tape = Tape::<f32>::new();
//! let x = tape.param(Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq, Reduce::All);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -4.0, 1.0]);
//! ```

mod check;
mod element;
mod error;
mod primitive;
mod tape;
mod tensor;

pub use check::{analytic_gradient, grad_check, numeric_gradient, primitive_suite, relative_error};
pub use element::Element;
pub use error::{AutogradError, Result};
pub use primitive::{Primitive, LAYER_NORM_EPS};
pub use tape::{Reduce, Tape, Var};
pub use tensor::Tensor;

/// Logistic function, stable for large `|x|`.
pub fn sigmoid<T: Element>(x: T) -> T {
    tape::sigmoid(x)
}

/// Max-subtracted softmax of one row, in place.
pub fn softmax_in_place<T: Element>(row: &mut [T]) {
    tape::softmax_in_place(row)
}
