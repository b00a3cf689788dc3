//! Dense tensor math with reverse-mode automatic differentiation.
//!
//! [`tape::Tape`] + [`tape::Value`] are the training-time surface; the plain
//! functions below run the same ops on an ephemeral tape for callers that only
//! need values. Both paths share one implementation, so the op-boundary
//! contracts (shape validation, NaN/Inf rejection) are identical.

pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use gradcheck::grad_check;
pub use tape::{Gradients, Tape, Value};
pub use tensor::Tensor;

use crate::error::{Result, SmarError};

/// Matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let out = tape.constant(a).matmul(tape.constant(b))?;
    Ok(out.tensor())
}

/// Stabilized softmax along `axis` (0 or 1 for matrices, 0 for vectors).
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let tape = Tape::new();
    let v = tape.constant(x);
    let out = match (x.rank(), axis) {
        (1, 0) => v.row_softmax()?,
        (2, 1) => v.row_softmax()?,
        (2, 0) => v.transpose()?.row_softmax()?.transpose()?,
        _ => {
            return Err(SmarError::BadShape {
                op: "softmax",
                shape: x.shape().to_vec(),
                detail: format!("axis {axis} invalid"),
            })
        }
    };
    Ok(out.tensor())
}

/// Per-row layer normalization with affine parameters.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let tape = Tape::new();
    let out = tape
        .constant(x)
        .layer_norm(tape.constant(gain), tape.constant(bias), eps)?;
    Ok(out.tensor())
}

/// Unit-norm rescaling of a vector; degenerate (near-zero) inputs error.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let out = tape.constant(x).l2_normalize()?;
    Ok(out.tensor())
}
