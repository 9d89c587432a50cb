// `!(x > 0.0)` is used deliberately so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Gradients, OpKind, ParamId, Params, Scalar, Tape, Tensor, Var};
pub mod embedding;
pub mod model;
pub mod loss;
pub mod eval;
pub mod train;
pub mod checks;
