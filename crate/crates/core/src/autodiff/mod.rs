//! Minimal reverse-mode automatic differentiation over dense tensors.

pub mod conv;
pub mod gradcheck;
pub mod io;
mod param;
mod tape;
mod tensor;

pub use gradcheck::{gradcheck, gradcheck_at, relative_error};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Activation, Tape, Var};
pub use tensor::{Scalar, Tensor};
