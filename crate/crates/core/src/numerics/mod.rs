//! Dense tensors, a reverse-mode tape and a finite-difference oracle.

mod gradcheck;
pub(crate) mod kernels;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{
    finite_diff_grad, max_relative_error, relative_error, GradCheckEntry, GradCheckReport,
    DEFAULT_EPSILON,
};
pub use params::ParamStore;
pub use tape::{ElemOp, ReduceOp, Tape, Var};
pub use tensor::Tensor;
