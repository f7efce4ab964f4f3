//! Dense tensors, forward kernels, reverse-mode tape and the gradient oracle.

pub mod array;
pub mod container;
pub mod dd;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
mod ops;
pub mod scalar;
pub mod tape;

pub use array::ShapedArray;
pub use dd::Dd;
pub use gradcheck::{finite_diff_check, FdOptions, FdReport, Objective};
pub use kernels::Mode;
pub use scalar::{DType, Scalar};
pub use tape::{Gradients, ParamId, ParamStore, Tape, Var};
