//! Dense and sparse `f64` arrays, a reverse-mode tape, and the finite-difference oracle.

mod gradcheck;
mod matrix;
mod sparse;
mod tape;

pub use gradcheck::{finite_difference_check, BlockReport, FdReport, NamedBlocks, Parameters};
pub use matrix::{dot, log_sigmoid, log_sum_exp, sigmoid, softmax_in_place, softmax_rows, Matrix};
pub use sparse::Csr;
pub use tape::{AttentionMask, Gradients, Tape, Var};
