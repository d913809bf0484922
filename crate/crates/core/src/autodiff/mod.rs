//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Values are `f64` and row-major. Every primitive on a [`Tape`] checks
//! operand shapes, rejects non-finite results, and records the exact local
//! partials needed by [`Tape::backward`]. The tape is a flat list; nodes are
//! appended in evaluation order, which is already a topological order.

mod gradcheck;
mod tape;
pub(crate) mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, ParamCheck, RELATIVE_FLOOR};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{sigmoid, silu, softplus, Tensor};
pub(crate) use tensor as kernels;
