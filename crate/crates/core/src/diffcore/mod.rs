//! Dense `f64` tensors with a reverse-mode tape.
//!
//! Every op records a node on a [`Tape`] holding its forward value; calling
//! [`Tape::backward`] on a scalar node replays the nodes in reverse and
//! accumulates exact adjoints. Ops in other modules plug in through
//! [`CustomOp`], which supplies the adjoint for a forward value the caller has
//! already computed.
//!
//! Shapes must match exactly; there is no broadcasting.

mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use gradcheck::{
    grad_check, grad_check_coords, grad_check_stencil, GradCheckReport, Stencil, DEFAULT_FD_EPS,
    HALVING_STEPS,
};
pub use tape::{CustomOp, Tape, Var};
pub use tensor::Tensor;
