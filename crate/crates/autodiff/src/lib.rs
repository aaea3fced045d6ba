//! Dense-tensor tape with reverse-mode differentiation.
//!
//! A [`Tape`] borrows a [`ParamStore`], records each primitive as it is
//! applied, and replays the records backwards to produce [`Gradients`].
//! [`finite_difference_check`] compares those gradients with central
//! differences; [`Adam`] consumes them.

mod double;
mod error;
mod gradcheck;
mod optim;
mod param;
mod real;
mod tape;
mod tensor;

pub use double::F64x2;
pub use error::{AutodiffError, Result};
pub use gradcheck::{
    finite_difference_check, finite_difference_check_extended, relative_error, GradCheckConfig,
    GradCheckReport, ParamCheck,
};
pub use optim::Adam;
pub use param::{Gradients, Init, ParamId, ParamStore, Parameter};
pub use real::Real;
pub use tape::{NllQuery, NllTarget, Primitive, Tape, Var};
pub use tensor::Tensor;
