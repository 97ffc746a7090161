//! Numeric core: tensors, the autodiff tape, SPD solves, and the
//! finite-difference gradient checker.

pub mod gradcheck;
pub mod solve;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_multi, GradCheckReport};
pub use solve::solve_spd;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
