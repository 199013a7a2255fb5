//! Reverse-mode autodiff: tensors, the tape, parameter stores and
//! finite-difference verification.

mod check;
mod params;
mod tape;
mod tensor;

pub use check::{grad_check, grad_check_coords, TapeFn};
pub use params::ParamStore;
pub use tape::{Tape, Value};
pub use tensor::Tensor;
