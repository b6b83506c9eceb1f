//! Deterministic tensor library with reverse-mode differentiation.

pub mod gradcheck;
pub mod kernels;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_probe, relative_error, Probe};
pub use rng::Rng;
pub use tape::{AttnSpec, Gradients, Tape, Var};
pub use tensor::{DType, Float, Tensor};
