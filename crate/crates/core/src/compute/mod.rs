//! Minimal reverse-mode differentiable tensor engine. Dense f64 storage,
//! dynamic graph rebuilt every step, single threaded. Sized for desk-scale
//! models (thousands to a few million scalars), not for speed records.

mod gradcheck;
mod optim;
mod store;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use optim::{Optimizer, OptimizerKind};
pub use store::ParameterStore;
pub use tensor::{backward, Tensor};
