//! Tensor arithmetic, reverse-mode differentiation and optimizers.

mod optim;
mod tape;
mod tensor;

pub use optim::{Optimizer, OptimizerKind};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
