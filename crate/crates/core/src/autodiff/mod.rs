//! Reverse-mode differentiation engine and optimizer.

pub mod check;
mod optim;
mod tape;
mod tensor;

pub use optim::{Adam, AdamConfig};
pub use tape::{Tape, Var};
pub use tensor::{ParamSet, Tensor};

#[cfg(test)]
mod tests;
