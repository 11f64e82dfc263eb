//! Minimal differentiable-network kit: matrices, a recording tape with
//! reverse-mode gradients, dense and GRU layers, RMSprop/Adam, and a
//! finite-difference gradient checker.

mod gradcheck;
mod layers;
mod matrix;
mod optim;
mod tape;

pub use gradcheck::grad_check;
pub use layers::{init_uniform, Dense, Gru};
pub use matrix::Matrix;
pub use optim::{OptimizerKind, OptimizerState};
pub use tape::{sigmoid, Activation, Bound, Gradients, ParamId, ParamSet, Tape, Var};
