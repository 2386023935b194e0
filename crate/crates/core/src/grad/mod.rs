//! Reverse-mode differentiation, parameter storage and the optimizer.

pub mod optim;
pub mod params;
pub mod tape;

pub use optim::{adamw_step, decay_lr, OptimConfig};
pub use params::{ParamEntry, ParamId, ParamKind, ParamStore};
pub use tape::{Gradients, Tape, Var};
