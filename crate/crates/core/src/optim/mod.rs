//! Optimizers over a flat parameter vector.

mod adam;
mod lbfgs;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use lbfgs::{lbfgs_step, LbfgsConfig, LbfgsState, LbfgsStep};
