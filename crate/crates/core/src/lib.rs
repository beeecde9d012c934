#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod error;
pub mod eval;
pub mod exec;
pub mod fd;
pub mod grid;
pub mod io;
pub mod kde;
pub mod kernel;
pub mod loss;
pub mod model;
pub mod net;
pub mod optim;
pub mod pipeline;
pub mod solver;
pub mod train;

pub use error::{Error, Result};
