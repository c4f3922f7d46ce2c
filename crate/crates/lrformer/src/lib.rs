//! File formats and the command-line front end for `lrformer-core`.

pub mod cli;
mod error;
pub mod netpbm;
pub mod weights;

pub use error::{exit, CommandError};
