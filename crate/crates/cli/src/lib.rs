//! Command-line front end: experiment configuration, checkpoints, the
//! train/solve/eval/reproduce pipeline and result files.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;
pub mod plot;

pub use error::{CliError, Result};
