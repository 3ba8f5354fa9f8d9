//! Front-end for the conditional representation learning toolkit: run
//! configuration, checkpoints, reports, embedding export and plots.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod plot;
pub mod report;

pub use error::{CliError, Result};
