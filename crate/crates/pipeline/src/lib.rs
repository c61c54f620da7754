//! Command-line pipeline around `talkgen-core`: run configuration, dataset
//! building, the LR / refiner / REFL training phases, long-video
//! generation and evaluation reports.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod generate;
pub mod train;

pub use config::RunConfig;
pub use error::{CliError, Result};
