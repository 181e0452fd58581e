//! Sweep runner for self-conditioned GAN experiments on 2D mixtures.

pub mod config;
pub mod error;
pub mod report;
pub mod runner;
pub mod svg;

pub use config::{CellSpec, Dataset, ExperimentConfig, Method};
pub use error::{exit, CliError, CliResult};
