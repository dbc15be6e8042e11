//! Command-line driver for GenTron: synthetic data, training, sampling and
//! self-checks.

pub mod check;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod oracle;
pub mod ppm;

pub use error::CliError;
