//! File formats, training runs, synthetic data and the command-line tool built on `regat-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod synth;

pub use error::{Error, Result};
