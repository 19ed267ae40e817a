//! File formats, configuration, reports and stage drivers for the minima
//! compression pipeline. The numerics live in `minima-core`.

pub mod bench;
pub mod cli;
pub mod commands;
pub mod config;
pub mod container;
pub mod error;
pub mod formats;
pub mod markov;
pub mod report;

pub use config::RunConfig;
pub use error::{Error, Result};

/// Version line printed by `minima --version`.
pub const VERSION_LINE: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    " (container format v1, report schema v1)"
);
