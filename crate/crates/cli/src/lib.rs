//! Experiment harness and property suites behind the `fixdiff` binary.

pub mod checks;
pub mod config;
pub mod experiments;
pub mod pool;
pub mod record;
pub mod svg;

pub use config::{Config, ConfigError};
