//! Fixtures, run configuration and artifact output.
//!
//! A run is described by a TOML file (see [`parse_config`]) and executed by
//! [`execute`], which writes one trace CSV per run and a `summary.json`.

mod config;
mod execute;
mod fixtures;

pub use config::*;
pub use execute::*;
pub use fixtures::*;
