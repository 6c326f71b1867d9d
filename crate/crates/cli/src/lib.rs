//! Experiment runner behind the `crossdiff` binary.

pub mod check;
pub mod config;
pub mod io;
pub mod presets;
pub mod run;

pub use config::{parse_config, RunSpec};
pub use run::{run_experiment, Outcome, Verdict};
