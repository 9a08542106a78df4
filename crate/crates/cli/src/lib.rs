//! Front end of the dispatch solver: run configuration, commands and
//! artifact export.

pub mod commands;
pub mod config;

pub use commands::{cmd_cfl, cmd_errors, cmd_simulate, cmd_solve, cmd_tune_beta, exit_code};
pub use config::{Inputs, RunConfig};
