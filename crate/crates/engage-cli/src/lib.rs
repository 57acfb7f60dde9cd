//! Library surface behind the `engage` binary: run configuration, stage
//! commands, the evaluation harness and artifact persistence.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
pub mod evalrun;

pub use commands::{cmd_eval, cmd_explore, cmd_pipeline, cmd_validate, OutPaths, PolicyRef};
pub use config::RunConfig;
pub use error::CliError;
pub use evalrun::{evaluate, EvalReport};
