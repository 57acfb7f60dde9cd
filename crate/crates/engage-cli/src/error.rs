//! CLI error taxonomy mapped onto process exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad config, bad input files, IO trouble. Exit 2.
    #[error("{0}")]
    Config(String),
    /// An agent or backend failed mid-run. Exit 3.
    #[error("agent failure: {0}")]
    Agent(String),
    /// An internal invariant did not hold. Exit 4.
    #[error("invariant violation: {0}")]
    Invariant(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Agent(_) => 3,
            CliError::Invariant(_) => 4,
        }
    }

    pub fn io(context: &str, err: std::io::Error) -> CliError {
        CliError::Config(format!("{context}: {err}"))
    }
}
