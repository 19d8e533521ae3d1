//! Library surface of the pipeline CLI, split out so integration tests can
//! drive stages directly.

pub mod config;
pub mod pipeline;
pub mod render;

use thiserror::Error;

/// CLI-level failures. Configuration problems exit with code 1, stage
/// failures with code 2.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("stage {stage} failed: {message}")]
    Stage { stage: &'static str, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Stage { .. } => 2,
        }
    }
}
