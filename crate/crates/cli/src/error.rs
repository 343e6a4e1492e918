use std::fmt::Display;
use std::path::Path;
use std::process::ExitCode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("failed to load {path}: {message}")]
    Load { path: String, message: String },
    #[error("optimization diverged at step {step}")]
    Diverged { step: usize },
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn load(path: &Path, e: impl Display) -> Self {
        Self::Load { path: path.display().to_string(), message: e.to_string() }
    }

    pub fn other(e: impl Display) -> Self {
        Self::Other(e.to_string())
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            Self::Invalid(_) => 2,
            Self::Load { .. } => 3,
            Self::Diverged { .. } => 4,
            Self::Other(_) => 1,
        })
    }
}
