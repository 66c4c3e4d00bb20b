use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] emcid::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed file: {0}")]
    Format(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training gate failed: {value:.4} < {threshold}")]
    Gate { value: f64, threshold: f64 },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    /// 2 validation, 3 numerical, 4 IO.
    pub fn exit_code(&self) -> i32 {
        use emcid::Error as E;
        match self {
            Self::Io { .. } => 4,
            Self::Gate { .. } => 3,
            Self::Format(_) | Self::Config(_) => 2,
            Self::Core(e) => match e {
                E::NonFinite(_)
                | E::NotPositiveDefinite { .. }
                | E::SingularBracket(_)
                | E::NonFiniteEvaluation(_)
                | E::DivergedTraining(_)
                | E::DivergedOptimization(_)
                | E::RatioEstimationFailed => 3,
                _ => 2,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
