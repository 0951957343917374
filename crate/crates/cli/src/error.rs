use std::path::{Path, PathBuf};
use std::process::ExitCode;

use thiserror::Error;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    /// Malformed or inconsistent input: bad JSON/CSV, missing fields,
    /// invalid settings, mismatched dimensions.
    #[error("{0}")]
    Schema(String),

    /// A fit, solver or estimator failed on well-formed input.
    #[error("{0}")]
    Numerical(String),

    /// Artifacts from different runs were combined.
    #[error("lineage mismatch: {0} (pass --force to override)")]
    Lineage(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Io { .. } => 1,
            CliError::Schema(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Lineage(_) => 4,
        })
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    pub fn schema(msg: impl Into<String>) -> Self {
        CliError::Schema(msg.into())
    }
}

impl From<tesqdt::Error> for CliError {
    fn from(e: tesqdt::Error) -> Self {
        use tesqdt::Error as E;
        match e {
            E::Domain(_) | E::Shape(_) | E::Config(_) => CliError::Schema(e.to_string()),
            E::Calibration(_) | E::Fit { .. } | E::Estimation(_) | E::NonFinite(_) => {
                CliError::Numerical(e.to_string())
            }
        }
    }
}
