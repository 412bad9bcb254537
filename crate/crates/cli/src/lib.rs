//! Command-line front end for frm-core: data ingestion, `fit`, `distance`
//! and `simulate`.

pub mod args;
pub mod commands;
pub mod io;

use frm_core::FrmError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Model(#[from] FrmError),
    /// The command ran but its result must not be trusted.
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    /// 0 ok, 1 non-convergence or untrustworthy result, 2 input error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Model(
                FrmError::NonConvergence { .. }
                | FrmError::AdaptiveNonConvergence { .. }
                | FrmError::SingularInformation { .. },
            ) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub(crate) fn input_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(CliError::Input(msg.into()))
}
