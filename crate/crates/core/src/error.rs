use thiserror::Error;

use crate::ustat::PairIndex;

/// Errors raised anywhere in the model, kernel, U-statistic and fitting layers.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum FrmError {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("exp link overflow at linear predictor {eta}")]
    LinkOverflow { eta: f64 },

    #[error("evaluation failed at pair {pair}: {reason}")]
    PairEvaluation { pair: PairIndex, reason: String },

    #[error("information matrix is singular or ill-conditioned (condition number {condition:e})")]
    SingularInformation { condition: f64 },

    #[error("no convergence after {iterations} iterations (equation norm {eq_norm:e}, last step {step_norm:e})")]
    NonConvergence { iterations: usize, beta: Vec<f64>, eq_norm: f64, step_norm: f64 },

    #[error("adaptive working-variance loop did not settle after {rounds} rounds")]
    AdaptiveNonConvergence { rounds: usize, trace: Vec<f64> },
}

pub type Result<T> = std::result::Result<T, FrmError>;

pub(crate) fn input<T>(msg: impl Into<String>) -> Result<T> {
    Err(FrmError::Input(msg.into()))
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(FrmError::DimensionMismatch { expected, got })
    }
}
