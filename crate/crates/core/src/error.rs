//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Scene generation could not place an object without collision.
    #[error("placement failed for object '{object}' after {attempts} rejection attempts")]
    Placement { object: String, attempts: usize },

    /// Degenerate camera geometry (target coincident with the pivot).
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    /// A task instance could not be realized (caller should resample).
    #[error("task instance rejected: {0}")]
    Rejection(String),

    /// Perturbation sampling exhausted its retry budget.
    #[error("infeasible perturbation for modality {modality} after {attempts} attempts")]
    InfeasiblePerturbation { modality: String, attempts: usize },

    /// Tensor shape mismatch, names the offending layer.
    #[error("dimension mismatch in {layer}: expected {expected}, got {got}")]
    DimMismatch {
        layer: String,
        expected: String,
        got: String,
    },

    /// A NaN was detected during sampling or training.
    #[error("numerical fault: {0}")]
    NumericalFault(String),

    /// Frozen parameter group mutated during training.
    #[error("frozen group '{0}' mutated during training")]
    FrozenGroupMutated(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    /// CLI exit code bucket for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::NumericalFault(_) => 4,
            _ => 3,
        }
    }
}
