//! Crate-wide error type.
//!
//! Each module defines its own error enum naming the offending entity
//! (channel label, patient id, path, …); this umbrella folds them together so
//! pipeline-level code can use one `Result` alias. `exit_code` maps errors
//! onto the process exit conventions used by the `ncv` binary.

use crate::dataset::DatasetError;
use crate::evaluate::EvalError;
use crate::folds::{FoldError, LeakageReport};
use crate::model::ModelError;
use crate::preprocess::PreprocessError;
use crate::selection::SelectionError;
use crate::spectro::SpectroError;

#[derive(Debug, thiserror::Error)]
pub enum NcvError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Spectro(#[from] SpectroError),
    #[error(transparent)]
    Folds(#[from] FoldError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Report(#[from] EvalError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    State(String),
    #[error("leakage detected in a split that must be clean: {0}")]
    Leakage(LeakageReport),
}

impl NcvError {
    /// Process exit code: 2 = configuration error, 3 = data error,
    /// 4 = leakage violation.
    pub fn exit_code(&self) -> i32 {
        match self {
            NcvError::Config(_) => 2,
            NcvError::Dataset(DatasetError::InvalidSynthSpec { .. }) => 2,
            NcvError::Leakage(_) => 4,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, NcvError>;
