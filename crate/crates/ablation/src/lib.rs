//! Training, evaluation and ablation harness around `ddtr-core`.

pub mod ablate;
pub mod config;
pub mod data;
pub mod eval;
pub mod report;
pub mod search;
pub mod train;

use thiserror::Error;

pub use ablate::{ablate, grid, Axis, ResultRow};
pub use config::{DatasetSource, ExperimentConfig, TrainingConfig};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at step {step}: non-finite loss or gradient")]
    Diverged { step: usize },
    #[error(transparent)]
    Model(#[from] ddtr_core::model::ModelError),
    #[error(transparent)]
    Tensor(#[from] ddtr_core::tensor::TensorError),
    #[error(transparent)]
    Loss(#[from] ddtr_core::loss::LossError),
    #[error(transparent)]
    Data(#[from] ddtr_core::data::DataError),
    #[error(transparent)]
    Eval(#[from] ddtr_core::metrics::EvalSetError),
    #[error(transparent)]
    Weights(#[from] ddtr_core::model::weights::WeightsError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("writing CSV: {0}")]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    /// Process exit code: 1 for invalid input, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 1,
            _ => 2,
        }
    }
}
