use std::path::PathBuf;

use slotlab_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("capacity: {0}")]
    Capacity(String),

    #[error("catalog: {0}")]
    Catalog(String),

    #[error("infeasible split: {0}")]
    InfeasibleSplit(String),

    #[error("simulation: {0}")]
    Simulation(String),

    #[error("contract: {0}")]
    Contract(String),

    #[error("dimension: {0}")]
    Dimension(String),

    #[error("unsupported environment: {0}")]
    UnsupportedEnv(String),

    #[error("format: {0}")]
    Format(String),

    #[error("config: {0}")]
    Config(String),

    #[error("mismatch: {0}")]
    Mismatch(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl LabError {
    /// Stable machine-readable category, used as the CLI error prefix.
    pub fn category(&self) -> &'static str {
        match self {
            LabError::Tensor(TensorError::NonFinite { .. }) | LabError::NonFiniteLoss { .. } => {
                "numeric"
            }
            LabError::Tensor(TensorError::Checkpoint(_)) => "checkpoint",
            LabError::Tensor(_) => "tensor",
            LabError::Capacity(_) => "capacity",
            LabError::Catalog(_) => "catalog",
            LabError::InfeasibleSplit(_) => "infeasible-split",
            LabError::Simulation(_) => "simulation",
            LabError::Contract(_) => "contract",
            LabError::Dimension(_) => "dimension",
            LabError::UnsupportedEnv(_) => "unsupported-env",
            LabError::Format(_) => "format",
            LabError::Config(_) => "config",
            LabError::Mismatch(_) => "mismatch",
            LabError::Io { .. } => "io",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
