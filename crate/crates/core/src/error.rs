use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("gradient of task {task} has (near) zero norm")]
    ZeroGradient { task: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid adapter placement: {0}")]
    InvalidPlacement(String),

    #[error("segmentation label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },

    #[error("non-finite loss at step {step} (task losses {task_losses:?}, batch seeds {batch_seeds:?})")]
    NonFiniteLoss {
        step: u64,
        task_losses: Vec<f64>,
        batch_seeds: Vec<u64>,
    },

    #[error("frozen parameters changed during epoch {epoch}")]
    BackboneModified { epoch: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error("png encoding: {0}")]
    Png(#[from] png::EncodingError),
}

pub type Result<T> = std::result::Result<T, Error>;
