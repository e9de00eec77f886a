//! Training, inference and evaluation built on the lower-level modules.

mod checkpoint;
mod config;
mod eval;
mod infer;
mod plot;
mod train;

use thiserror::Error;

pub use checkpoint::{Architecture, Checkpoint, FORMAT_VERSION, MAGIC};
pub use eval::{evaluate_color_vs_defocus, ColorRecord, EvalReport, RefocusRow, TTestRow, CHANNELS};
pub use infer::{predict_tiled, save_rgb_png, to_rgb, Framework, Models, Tiling};
pub use plot::{line_plot, Series};
pub use config::{Config, DESK_VS_WEIGHTS, KEYS, ScaleProfile, Stage, TrainConfig};
pub use train::{train_refocuser, train_virtual_stainer, LossRecord, TrainHistory, TrainOutcome, DR_TERMS, VS_TERMS};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("architecture mismatch: expected `{expected}`, found `{found}`")]
    ArchitectureMismatch { expected: String, found: String },
    #[error("non-finite loss or gradient at iteration {iteration}")]
    NonFinite { iteration: usize, last_good: Box<Checkpoint> },
    #[error("frozen network modified: {0}")]
    FrozenViolation(String),
    #[error("{0} requires a checkpoint")]
    MissingCheckpoint(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Model(#[from] crate::models::ModelError),
    #[error(transparent)]
    Loss(#[from] crate::losses::LossError),
    #[error(transparent)]
    Phantom(#[from] crate::phantom::PhantomError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error(transparent)]
    Registration(#[from] crate::registration::RegistrationError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;
