//! The hierarchical t-patch classifier, its objective, training loop and
//! GradCAM saliency.

pub mod config;
pub mod gradcam;
pub mod network;
pub mod objective;
pub mod train;

pub use config::{ExtractionConfig, HeadMode, Jitter, LevelConfig, ModelConfig};
pub use gradcam::{gradcam, Saliency};
pub use network::{ClipGeometry, LevelGeometry, Model, Outputs};
pub use objective::{
    batch_loss, check_model_gradients, gradient_suite, tiny_config, BatchLoss, GradCheckRow, ModelGradReport,
};
pub use train::{evaluate, log_csv, train, EpochLog, Evaluation, TrainConfig, TrainOutcome};
