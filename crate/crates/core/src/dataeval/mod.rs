//! Synthetic labelled datasets, class-balanced sampling and the evaluation
//! metrics.

pub mod manifest;
pub mod metrics;
pub mod sampler;
pub mod synth;

pub use manifest::{load_dataset, write_dataset, Manifest, ManifestEntry};
pub use metrics::{average_precision, metrics, rank_classes, EvalReport, VideoScores};
pub use sampler::weighted_sampler;
pub use synth::{converging_suite, generate, split_by_class, LabeledClip, Motion, SyntheticSpec};
