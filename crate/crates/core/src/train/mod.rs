//! Dataset synthesis, objective, training loop and evaluation.

pub mod crop;
pub mod dataset;
pub mod eval;
pub mod loss;
pub mod metrics;
pub mod trainer;

pub use crop::sample_crop;
pub use dataset::{build_dataset, DatasetConfig, Manifest, Sample, Split, VolumeRecord};
pub use eval::{evaluate, CropMode, EvalOptions, EvalReport, EvalRow};
pub use loss::{loss_total, FeatureNet, LossTerms, LossWeights};
pub use metrics::{psnr, ssim};
pub use trainer::{mean_mse, train, train_from, EpochStats, TrainConfig, TrainOutcome, TrainOutputs};
