//! Datasets, augmentation, the training loop, the learning-rate range test
//! and evaluation metrics.

mod augment;
mod data;
mod lr_finder;
mod metrics;
pub mod synth;
mod trainer;

pub use augment::{augment, sample_rng, AugmentConfig, AugmentParams};
pub use data::{balance_by_resampling, label_counts, split_train_test, Dataset, DatasetManifest, Label, ManifestEntry};
pub use lr_finder::{lr_range_test, lr_sweep, LrCurve, LrPoint, LrRangeConfig};
pub use metrics::{f05, f_beta, Confusion, EvalReport, PredictionRecord};
pub use synth::{synth_dataset, SynthConfig};
pub use trainer::{evaluate, predict, train, EpochStats, History, LrSchedule, TrainConfig};
