//! Augmentation, dataset splits, the loss, Adam and the epoch loop.

pub mod augment;
pub mod config;
pub mod dataset;
pub mod loss;
pub mod optim;
pub mod run;

pub use augment::{augment_patch, augment_scene, hflip, rot90, transform, AUGMENTATIONS};
pub use config::TrainConfig;
pub use dataset::{augment_all, load_samples, select, split_dataset, DatasetSplit, Sample, SplitPart, DEFAULT_RATIOS};
pub use loss::{bce_loss, correct_pixels, pixel_accuracy, CLAMP};
pub use optim::{adam_step, AdamState, OptimizerConfig};
pub use run::{evaluate, train, write_checkpoint, EpochRecord, TrainData, TrainingHistory};
