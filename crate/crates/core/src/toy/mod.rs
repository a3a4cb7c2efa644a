//! Desk-scale stand-in for a segmentation network.
//!
//! Synthetic disks of each foreground class on a noisy background, a linear
//! softmax classifier over five per-pixel features, and an SGD loop driven by
//! the warm-restart schedule. Good enough to produce checkpoints that
//! disagree near class boundaries, which is what the rest of the pipeline
//! consumes.

mod experiment;
mod model;
mod scene;
mod train;

pub use model::{
    case_features, pixel_features, predict, CheckpointStore, PixelFeatures, ToyModel,
    FEATURE_COUNT, INPUT_COUNT,
};
pub use experiment::{write_cases, ToyExperiment, ToyRun, DEGRADED_CONTRAST};
pub use scene::{
    class_level, generate_dataset, generate_varied, generate_with, Blob, DatasetConfig,
    SyntheticScene, ToyCase,
};
pub use train::{
    checkpoint_id, mean_foreground_dice, soft_dice_loss, train, TrainConfig, TrainOutput,
    DICE_SMOOTH,
};
