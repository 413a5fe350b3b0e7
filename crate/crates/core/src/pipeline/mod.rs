//! Data loading, splitting, the two training stages and the four studies.

mod config;
mod data;
mod experiment;
mod split;
mod train;

pub use config::{Config, ExperimentConfig, Stage, TrainConfig};
pub use data::{Dataset, Sample};
pub use experiment::{
    run_experiment, CellRecord, ExperimentName, ExperimentOutcome, StudyTable, TableRow,
    TABLE_CLASSES,
};
pub use split::{split_dataset, Split, SplitMode, SplitSpec};
pub use train::{
    auc_report, evaluate, finetune_location, predict_masks, segmentation_report, train_classifier,
    train_segmentation, EpochLoss, MaskProvenance, RunRecord,
};
