//! Experiment orchestration: run configs, the training loop, evaluation,
//! ablation grids and CSV reports.

mod ablate;
mod config;
mod train;

pub use ablate::{ablate, parse_axis, write_report, Axis, CellSummary, REPORT_FILE, RUNS_FILE};
pub use config::{load_config, parse_config, Extraction, PatchSize, RunConfig};
pub use train::{
    batch_gradient, derive_seed, evaluate, evaluate_scenes, feature_mask, generate, item_loss_wrt,
    split_point, train, BatchGradient, BatchItem, BatchRecord, EpochRecord, Split, Stream,
    TrainOutcome, BATCHES_FILE, BATCHES_HEADER, CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE,
    METRICS_HEADER,
};

#[cfg(test)]
mod tests;
