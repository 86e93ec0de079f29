//! Training runs: configuration, the step loop, logging, checkpoints and
//! prediction.

mod config;
mod train;

pub use config::{DataConfig, EarlyStopping, Experiment, OptimizerConfig, PathsConfig, RunConfig, StopMetric};
pub use train::{
    build_vocabulary, predict, train, LogRecord, RunSummary, Split, StopReason, TrainedModel, TrainingData,
    BEST_CHECKPOINT, FINAL_CHECKPOINT,
};

#[cfg(test)]
mod tests;
