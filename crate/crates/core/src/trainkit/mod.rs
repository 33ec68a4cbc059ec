//! Two-stage training, checkpoints, run configuration and the ablation matrix.

mod checkpoint;
mod matrix;
mod plan;
mod train;

#[cfg(test)]
mod tests;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION, MAGIC,
};
pub use matrix::{
    run_matrix, summarize, write_rows_csv, ChainSpec, ChainSummary, MatrixOptions, MatrixOutcome, MatrixRow,
    MatrixSpec, DEGRADATION_FLOOR,
};
pub use plan::{merge_pairs, parse_config, StagePlan, PLAN_KEYS};
pub use train::{step_gradients, train_stage, write_metrics_csv, MetricRow, StepResult, TrainOptions, TrainState};
