//! Configuration, training loops, sweeps, embeddings and reports.

pub mod config;
pub mod optim;
pub mod records;
pub mod report;
pub mod sweep;
pub mod train;
pub mod tsne;

pub use config::{DataConfig, GateMode, OptimConfig, RunConfig, Seeds, TrainConfig};
pub use optim::Adam;
pub use records::{read_records, RunRecord, RESULTS_HEADER, RESULTS_SCHEMA_VERSION};
pub use train::{evaluate, load_data, run_training, train_stage1, train_stage2, EvalMetrics, RunOutput, StageOutcome};
