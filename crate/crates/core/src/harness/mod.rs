//! Pipeline assembly, training, scoring, and the experiment drivers.

mod config;
mod episode;
mod model;
mod sweep;
mod train;

pub use config::{EvalConfig, PipelineConfig, Toggles, TrainingConfig};
pub use episode::{
    agent_stack, evaluate, evaluation_scenarios, run_pipeline, write_metrics_csv, EgoHistory, MetricRecord, Tally,
    METRIC_COLUMNS,
};
pub use model::{Forward, Model, TickInput};
pub use sweep::{
    ablation_suite, evaluate_conditions, history_loss_sweep, latency_sweep, noise_sweep, retention_sweep, AblationRow,
    DEFAULT_DROP_RATES, DEFAULT_LATENCIES, DEFAULT_RETENTIONS,
};
pub use train::{sample_loss, train, train_model, training_sample, Sample, TrainReport};
