//! Experiment runner: metrics, checkpoints, protocols and report tables.

pub mod checkpoint;
mod metrics;
mod protocol;
mod report;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Manifest, CHECKPOINT_VERSION};
pub use metrics::{compute_metrics, HorizonMetrics, MetricSet, MetricsReport, TaskMetrics};
pub use protocol::{
    checkpoint_path, continue_protocol, evaluate_task, load_tasks, run_pretraining, run_protocol, ProtocolOutput, METRICS_FILE,
    PRETRAIN_REPORT_FILE, TASK_REPORTS_FILE, TRAIN_LOG_FILE,
};
pub use report::{metrics_csv, plot_data_csv, summary_markdown};
