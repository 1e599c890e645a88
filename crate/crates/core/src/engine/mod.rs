//! Continual-learning orchestration: pre-training, localized groups and the
//! consolidation term, synthetic rehearsal, replay selection, the per-task
//! training loop and evaluation.

mod audit;
mod eval;
mod groups;
mod replay;
mod sampling;
mod state;
mod train;

pub use audit::{AccessReport, AuditedTask};
pub use eval::{evaluate, forecast, task_gating, Forecast};
pub use groups::{build_localized_groups, consolidation_loss, LocalizedGroups};
pub use replay::{reconstruction_based_replay, ReplaySelection};
pub use sampling::{forgetting_resilient_sampling, sample_counts, synchronize_samples, SynchronizedSlices, SyntheticWeekSet};
pub use state::{pretrain, DecTraceRecord, ModelDims, ModelState, PretrainReport, SeedGroups};
pub use train::{frozen_evidence, train_task, EpochRecord, TaskTrainReport, SYNTHETIC_KEY_BASE};
