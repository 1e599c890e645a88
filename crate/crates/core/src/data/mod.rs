//! Evolving traffic networks: task datasets, CSV ingestion, synthetic streams,
//! normalization, week extraction, windowing and the 6:2:2 split.

mod csv;
mod ops;
mod synthetic;
mod types;

pub use self::csv::{
    load_calendar, load_csv, load_dataset_dir, load_task_metadata, write_dataset_dir, write_labels, CALENDAR_FILE, FLOWS_FILE, LABELS_FILE,
    TASKS_FILE,
};
pub use ops::{
    extract_task_week, extract_week, first_monday, fit_normalizer, make_windows, normalize_panel, split_protocol, split_task, week_start,
    window_count,
};
pub use synthetic::{generate_stream, ClusterPattern, StreamSpec, SyntheticStream};
pub use types::{validate_stream, NodePanel, NormStats, SensorSeries, SplitRanges, TaskDataset, WeekMatrix, WindowBatch};
