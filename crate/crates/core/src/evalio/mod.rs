//! Held-out evaluation, the metrics CSV and the checkpoint container.

mod checkpoint;
mod eval;
mod metrics;

pub use checkpoint::{
    checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, save_checkpoint, CheckpointHeader, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use eval::{evaluate, EvalSuite, Evaluation};
pub use metrics::{metrics_header, read_metrics, write_metrics, MetricKind, MetricsRecord, Stage};
