//! File formats, run configuration and the end-to-end commands behind the CLI.

pub mod config;
pub mod convert;
pub mod formats;
pub mod pipeline;

pub use config::{RunConfig, SplitName};
pub use formats::{CurveTable, Split};
pub use pipeline::{Checkpoint, CheckpointModel, MetricsReport};
