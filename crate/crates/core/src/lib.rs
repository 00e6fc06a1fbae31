//! Transaction-graph risk scoring: tabular ingestion, shared-attribute
//! graph construction, an attention message-passing model with a minimal
//! reverse-mode gradient engine, training, and calibrated evaluation.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod synth;
pub mod train;
pub mod error;
pub mod graph;
pub mod ingest;

pub use error::{Error, Result};
