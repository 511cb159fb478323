//! Synthetic shapes benchmark: scenes, oracle segmenter, metrics, harness.

pub mod harness;
pub mod metrics;
pub mod oracle;
pub mod scene;
