//! File formats: model checkpoints and NetPBM images.

pub mod checkpoint;
pub mod netpbm;
