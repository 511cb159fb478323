//! Mask-constrained text-guided image editing with a toy diffusion model.
//!
//! The crate bundles a small reverse-mode autodiff engine, a transformer
//! denoiser with an attention-map hook, DDIM sampling and inversion, the
//! inside/outside attention constraint, the editing pipeline built on top
//! of them, and a synthetic benchmark.

pub mod autodiff;
pub mod bench;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod inside_outside;
pub mod io;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod tokens;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
