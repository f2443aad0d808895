//! Continuous conditional diffusion models (CCDM) for images labelled with a
//! scalar regression target.

pub mod denoiser;
pub mod config;
pub mod data;
pub mod diffmath;
pub mod distill;
pub mod embednet;
pub mod error;
pub mod labelspace;
pub mod metrics;
pub mod rng;
pub mod nets;
pub mod pipeline;
pub mod plot;
pub mod sampler;
pub mod schedule;
pub mod train;

pub use error::{CcdmError, Result};
