//! Post-hoc score sharpening for diffusion samplers.

pub mod denoiser;
pub mod config;
pub mod error;
pub mod gmm;
pub mod metrics;
pub mod plot;
pub mod runner;
pub mod sampler;
pub mod schedule;
pub mod shapes;
pub mod sharpening;

pub use error::{Error, Result};
