//! Conditional diffusion generation of LiDAR objects.
//!
//! The crate covers the sensor-relative object parameterization, condition
//! encodings, a small reverse-mode autodiff engine, diffusion-transformer
//! denoisers, the DDPM process with classifier-free guidance, the generative
//! evaluation metrics, and a procedural LiDAR scanner that produces datasets
//! for all of the above.

pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod encodings;
pub mod error;
pub mod metrics;
pub mod objects;
pub mod optim;
pub mod render;
pub mod synthgen;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
