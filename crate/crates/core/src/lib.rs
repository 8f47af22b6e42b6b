//! Object-aware LiDAR diffusion: object point-cloud generation, range-image
//! scene generation conditioned on object layouts, scene completion and
//! distribution metrics.

pub mod autograd;
pub mod cli;
pub mod conditioning;
pub mod config;
pub mod datagen;
pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod networks;
pub mod osa;
pub mod pipeline;
pub mod seeds;

pub use error::{Error, Result};
