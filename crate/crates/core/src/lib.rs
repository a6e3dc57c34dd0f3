//! Desk-scale cross-view masked diffusion transformer for pose-guided
//! person image generation.

pub mod canet;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod io;
pub mod metrics;
pub mod mipnet;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod tensor;
pub mod toy_world;
pub mod train;
