//! Two-stage training-free object insertion into videos.
//!
//! The pipeline pastes a reference object along a box trajectory, perturbs
//! the paste, harmonises each frame with an image diffusion model and then
//! re-aligns the clip with a video model under feature and attention
//! injection.

pub mod compositor;
pub mod diffusion;
pub mod error;
pub mod frame;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod pixel_noise;
pub mod rng;
pub mod stage1;
pub mod stage2;

pub use error::{Error, Result};
