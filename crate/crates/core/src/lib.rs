//! Masked temporal interpolation diffusion for procedure planning.
//!
//! Given start and goal observations, a task classifier predicts the task,
//! an interpolation module produces intermediate latent features, and a
//! conditional diffusion model denoises an action block into a plan.

pub mod classifier;
pub mod denoiser;
pub mod error;
pub mod interpolation;
pub mod metrics;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod pipeline;
pub mod schedule;
pub mod store;
pub mod synthworld;

pub use error::{Error, Result};
