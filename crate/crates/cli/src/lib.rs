//! Dataset generation, two-stage training, evaluation, sweeps and plots.

pub mod commands;
pub mod config;
pub mod plot;
