//! A desk-scale consistency-model pipeline for multi-agent trajectory
//! prediction: noise scheduling, a linear latent trajectory codec, a
//! conditional attention denoiser, best-of-K consistency training with
//! ground-truth fusion, few-step sampling, synthetic intersection scenes,
//! and an Argoverse-style metric suite.

pub mod config;
pub mod denoiser;
pub mod error;
pub mod experiment;
pub mod latent;
pub mod math;
pub mod metrics;
pub mod sampler;
pub mod scenegen;
pub mod schedule;
pub mod svg;
pub mod trainer;

pub use error::{Error, Result};
