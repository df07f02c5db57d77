//! Engine for audio-driven emotional blendshape animation: a conditional
//! sequence-diffusion model generates expression/pose sequences from audio
//! features, an initial state, and an emotion-style clip; a second-stage
//! network then regenerates only the mouth channels for tighter audio
//! synchronization.

pub mod audio;
pub mod blendshape;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod fileio;
pub mod conditioning;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod lip;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod sampler;
pub mod schedule;

pub use error::{EngineError, Result};
