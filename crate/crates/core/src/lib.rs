//! Diffusion-based generation of gaze scanpaths conditioned on a stimulus and
//! a viewing task, plus the scanpath similarity and diversity metrics used to
//! evaluate generated scanpaths against human ones.

pub mod conditioning;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod gaze;
pub mod metrics;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
