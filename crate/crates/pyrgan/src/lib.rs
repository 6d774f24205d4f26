//! Multi-scale conditional single-image GAN for CT slice synthesis.
//!
//! A pyramid of two-stage generators learns one annotated slice: at each
//! resolution a conditional stage sharpens the upsampled output of the scale
//! below, and a restoration stage re-renders that result unconditionally.
//! Synthesis then diversifies the single training pair by inference-time
//! dropout, condition-value randomization, and cross-sample fusion, and the
//! [`eval`] module measures whether the synthesized corpora train better
//! segmenters and classifiers than the slice alone.

pub mod augment;
pub mod cli;
pub mod core;
pub mod eval;
pub mod io;
pub mod losses;
pub mod nets;
pub mod synth;
pub mod trainer;

pub use crate::core::{ConditionMask, ImageTensor, SamplePair, ScaleSchedule};

/// Errors surfaced across the crate.
#[derive(Debug, thiserror::Error)]
pub enum PyrganError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("inconsistent state: {0}")]
    State(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PyrganError>;
