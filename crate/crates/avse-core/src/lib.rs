//! Robust face frontalization and unsupervised audio-visual speech
//! enhancement, with a synthetic data harness for end-to-end verification.

pub mod enhance;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod morphable;
pub mod prior;
pub mod registration;
pub mod special;
pub mod spectral;

pub use error::{Error, Result};
pub use registration::{EmConfig, LandmarkSet, Pose, RobustFit};
pub use spectral::{Spectrogram, StftConfig, Waveform};
