//! Cue-guided hate speech detection.
//!
//! Two frozen cue encoders (sentiment and aggression) expose the CLS row of
//! their last-block, head-averaged attention. A small selector network turns
//! those per-token cue weights into a gate `C` that scales the hate
//! detector's final representation before classification.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod cue;
pub mod data;
pub mod detector;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod params;
pub mod schedule;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
