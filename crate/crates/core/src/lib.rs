//! Conditional variational capsule networks for open set recognition.
//!
//! Images are encoded into class capsules by dynamic routing, mapped to one
//! diagonal Gaussian per class capsule, and pulled towards per-class Gaussian
//! targets. Samples far from every target are rejected as unknown.

pub mod capsnet;
pub mod decoder;
pub mod detector;
pub mod error;
pub mod harness;
pub mod loss;
pub mod model;
pub mod ops;
pub mod params;
pub mod protocol;
pub mod targets;
pub mod variational;

pub use error::{Error, Result};
