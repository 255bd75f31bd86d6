//! Diffuser-modulated lensless microscopy toolkit.
//!
//! Synthesizes intensity datasets from a known complex object through a
//! scanned thin diffuser, then blindly recovers the diffuser trajectory, the
//! diffuser profile, and the object's complex exit wavefront, with digital
//! refocusing and quantitative-phase cell segmentation downstream.

pub mod dataset;
pub mod error;
mod fft;
pub mod field;
pub mod metrics;
pub mod propagation;
pub mod recovery;
pub mod refocus;
pub mod registration;
pub mod segmentation;
pub mod simulator;

pub use error::{Error, Result};
pub use field::{ComplexField, Geometry, Measurement, RealImage};
pub use registration::ScanPose;
