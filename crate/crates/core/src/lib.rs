//! Geometric and numerical core of single-stage, wide-depth-range 6D object
//! pose estimation.
//!
//! The pipeline predicts, on every level of a feature pyramid, the 2D
//! projections of the eight corners of an object's 3D bounding box. The
//! pieces here cover training-time geometry (the 3D regression loss and the
//! ensemble-aware level sampling), inference-time multi-scale fusion through
//! RANSAC + PnP, pose metrics, and a synthetic scene simulator that stands in
//! for the network.

pub mod error;
pub mod fusion;
pub mod geometry;
pub mod gradcheck;
pub mod grid;
pub mod losses;
pub mod metrics;
pub mod pnp;
pub mod sampling;
pub mod simulator;

pub use error::{Error, Result};

/// Version stamped into every JSON document this crate writes.
pub const SCHEMA_VERSION: u32 = 1;
