//! Dual-branch point/line 3D map regression for camera re-localization.
//!
//! The crate covers the full desk-scale pipeline: synthetic scene and
//! descriptor generation, the two regression branches (points and lines,
//! trained independently), the scheduled robust reprojection loss, Adam
//! training, and RANSAC + Levenberg-Marquardt pose estimation with the
//! median-error / recall evaluation protocol.

pub mod config;
pub mod geometry;
pub mod localize;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod runtime;
pub mod synth;
pub mod train;
pub mod verify;
pub mod tensor;
