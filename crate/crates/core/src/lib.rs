//! Calibration of a camera looking through a conical refractive cover.
//!
//! The cover is a thick cone slice whose outer surface carries a radial
//! irregularity parameterized by a Gaussian RBF network. Camera rays are
//! traced through both surfaces onto planar checkerboard targets, and the
//! RBF amplitudes are recovered by minimizing the squared board-coordinate
//! error of detected corners.

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod calibrate;
pub mod cli;
pub mod dual;
pub mod error;
pub mod geometry;
pub mod io;
pub mod linalg;
pub mod raytrace;
pub mod synth;

pub use error::{Error, RayFailure, Result, Stage, TraceError};
pub use geometry::{ConeCoords, ConeGeometry, RbfPatch, RbfSurface, Side};
pub use linalg::{Mat3, Vec3};
pub use raytrace::{BoardPose, CameraIntrinsics, Ray, SceneParams};
