//! Self-calibrating reconstruction for optical projection tomography.
//!
//! The crate simulates straight-ray projections of a rotating sample whose
//! acquisition geometry is imperfect (angle errors, a tilted rotation axis, a
//! rotated or shifted detector), recovers that geometry jointly with the
//! volume by alternating least squares, and measures the resulting
//! mechanical artifacts against classical filtered backprojection.

pub mod basis;
pub mod calibration;
pub mod catalog;
pub mod config;
pub mod error;
pub mod fbp;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod projector;
pub mod recon;
pub mod selftest;
pub mod simulator;

pub use basis::{BlobParams, BlobProfile};
pub use error::{Error, Result};
pub use geometry::{DetectorGrid, GeometryParams, Pose, Shift, VolumeGrid};
pub use projector::{ProjectionStack, Projector, Volume};
