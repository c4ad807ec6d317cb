//! Radar-inertial odometry: an error-state EKF that fuses IMU mechanization with
//! tightly-coupled 4D radar detections (Doppler, bearing, range) of features
//! parameterized on the unit sphere.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod ekf;
pub mod error;
pub mod eval;
pub mod feature;
pub mod geometry;
pub mod io;
pub mod manager;
pub mod motion;
pub mod radar;
pub mod replay;
pub mod sim;
pub mod trajectory;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
