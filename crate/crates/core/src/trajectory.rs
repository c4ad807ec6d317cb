//! Timestamped pose sequences: filter output and ground truth alike.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::Quat;
use crate::motion::NAV_DIM;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    pub t: f64,
    /// World position, m.
    pub p: Vector3<f64>,
    /// Body-to-world attitude.
    pub q: Quat,
    /// World-frame velocity, m/s.
    pub v: Vector3<f64>,
    /// Standard deviations of the nav error state `[δv, δθ, δp]`; absent for ground truth.
    pub sigma: Option<[f64; NAV_DIM]>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
}

impl Trajectory {
    pub fn new(points: Vec<TrajectoryPoint>) -> Result<Self> {
        let traj = Self { points };
        traj.validate()?;
        Ok(traj)
    }

    pub fn validate(&self) -> Result<()> {
        for w in self.points.windows(2) {
            if !(w[1].t > w[0].t) {
                return Err(Error::InvalidInput(format!(
                    "trajectory timestamps not strictly increasing ({} -> {})",
                    w[0].t, w[1].t
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn first(&self) -> Option<&TrajectoryPoint> {
        self.points.first()
    }

    pub fn last(&self) -> Option<&TrajectoryPoint> {
        self.points.last()
    }

    /// Index of the point closest in time to `t`.
    pub fn nearest(&self, t: f64) -> Option<usize> {
        if self.points.is_empty() {
            return None;
        }
        let i = self.points.partition_point(|p| p.t < t);
        if i == 0 {
            return Some(0);
        }
        if i == self.points.len() {
            return Some(i - 1);
        }
        Some(if t - self.points[i - 1].t <= self.points[i].t - t {
            i - 1
        } else {
            i
        })
    }

    /// Append, skipping a point that does not advance time.
    pub(crate) fn push(&mut self, point: TrajectoryPoint) {
        if self.points.last().is_none_or(|last| point.t > last.t) {
            self.points.push(point);
        }
    }
}
