//! IMU mechanization in the body frame.
//!
//! State: body-frame velocity, body-to-world attitude, world position.
//! Dynamics under zero-order-hold inputs:
//!
//! ```text
//! v' = a + R(q)ᵀ g - ω × v
//! q' = ½ q ⊗ [0, ω]
//! p' = R(q) v
//! ```
//!
//! The attitude error is a global (left) rotation vector, `q_true = exp(δθ) ⊗ q`.

use nalgebra::{SMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{exp_so3, log_so3, quat_mul, quat_to_rotmat, skew, Quat};

pub const NAV_DIM: usize = 9;
pub type NavMatrix = SMatrix<f64, NAV_DIM, NAV_DIM>;
pub type NavVector = SMatrix<f64, NAV_DIM, 1>;

/// Longest single propagation step accepted by [`propagate_nav`].
pub const MAX_STEP: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NavState {
    /// Body-frame velocity, m/s.
    pub v: Vector3<f64>,
    /// Attitude, body to world.
    pub q: Quat,
    /// World position, m.
    pub p: Vector3<f64>,
}

impl Default for NavState {
    fn default() -> Self {
        Self {
            v: Vector3::zeros(),
            q: Quat::identity(),
            p: Vector3::zeros(),
        }
    }
}

impl NavState {
    /// Apply an error-state correction `[δv, δθ, δp]`.
    pub fn boxplus(&self, dx: &NavVector) -> NavState {
        let dv = dx.fixed_rows::<3>(0).into_owned();
        let dtheta = dx.fixed_rows::<3>(3).into_owned();
        let dp = dx.fixed_rows::<3>(6).into_owned();
        NavState {
            v: self.v + dv,
            q: quat_mul(&exp_so3(&dtheta), &self.q),
            p: self.p + dp,
        }
    }

    /// Error state taking `other` to `self`.
    pub fn boxminus(&self, other: &NavState) -> NavVector {
        let mut dx = NavVector::zeros();
        dx.fixed_rows_mut::<3>(0).copy_from(&(self.v - other.v));
        dx.fixed_rows_mut::<3>(3)
            .copy_from(&log_so3(&quat_mul(&self.q, &other.q.inverse())));
        dx.fixed_rows_mut::<3>(6).copy_from(&(self.p - other.p));
        dx
    }

    pub fn is_finite(&self) -> bool {
        self.v.iter().chain(self.p.iter()).all(|x| x.is_finite()) && self.q.coords.iter().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    /// Specific force in the body frame, m/s².
    pub accel: Vector3<f64>,
    /// Angular rate in the body frame, rad/s.
    pub gyro: Vector3<f64>,
}

impl ImuSample {
    pub fn new(t: f64, accel: Vector3<f64>, gyro: Vector3<f64>) -> Self {
        Self { t, accel, gyro }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GravityModel {
    pub g_world: [f64; 3],
}

impl Default for GravityModel {
    fn default() -> Self {
        Self {
            g_world: [0.0, 0.0, -9.81],
        }
    }
}

impl GravityModel {
    pub fn vector(&self) -> Vector3<f64> {
        Vector3::from(self.g_world)
    }
}

/// Body-frame velocities at the four RK4 stages of one step.
///
/// Stage times are `t0`, `t0 + dt/2` (twice) and `t0 + dt`. Feature propagation
/// consumes these so that the radar-frame velocity tracks the nav solution
/// within the step.
#[derive(Debug, Clone, Copy)]
pub struct NavStages {
    pub v: [Vector3<f64>; 4],
}

fn velocity_rate(v: &Vector3<f64>, r: &nalgebra::Matrix3<f64>, imu: &ImuSample, g: &Vector3<f64>) -> Vector3<f64> {
    imu.accel + r.transpose() * g - imu.gyro.cross(v)
}

/// RK4 step without argument validation; `dt` may be negative.
pub fn rk4_step(nav: &NavState, imu: &ImuSample, dt: f64, gravity: &GravityModel) -> (NavState, NavStages) {
    let g = gravity.vector();
    let w = imu.gyro;
    let q_half = quat_mul(&nav.q, &exp_so3(&(w * (0.5 * dt))));
    let q_end = quat_mul(&nav.q, &exp_so3(&(w * dt)));
    let r0 = quat_to_rotmat(&nav.q);
    let rh = quat_to_rotmat(&q_half);
    let r1 = quat_to_rotmat(&q_end);

    let v1 = nav.v;
    let kv1 = velocity_rate(&v1, &r0, imu, &g);
    let kp1 = r0 * v1;

    let v2 = nav.v + kv1 * (0.5 * dt);
    let kv2 = velocity_rate(&v2, &rh, imu, &g);
    let kp2 = rh * v2;

    let v3 = nav.v + kv2 * (0.5 * dt);
    let kv3 = velocity_rate(&v3, &rh, imu, &g);
    let kp3 = rh * v3;

    let v4 = nav.v + kv3 * dt;
    let kv4 = velocity_rate(&v4, &r1, imu, &g);
    let kp4 = r1 * v4;

    let next = NavState {
        v: nav.v + (kv1 + 2.0 * kv2 + 2.0 * kv3 + kv4) * (dt / 6.0),
        q: q_end,
        p: nav.p + (kp1 + 2.0 * kp2 + 2.0 * kp3 + kp4) * (dt / 6.0),
    };
    (next, NavStages { v: [v1, v2, v3, v4] })
}

pub(crate) fn check_step(dt: f64) -> Result<()> {
    if !(dt > 0.0 && dt <= MAX_STEP) {
        return Err(Error::InvalidTimeStep { dt });
    }
    Ok(())
}

pub(crate) fn check_inputs(nav: &NavState, imu: &ImuSample) -> Result<()> {
    if !nav.v.iter().all(|x| x.is_finite()) {
        return Err(Error::Propagation { field: "velocity" });
    }
    if !nav.q.coords.iter().all(|x| x.is_finite()) {
        return Err(Error::Propagation { field: "attitude" });
    }
    if !nav.p.iter().all(|x| x.is_finite()) {
        return Err(Error::Propagation { field: "position" });
    }
    if !imu.accel.iter().all(|x| x.is_finite()) {
        return Err(Error::Propagation { field: "accel" });
    }
    if !imu.gyro.iter().all(|x| x.is_finite()) {
        return Err(Error::Propagation { field: "gyro" });
    }
    Ok(())
}

/// Propagate the nav state over `dt` seconds holding `imu` constant (RK4).
pub fn propagate_nav(nav: &NavState, imu: &ImuSample, dt: f64, gravity: &GravityModel) -> Result<NavState> {
    check_step(dt)?;
    check_inputs(nav, imu)?;
    Ok(rk4_step(nav, imu, dt, gravity).0)
}

/// Same as [`propagate_nav`] but also returns the stage velocities.
pub fn propagate_nav_with_stages(
    nav: &NavState,
    imu: &ImuSample,
    dt: f64,
    gravity: &GravityModel,
) -> Result<(NavState, NavStages)> {
    check_step(dt)?;
    check_inputs(nav, imu)?;
    Ok(rk4_step(nav, imu, dt, gravity))
}

/// Continuous-time error-state Jacobian, ordered `[δv, δθ, δp]`.
pub fn nav_jacobian(nav: &NavState, imu: &ImuSample, gravity: &GravityModel) -> NavMatrix {
    let r = quat_to_rotmat(&nav.q);
    let g = gravity.vector();
    let mut f = NavMatrix::zeros();
    f.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&imu.gyro)));
    f.fixed_view_mut::<3, 3>(0, 3).copy_from(&(r.transpose() * skew(&g)));
    f.fixed_view_mut::<3, 3>(6, 0).copy_from(&r);
    f.fixed_view_mut::<3, 3>(6, 3).copy_from(&(-skew(&(r * nav.v))));
    f
}

/// Jacobian of the nav error dynamics with respect to IMU noise `[n_a, n_ω]` (9×6).
pub fn nav_noise_jacobian(nav: &NavState) -> SMatrix<f64, NAV_DIM, 6> {
    let r = quat_to_rotmat(&nav.q);
    let mut g = SMatrix::<f64, NAV_DIM, 6>::zeros();
    g.fixed_view_mut::<3, 3>(0, 0).copy_from(&nalgebra::Matrix3::identity());
    g.fixed_view_mut::<3, 3>(0, 3).copy_from(&skew(&nav.v));
    g.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
    g
}
