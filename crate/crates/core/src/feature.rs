//! Relative motion of static landmarks seen from a moving radar.
//!
//! A feature is a bearing quaternion `q_f` plus depth `rho`, anchored in the
//! frame of the radar that first detected it. With radar-frame velocity `v_R`
//! and rate `ω_R` the tangent-space dynamics are
//!
//! ```text
//! q_f' = -Nᵀ (ω_R + (1/ρ) [p_f×] v_R)
//! ρ'   = -p_fᵀ v_R
//! ```
//!
//! The bearing rate carries `1/ρ`: it is the only scaling under which the
//! bearing rate agrees with the depth rate and with the Jacobians below (a
//! translation `v` sweeps the line of sight at `|v| / ρ`).
//!
//! Error coordinates per feature are `[δq_f (2, tangent), δρ]`.

use nalgebra::{Matrix3, Matrix3x2, RowVector2, SMatrix, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    bearing, bearing_boxminus, bearing_boxplus, exp_so3, nq_projection, quat_mul, rotation_between, skew, Quat,
};
use crate::motion::{ImuSample, NavState, NAV_DIM};

/// Near-field depth floor, metres.
pub const RHO_MIN: f64 = 0.5;

pub const FEATURE_DIM: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Feature {
    pub id: u64,
    /// Index of the anchor radar in the sensor roster.
    pub anchor: usize,
    pub q_f: Quat,
    pub rho: f64,
    /// Accumulated information score, nats.
    pub score: f64,
    pub hits: u32,
    pub misses: u32,
    pub last_seen: f64,
    /// Set when depth hit [`RHO_MIN`] or an update was rejected.
    pub flagged: bool,
}

impl Feature {
    pub fn new(id: u64, anchor: usize, q_f: Quat, rho: f64, t: f64) -> Self {
        Self {
            id,
            anchor,
            q_f,
            rho: rho.max(RHO_MIN),
            score: 0.0,
            hits: 0,
            misses: 0,
            last_seen: t,
            flagged: false,
        }
    }

    pub fn bearing(&self) -> Vector3<f64> {
        bearing(&self.q_f)
    }

    /// Position in the anchor radar frame.
    pub fn position(&self) -> Vector3<f64> {
        self.bearing() * self.rho
    }

    /// Apply `[δq_f, δρ]`; returns true when depth had to be clamped.
    pub fn apply_correction(&mut self, dx: &Vector3<f64>) -> bool {
        self.q_f = bearing_boxplus(&self.q_f, &Vector2::new(dx[0], dx[1]));
        let rho = self.rho + dx[2];
        if rho < RHO_MIN {
            self.rho = RHO_MIN;
            self.flagged = true;
            true
        } else {
            self.rho = rho;
            false
        }
    }

    /// Error coordinates of `self` relative to `other`.
    pub fn boxminus(&self, other: &Feature) -> Result<Vector3<f64>> {
        let d = bearing_boxminus(&self.q_f, &other.q_f)?;
        Ok(Vector3::new(d[0], d[1], self.rho - other.rho))
    }
}

/// Radar mounting: rotation body→radar and the IMU→radar lever arm in body axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadarExtrinsics {
    pub r_rb: Matrix3<f64>,
    pub lever_arm: Vector3<f64>,
}

impl RadarExtrinsics {
    pub fn identity() -> Self {
        Self {
            r_rb: Matrix3::identity(),
            lever_arm: Vector3::zeros(),
        }
    }

    /// Build from the radar's orientation in the body frame (roll, pitch, yaw; radians,
    /// applied as `Rz(yaw) Ry(pitch) Rx(roll)`) and its position in the body frame.
    pub fn from_mount(roll: f64, pitch: f64, yaw: f64, lever_arm: Vector3<f64>) -> Self {
        let r_br = nalgebra::Rotation3::from_euler_angles(roll, pitch, yaw).into_inner();
        Self {
            r_rb: r_br.transpose(),
            lever_arm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldOfView {
    /// Half-angle in azimuth, radians.
    pub azimuth: f64,
    /// Half-angle in elevation, radians.
    pub elevation: f64,
    pub range_min: f64,
    pub range_max: f64,
}

impl Default for FieldOfView {
    fn default() -> Self {
        Self {
            azimuth: 60f64.to_radians(),
            elevation: 15f64.to_radians(),
            range_min: 0.5,
            range_max: 100.0,
        }
    }
}

impl FieldOfView {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let r = p.norm();
        if !(r >= self.range_min && r <= self.range_max) {
            return false;
        }
        let (az, el) = crate::geometry::angles_from_vector(p);
        az.abs() <= self.azimuth && el.abs() <= self.elevation
    }
}

pub fn radar_velocity(v_b: &Vector3<f64>, omega_b: &Vector3<f64>, ext: &RadarExtrinsics) -> Vector3<f64> {
    ext.r_rb * (v_b + omega_b.cross(&ext.lever_arm))
}

/// Radar-frame velocity and angular rate induced by the vehicle motion.
pub fn radar_frame_motion(nav: &NavState, imu: &ImuSample, ext: &RadarExtrinsics) -> (Vector3<f64>, Vector3<f64>) {
    (radar_velocity(&nav.v, &imu.gyro, ext), ext.r_rb * imu.gyro)
}

/// Tangent-space bearing rate and depth rate.
pub fn feature_rates(f: &Feature, v_r: &Vector3<f64>, omega_r: &Vector3<f64>) -> (Vector2<f64>, f64) {
    let p = f.bearing();
    let n = nq_projection(&f.q_f);
    let bearing_rate = -(n.transpose() * (omega_r + p.cross(v_r) / f.rho));
    (bearing_rate, -p.dot(v_r))
}

fn relative_position_rate(pos: &Vector3<f64>, v_r: &Vector3<f64>, omega_r: &Vector3<f64>) -> Vector3<f64> {
    -v_r - omega_r.cross(pos)
}

/// One RK4 step with stage radar velocities `[t0, t0+dt/2, t0+dt/2, t0+dt]`.
///
/// The step is taken on the landmark's Cartesian position relative to the radar,
/// which carries the same dynamics as the bearing/depth pair; the result is mapped
/// back by rotating `q_f` along the shortest arc onto the new bearing.
/// Returns the propagated feature and whether depth was clamped.
pub fn propagate_feature_stages(
    f: &Feature,
    v_stages: &[Vector3<f64>; 4],
    omega_r: &Vector3<f64>,
    dt: f64,
) -> (Feature, bool) {
    let p0 = f.position();
    let k1 = relative_position_rate(&p0, &v_stages[0], omega_r);
    let k2 = relative_position_rate(&(p0 + k1 * (0.5 * dt)), &v_stages[1], omega_r);
    let k3 = relative_position_rate(&(p0 + k2 * (0.5 * dt)), &v_stages[2], omega_r);
    let k4 = relative_position_rate(&(p0 + k3 * dt), &v_stages[3], omega_r);
    let p1 = p0 + (k1 + 2.0 * k2 + 2.0 * k3 + k4) * (dt / 6.0);

    let mut out = f.clone();
    let depth = p1.norm();
    if depth > 1e-9 {
        if let Ok(phi) = rotation_between(&f.bearing(), &(p1 / depth)) {
            out.q_f = quat_mul(&exp_so3(&phi), &f.q_f);
        }
    }
    let clamped = depth < RHO_MIN;
    if clamped {
        out.rho = RHO_MIN;
        out.flagged = true;
    } else {
        out.rho = depth;
    }
    (out, clamped)
}

/// Propagate a feature over `dt` with constant radar-frame motion.
pub fn propagate_feature(f: &Feature, v_r: &Vector3<f64>, omega_r: &Vector3<f64>, dt: f64) -> Result<(Feature, bool)> {
    if !(dt > 0.0) {
        return Err(Error::InvalidTimeStep { dt });
    }
    if !(f.rho >= RHO_MIN) {
        return Err(Error::InvalidInput(format!(
            "feature {} depth {} below floor",
            f.id, f.rho
        )));
    }
    Ok(propagate_feature_stages(f, &[*v_r; 4], omega_r, dt))
}

/// Partial derivatives of `(q_f', ρ')` with respect to the radar velocity (3×3).
pub fn feature_velocity_jacobian(f: &Feature, _v_r: &Vector3<f64>) -> Matrix3<f64> {
    let p = f.bearing();
    let n = nq_projection(&f.q_f);
    let mut j = Matrix3::zeros();
    j.fixed_view_mut::<2, 3>(0, 0)
        .copy_from(&(-(n.transpose() * skew(&p)) / f.rho));
    j.fixed_view_mut::<1, 3>(2, 0).copy_from(&(-p.transpose()));
    j
}

/// Continuous-time feature Jacobians.
///
/// Returns `F_f` (3×3, with respect to `[δq_f, δρ]`) and `F_nav` (3×9, with
/// respect to `[δv, δθ, δp]`). Only the body velocity reaches the feature
/// dynamics, through `∂v_R/∂v_B = R_rb`.
pub fn feature_jacobians(
    f: &Feature,
    v_r: &Vector3<f64>,
    omega_r: &Vector3<f64>,
    ext: &RadarExtrinsics,
) -> (Matrix3<f64>, SMatrix<f64, 3, NAV_DIM>) {
    let p = f.bearing();
    let n: Matrix3x2<f64> = nq_projection(&f.q_f);
    let nt = n.transpose();
    let rho = f.rho;
    let r = omega_r + p.cross(v_r) / rho;

    let mut ff = Matrix3::zeros();
    let dq_dq = -(nt * skew(&r) * n) - nt * skew(v_r) * skew(&p) * n / rho;
    let dq_drho = nt * p.cross(v_r) / (rho * rho);
    let drho_dq: RowVector2<f64> = v_r.transpose() * skew(&p) * n;
    ff.fixed_view_mut::<2, 2>(0, 0).copy_from(&dq_dq);
    ff.fixed_view_mut::<2, 1>(0, 2).copy_from(&dq_drho);
    ff.fixed_view_mut::<1, 2>(2, 0).copy_from(&drho_dq);

    let mut fnav = SMatrix::<f64, 3, NAV_DIM>::zeros();
    fnav.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(feature_velocity_jacobian(f, v_r) * ext.r_rb));
    (ff, fnav)
}

/// Partial derivatives of `(q_f', ρ')` with respect to the body angular rate (3×3),
/// used to map gyro noise into the feature block.
pub fn feature_gyro_jacobian(f: &Feature, v_r: &Vector3<f64>, ext: &RadarExtrinsics) -> Matrix3<f64> {
    let n = nq_projection(&f.q_f);
    let mut d_omega_r = Matrix3::zeros();
    d_omega_r.fixed_view_mut::<2, 3>(0, 0).copy_from(&(-n.transpose()));
    d_omega_r * ext.r_rb - feature_velocity_jacobian(f, v_r) * ext.r_rb * skew(&ext.lever_arm)
}
