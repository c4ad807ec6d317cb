//! 4D radar measurement model: doppler, bearing and range of a tracked feature.
//!
//! Residual layout is `[doppler, bearing tangent (2), range]`. The bearing
//! residual is `measured ⊟ predicted` in the tangent plane of the predicted
//! bearing. Predicted doppler projects the radar velocity on the *estimated*
//! bearing, which is what couples doppler to the feature state.
//!
//! Sign convention: the sensor reports a negative doppler when closing in, so
//! the measurement is `y_D = -doppler` and the prediction is `p_fᵀ v_R`.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Matrix3x2, SMatrix, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::{Feature, FieldOfView, RadarExtrinsics, RHO_MIN};
use crate::geometry::{bearing_from_angles, bearing_quat, bearing_residual, nq_projection, skew, Quat};
use crate::motion::NAV_DIM;

pub const MEAS_DIM: usize = 4;
pub type MeasMatrix = SMatrix<f64, MEAS_DIM, MEAS_DIM>;
pub type MeasVector = Vector4<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadarDetection {
    pub azimuth: f64,
    pub elevation: f64,
    pub range: f64,
    /// Raw radial velocity, negative when closing.
    pub doppler: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr: Option<f64>,
}

impl RadarDetection {
    pub fn is_valid(&self) -> bool {
        self.range > 0.0
            && self.elevation.abs() < std::f64::consts::FRAC_PI_2
            && self.azimuth.is_finite()
            && self.doppler.is_finite()
    }
}

/// All detections of one sensor at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct RadarScan {
    pub t: f64,
    /// Index of the sensor in the roster.
    pub sensor: usize,
    pub detections: Vec<RadarDetection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeasurementNoise {
    pub sigma_az: f64,
    pub sigma_el: f64,
    pub sigma_range: f64,
    pub sigma_doppler: f64,
}

impl Default for MeasurementNoise {
    fn default() -> Self {
        Self {
            sigma_az: 0.5f64.to_radians(),
            sigma_el: 0.5f64.to_radians(),
            sigma_range: 0.1,
            sigma_doppler: 0.05,
        }
    }
}

impl MeasurementNoise {
    pub fn validate(&self) -> Result<()> {
        let all = [self.sigma_az, self.sigma_el, self.sigma_range, self.sigma_doppler];
        if all.iter().all(|s| s.is_finite() && *s > 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("measurement noise must be positive: {self:?}")))
        }
    }
}

/// One radar in the roster.
#[derive(Debug, Clone, PartialEq)]
pub struct Sensor {
    pub id: String,
    pub ext: RadarExtrinsics,
    pub fov: FieldOfView,
    pub noise: MeasurementNoise,
}

/// A detection converted to measurement space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    /// `-doppler`, m/s.
    pub doppler: f64,
    pub bearing: Vector3<f64>,
    pub range: f64,
    /// Canonical bearing quaternion of the measured direction.
    pub q: Quat,
    /// Covariance in `[doppler, tangent(q), range]` coordinates.
    pub cov: MeasMatrix,
}

/// Map a raw detection into measurement space.
///
/// The bearing covariance is the first-order image of `diag(σ_az², σ_el²)`
/// under the angle-to-bearing map, written in the tangent basis of the
/// measured bearing.
pub fn detection_to_measurement(d: &RadarDetection, noise: &MeasurementNoise) -> Measurement {
    let u = bearing_from_angles(d.azimuth, d.elevation);
    let q = bearing_quat(&u);
    let (sa, ca) = d.azimuth.sin_cos();
    let (se, ce) = d.elevation.sin_cos();
    let du_daz = Vector3::new(-ce * sa, ce * ca, 0.0);
    let du_del = Vector3::new(-se * ca, -se * sa, ce);
    let to_tangent = nq_projection(&q).transpose() * skew(&u);
    let j = Matrix2::from_columns(&[to_tangent * du_daz, to_tangent * du_del]);
    let angles = Matrix2::from_diagonal(&Vector2::new(noise.sigma_az.powi(2), noise.sigma_el.powi(2)));
    let bearing_cov = j * angles * j.transpose();

    let mut cov = MeasMatrix::zeros();
    cov[(0, 0)] = noise.sigma_doppler.powi(2);
    cov.fixed_view_mut::<2, 2>(1, 1).copy_from(&bearing_cov);
    cov[(3, 3)] = noise.sigma_range.powi(2);
    Measurement {
        doppler: -d.doppler,
        bearing: u,
        range: d.range,
        q,
        cov,
    }
}

/// Predicted measurement of one feature in one sensor, with its Jacobians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictedMeasurement {
    pub doppler: f64,
    pub bearing: Vector3<f64>,
    pub range: f64,
    /// Bearing quaternion whose tangent basis carries the bearing residual.
    pub q: Quat,
    /// With respect to the feature error `[δq_f, δρ]`.
    pub h_f: SMatrix<f64, MEAS_DIM, 3>,
    /// With respect to the nav error `[δv, δθ, δp]`.
    pub h_nav: SMatrix<f64, MEAS_DIM, NAV_DIM>,
    /// Sensitivity of the predicted doppler to the body rate.
    pub d_doppler_d_gyro: nalgebra::RowVector3<f64>,
    /// Doppler variance inherited from a measured bearing, when decoupled.
    pub doppler_bearing_var: f64,
}

impl PredictedMeasurement {
    /// `measured ⊟ predicted`.
    pub fn residual(&self, m: &Measurement) -> Result<MeasVector> {
        let b = bearing_residual(&m.bearing, &self.q)?;
        Ok(MeasVector::new(
            m.doppler - self.doppler,
            b[0],
            b[1],
            m.range - self.range,
        ))
    }

    /// Measurement covariance expressed in this prediction's residual basis.
    ///
    /// `gyro_var` is the variance of the body-rate sample used for `v_R`
    /// (rad²/s² per axis); it enters through the lever-arm term of the doppler.
    pub fn noise(&self, m: &Measurement, gyro_var: f64) -> MeasMatrix {
        let t = nq_projection(&self.q).transpose() * nq_projection(&m.q);
        let mut r = m.cov;
        let b = m.cov.fixed_view::<2, 2>(1, 1).into_owned();
        r.fixed_view_mut::<2, 2>(1, 1).copy_from(&(t * b * t.transpose()));
        r[(0, 0)] += self.d_doppler_d_gyro.norm_squared() * gyro_var + self.doppler_bearing_var;
        r
    }

    /// Replace the doppler prediction with the projection on the measured bearing.
    ///
    /// The doppler row then loses its dependence on the feature state and
    /// picks up the bearing noise of the measurement instead.
    pub fn decouple_doppler(&mut self, m: &Measurement, v_r: &Vector3<f64>, ext: &RadarExtrinsics) {
        self.doppler = m.bearing.dot(v_r);
        self.h_f.row_mut(0).fill(0.0);
        let g = nq_projection(&m.q).transpose() * v_r;
        self.doppler_bearing_var = (g.transpose() * m.cov.fixed_view::<2, 2>(1, 1) * g)[0];
        let row = m.bearing.transpose() * ext.r_rb;
        self.h_nav.fixed_view_mut::<1, 3>(0, 0).copy_from(&row);
        self.d_doppler_d_gyro = -(row * skew(&ext.lever_arm));
    }
}

/// Doppler, bearing and range predicted from the feature's own anchor sensor.
///
/// `v_r` is the anchor radar's velocity; `ext` its extrinsics.
pub fn predict_measurement(f: &Feature, v_r: &Vector3<f64>, ext: &RadarExtrinsics) -> PredictedMeasurement {
    let p = f.bearing();
    let n = nq_projection(&f.q_f);
    let mut h_f = SMatrix::<f64, MEAS_DIM, 3>::zeros();
    h_f.fixed_view_mut::<1, 2>(0, 0)
        .copy_from(&(-(v_r.transpose() * skew(&p) * n)));
    h_f.fixed_view_mut::<2, 2>(1, 0).copy_from(&Matrix2::identity());
    h_f[(3, 2)] = 1.0;
    let row = p.transpose() * ext.r_rb;
    let mut h_nav = SMatrix::<f64, MEAS_DIM, NAV_DIM>::zeros();
    h_nav.fixed_view_mut::<1, 3>(0, 0).copy_from(&row);
    PredictedMeasurement {
        doppler: p.dot(v_r),
        bearing: p,
        range: f.rho,
        q: f.q_f,
        h_f,
        h_nav,
        d_doppler_d_gyro: -(row * skew(&ext.lever_arm)),
        doppler_bearing_var: 0.0,
    }
}

/// Feature position in another radar's frame, and its Jacobian with respect to `[δq_f, δρ]`.
pub fn transform_feature_to_sensor(
    f: &Feature,
    from: &RadarExtrinsics,
    to: &RadarExtrinsics,
) -> Result<(Vector3<f64>, Matrix3<f64>)> {
    let p = f.bearing();
    let n = nq_projection(&f.q_f);
    let mut j = Matrix3::zeros();
    j.fixed_view_mut::<3, 2>(0, 0).copy_from(&(-(skew(&p) * n) * f.rho));
    j.set_column(2, &p);
    if from == to {
        return Ok((p * f.rho, j));
    }
    let m = to.r_rb * from.r_rb.transpose();
    let p2 = m * (p * f.rho) + to.r_rb * (from.lever_arm - to.lever_arm);
    let r = p2.norm();
    if !(r >= RHO_MIN) {
        return Err(Error::DegenerateGeometry(format!(
            "feature {} is {r:.3} m from the target sensor",
            f.id
        )));
    }
    Ok((p2, m * j))
}

/// Radial velocity seen along `p2` by a sensor moving at `v_r2`.
pub fn cross_doppler(p2: &Vector3<f64>, v_r2: &Vector3<f64>) -> f64 {
    p2.dot(v_r2) / p2.norm()
}

/// Predicted measurement of a feature anchored in sensor `from`, observed by sensor `to`.
///
/// Reduces to [`predict_measurement`] bit for bit when `from == to`.
pub fn predict_cross_measurement(
    f: &Feature,
    from: &RadarExtrinsics,
    to: &RadarExtrinsics,
    v_r2: &Vector3<f64>,
) -> Result<PredictedMeasurement> {
    if from == to {
        return Ok(predict_measurement(f, v_r2, to));
    }
    let (p2, j) = transform_feature_to_sensor(f, from, to)?;
    let r = p2.norm();
    let u = p2 / r;
    let q = bearing_quat(&u);
    let n: Matrix3x2<f64> = nq_projection(&q);
    // ∂u/∂p2 on the sphere, then into the tangent coordinates of `q`.
    let du = (Matrix3::identity() - u * u.transpose()) / r;
    let to_tangent: Matrix2x3<f64> = n.transpose() * skew(&u);

    let mut h_f = SMatrix::<f64, MEAS_DIM, 3>::zeros();
    h_f.fixed_view_mut::<1, 3>(0, 0).copy_from(&(v_r2.transpose() * du * j));
    h_f.fixed_view_mut::<2, 3>(1, 0).copy_from(&(to_tangent * du * j));
    h_f.fixed_view_mut::<1, 3>(3, 0).copy_from(&(u.transpose() * j));
    let row = u.transpose() * to.r_rb;
    let mut h_nav = SMatrix::<f64, MEAS_DIM, NAV_DIM>::zeros();
    h_nav.fixed_view_mut::<1, 3>(0, 0).copy_from(&row);
    Ok(PredictedMeasurement {
        doppler: cross_doppler(&p2, v_r2),
        bearing: u,
        range: r,
        q,
        h_f,
        h_nav,
        d_doppler_d_gyro: -(row * skew(&to.lever_arm)),
        doppler_bearing_var: 0.0,
    })
}
