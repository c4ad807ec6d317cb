//! Error-state EKF over the nav state and a list of radar-anchored features.
//!
//! Error layout: `[δv, δθ, δp | δq_f1, δρ1 | δq_f2, δρ2 | ...]`.
//!
//! The transition matrix is block sparse: features couple to the nav block
//! through the body velocity but never to each other, so `Φ P Φᵀ` is formed
//! blockwise without building `Φ` densely.

use nalgebra::{DMatrix, DVector, Dyn, Matrix3, OMatrix, SMatrix, SymmetricEigen, Vector3, U4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::{
    feature_gyro_jacobian, feature_jacobians, propagate_feature_stages, radar_frame_motion, radar_velocity, Feature,
    RadarExtrinsics, FEATURE_DIM,
};
use crate::geometry::quat_to_rotmat;
use crate::motion::{
    check_inputs, check_step, nav_jacobian, nav_noise_jacobian, rk4_step, GravityModel, ImuSample, NavMatrix, NavState,
    NavVector, NAV_DIM,
};
use crate::radar::{MeasMatrix, MeasVector, PredictedMeasurement, MEAS_DIM};

/// An n×4 matrix: `P Hᵀ` or a Kalman gain.
pub type Gain = OMatrix<f64, Dyn, U4>;

/// Updates whose innovation covariance is worse conditioned than this are skipped.
pub const MAX_INNOVATION_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProcessNoiseConfig {
    /// Accelerometer white noise, m/s²/√Hz.
    pub sigma_a: f64,
    /// Gyro white noise, rad/s/√Hz.
    pub sigma_w: f64,
    /// Random walk on feature bearings, rad/√Hz.
    pub sigma_feature_bearing: f64,
    /// Random walk on feature depth, m/√Hz.
    pub sigma_feature_depth: f64,
}

impl Default for ProcessNoiseConfig {
    fn default() -> Self {
        Self {
            sigma_a: 0.05,
            sigma_w: 0.005,
            sigma_feature_bearing: 1e-3,
            sigma_feature_depth: 1e-2,
        }
    }
}

impl ProcessNoiseConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.sigma_a,
            self.sigma_w,
            self.sigma_feature_bearing,
            self.sigma_feature_depth,
        ];
        if all.iter().all(|s| s.is_finite() && *s >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("process noise must be non-negative: {self:?}")))
        }
    }
}

/// Discrete transition of one prediction step, stored by blocks.
#[derive(Debug, Clone)]
pub struct Transition {
    pub nav: NavMatrix,
    /// Per feature: `(Φ_jj, Φ_jB)`.
    pub features: Vec<(Matrix3<f64>, SMatrix<f64, 3, NAV_DIM>)>,
}

impl Transition {
    /// Second-order truncation of `exp(F h)` for the block structure of `F`.
    pub fn from_rates(f_nav: &NavMatrix, f_features: &[(Matrix3<f64>, SMatrix<f64, 3, NAV_DIM>)], h: f64) -> Self {
        let h2 = 0.5 * h * h;
        let nav = NavMatrix::identity() + f_nav * h + f_nav * f_nav * h2;
        let features = f_features
            .iter()
            .map(|(fjj, fjb)| {
                let pjj = Matrix3::identity() + fjj * h + fjj * fjj * h2;
                let pjb = fjb * h + (fjb * f_nav + fjj * fjb) * h2;
                (pjj, pjb)
            })
            .collect();
        Self { nav, features }
    }

    pub fn dim(&self) -> usize {
        NAV_DIM + FEATURE_DIM * self.features.len()
    }

    /// `Φ · M` for a matrix with `dim()` rows.
    pub fn apply_left(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let (n, cols) = m.shape();
        let nf = self.features.len();
        // Rows beyond the modeled blocks are held constant.
        let mut out = m.clone();
        let nav_rows = m.rows(0, NAV_DIM);
        out.rows_mut(0, NAV_DIM).gemm(1.0, &self.nav, &nav_rows, 0.0);
        if nf == 0 {
            return out;
        }
        let coupling = DMatrix::from_fn(FEATURE_DIM * nf, NAV_DIM, |i, j| {
            self.features[i / FEATURE_DIM].1[(i % FEATURE_DIM, j)]
        });
        out.rows_mut(NAV_DIM, FEATURE_DIM * nf)
            .gemm(1.0, &coupling, &nav_rows, 0.0);
        let (src, dst) = (m.as_slice(), out.as_mut_slice());
        for c in 0..cols {
            let base = c * n + NAV_DIM;
            for (j, (pjj, _)) in self.features.iter().enumerate() {
                let r = base + FEATURE_DIM * j;
                let block = pjj * Vector3::from_column_slice(&src[r..r + FEATURE_DIM]);
                for (d, b) in dst[r..r + FEATURE_DIM].iter_mut().zip(block.iter()) {
                    *d += b;
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        self.apply_left(&DMatrix::identity(self.dim(), self.dim()))
    }
}

/// Linear pieces of one prediction step at the current estimate.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub f_nav: NavMatrix,
    pub f_features: Vec<(Matrix3<f64>, SMatrix<f64, 3, NAV_DIM>)>,
    /// Noise input matrix (n×6) for `[n_a, n_ω]`, already scaled by the densities.
    pub noise_input: DMatrix<f64>,
    /// Continuous diagonal feature noise, per state index (zero on the nav block).
    pub feature_noise: DVector<f64>,
}

impl Linearization {
    pub fn dense_rate(&self) -> DMatrix<f64> {
        let n = NAV_DIM + FEATURE_DIM * self.f_features.len();
        let mut f = DMatrix::zeros(n, n);
        f.view_mut((0, 0), (NAV_DIM, NAV_DIM)).copy_from(&self.f_nav);
        for (j, (fjj, fjb)) in self.f_features.iter().enumerate() {
            let r = NAV_DIM + FEATURE_DIM * j;
            f.view_mut((r, r), (3, 3)).copy_from(fjj);
            f.view_mut((r, 0), (3, NAV_DIM)).copy_from(fjb);
        }
        f
    }

    /// Continuous process noise density `Q_c`.
    pub fn dense_noise(&self) -> DMatrix<f64> {
        let l = &self.noise_input;
        let mut q = l * l.transpose();
        for (i, s) in self.feature_noise.iter().enumerate() {
            q[(i, i)] += s;
        }
        q
    }
}

/// Outcome of a single feature update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UpdateOutcome {
    Applied {
        /// Depth was clamped at the floor by the correction.
        clamped: bool,
    },
    /// Innovation covariance too poorly conditioned; nothing changed.
    Rejected,
}

/// Measurement rows of one feature: nav block plus one feature block, and
/// optionally a block on a trailing body-rate error.
#[derive(Debug, Clone, Copy)]
pub struct FeatureRows<'a> {
    pub index: usize,
    pub h_nav: &'a SMatrix<f64, MEAS_DIM, NAV_DIM>,
    pub h_f: &'a SMatrix<f64, MEAS_DIM, 3>,
    /// Offset and Jacobian of the rate block.
    pub h_rate: Option<(usize, SMatrix<f64, MEAS_DIM, 3>)>,
}

impl FeatureRows<'_> {
    fn offset(&self) -> usize {
        NAV_DIM + FEATURE_DIM * self.index
    }

    /// `P Hᵀ` (n×4).
    pub fn p_ht(&self, p: &DMatrix<f64>) -> Gain {
        let nav_cols = p.columns(0, NAV_DIM);
        let feat_cols = p.columns(self.offset(), FEATURE_DIM);
        let mut a = nav_cols * self.h_nav.transpose() + feat_cols * self.h_f.transpose();
        if let Some((o, h)) = &self.h_rate {
            a += p.columns(*o, 3) * h.transpose();
        }
        a
    }

    /// `H A` for an n×4 matrix.
    pub fn apply(&self, a: &Gain) -> MeasMatrix {
        let mut out = self.h_nav * a.rows(0, NAV_DIM) + self.h_f * a.rows(self.offset(), FEATURE_DIM);
        if let Some((o, h)) = &self.h_rate {
            out += h * a.rows(*o, 3);
        }
        out
    }

    /// `H x`.
    pub fn apply_vec(&self, x: &DVector<f64>) -> MeasVector {
        let mut out = self.h_nav * x.rows(0, NAV_DIM) + self.h_f * x.rows(self.offset(), FEATURE_DIM);
        if let Some((o, h)) = &self.h_rate {
            out += h * x.rows(*o, 3);
        }
        out
    }

    pub fn to_dense(&self, n: usize) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(MEAS_DIM, n);
        h.view_mut((0, 0), (MEAS_DIM, NAV_DIM)).copy_from(self.h_nav);
        h.view_mut((0, self.offset()), (MEAS_DIM, 3)).copy_from(self.h_f);
        if let Some((o, m)) = &self.h_rate {
            h.view_mut((0, *o), (MEAS_DIM, 3)).copy_from(m);
        }
        h
    }
}

/// Condition number of a symmetric positive matrix, `inf` if not positive.
fn condition(s: &MeasMatrix) -> f64 {
    let eig = SymmetricEigen::new(*s).eigenvalues;
    let lo = eig.min();
    let hi = eig.max();
    if lo > 0.0 {
        hi / lo
    } else {
        f64::INFINITY
    }
}

fn symmetrize(p: &mut DMatrix<f64>) {
    let n = p.nrows();
    let data = p.as_mut_slice();
    for j in 0..n {
        for i in j + 1..n {
            let m = 0.5 * (data[j * n + i] + data[i * n + j]);
            data[j * n + i] = m;
            data[i * n + j] = m;
        }
    }
}

/// `P ← P + M Kᵀ − K Aᵀ` as one rank-8 product, then symmetrized.
fn joseph_rank4(p: &mut DMatrix<f64>, k: &Gain, a: &Gain, m: &Gain) {
    let n = p.nrows();
    let mut left = DMatrix::zeros(n, 2 * MEAS_DIM);
    left.columns_mut(0, MEAS_DIM).copy_from(m);
    left.columns_mut(MEAS_DIM, MEAS_DIM).copy_from(&(-k));
    let mut right = DMatrix::zeros(2 * MEAS_DIM, n);
    right.rows_mut(0, MEAS_DIM).tr_copy_from(k);
    right.rows_mut(MEAS_DIM, MEAS_DIM).tr_copy_from(a);
    p.gemm(1.0, &left, &right, 1.0);
    symmetrize(p);
}

/// Joseph-form Kalman step on the error state.
///
/// Updates `p` in place and returns the error estimate `K z`, or `None` when
/// the innovation covariance is rejected.
pub fn kalman_step(
    p: &mut DMatrix<f64>,
    rows: &FeatureRows<'_>,
    z: &MeasVector,
    r: &MeasMatrix,
) -> Option<DVector<f64>> {
    let a = rows.p_ht(p);
    let hph = rows.apply(&a);
    let s: MeasMatrix = MeasMatrix::from_fn(|i, j| 0.5 * (hph[(i, j)] + hph[(j, i)])) + r;
    if !(condition(&s) <= MAX_INNOVATION_CONDITION) {
        return None;
    }
    let s_inv = s.cholesky()?.inverse();
    let k: Gain = &a * s_inv;
    let dx = &k * z;
    // (I − KH) P (I − KH)ᵀ + K R Kᵀ  =  P − K Aᵀ + (K S − A) Kᵀ
    let m: Gain = &k * s - &a;
    joseph_rank4(p, &k, &a, &m);
    Some(dx)
}

/// Joint nav/feature filter state.
#[derive(Debug, Clone)]
pub struct FilterState {
    pub t: f64,
    pub nav: NavState,
    pub features: Vec<Feature>,
    pub p: DMatrix<f64>,
    pub capacity: usize,
    /// Offset of a temporary body-rate error block appended to `p`, see
    /// [`FilterState::begin_shared_rate`].
    rate_block: Option<usize>,
}

impl FilterState {
    pub fn new(t: f64, nav: NavState, p_nav: NavMatrix, capacity: usize) -> Self {
        Self {
            t,
            nav,
            features: Vec::with_capacity(capacity),
            p: DMatrix::from_column_slice(NAV_DIM, NAV_DIM, p_nav.as_slice()),
            capacity,
            rate_block: None,
        }
    }

    pub fn dim(&self) -> usize {
        NAV_DIM + FEATURE_DIM * self.features.len()
    }

    pub fn feature_offset(index: usize) -> usize {
        NAV_DIM + FEATURE_DIM * index
    }

    pub fn nav_covariance(&self) -> NavMatrix {
        NavMatrix::from_fn(|i, j| self.p[(i, j)])
    }

    pub fn feature_covariance(&self, index: usize) -> Matrix3<f64> {
        let o = Self::feature_offset(index);
        Matrix3::from_fn(|i, j| self.p[(o + i, o + j)])
    }

    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.features.iter().position(|f| f.id == id)
    }

    /// Continuous-time linearization at the current estimate.
    pub fn linearize(
        &self,
        imu: &ImuSample,
        gravity: &GravityModel,
        noise: &ProcessNoiseConfig,
        sensors: &[RadarExtrinsics],
    ) -> Result<Linearization> {
        let n = self.dim();
        let f_nav = nav_jacobian(&self.nav, imu, gravity);
        let g = nav_noise_jacobian(&self.nav);
        let mut noise_input = DMatrix::zeros(n, 6);
        for i in 0..NAV_DIM {
            for c in 0..3 {
                noise_input[(i, c)] = g[(i, c)] * noise.sigma_a;
                noise_input[(i, c + 3)] = g[(i, c + 3)] * noise.sigma_w;
            }
        }
        let mut feature_noise = DVector::zeros(n);
        let mut f_features = Vec::with_capacity(self.features.len());
        for (j, f) in self.features.iter().enumerate() {
            let ext = sensor(sensors, f.anchor)?;
            let (v_r, w_r) = radar_frame_motion(&self.nav, imu, ext);
            f_features.push(feature_jacobians(f, &v_r, &w_r, ext));
            let o = Self::feature_offset(j);
            let jg = feature_gyro_jacobian(f, &v_r, ext) * noise.sigma_w;
            noise_input.view_mut((o, 3), (3, 3)).copy_from(&jg);
            feature_noise[o] = noise.sigma_feature_bearing.powi(2);
            feature_noise[o + 1] = noise.sigma_feature_bearing.powi(2);
            feature_noise[o + 2] = noise.sigma_feature_depth.powi(2);
        }
        Ok(Linearization {
            f_nav,
            f_features,
            noise_input,
            feature_noise,
        })
    }

    /// Propagate mean and covariance over `dt` with the IMU sample held constant.
    pub fn predict(
        &mut self,
        imu: &ImuSample,
        dt: f64,
        gravity: &GravityModel,
        noise: &ProcessNoiseConfig,
        sensors: &[RadarExtrinsics],
    ) -> Result<()> {
        check_step(dt)?;
        check_inputs(&self.nav, imu)?;
        let lin = self.linearize(imu, gravity, noise, sensors)?;
        let phi = Transition::from_rates(&lin.f_nav, &lin.f_features, dt);

        // Φ P Φᵀ = Φ (Φ P)ᵀ for symmetric P.
        let phi_p = phi.apply_left(&self.p);
        let mut p = phi.apply_left(&phi_p.transpose());
        // Trapezoidal Q_k = ½ dt (Φ L Lᵀ Φᵀ + L Lᵀ) plus the diagonal feature walk.
        let l = &lin.noise_input;
        let phi_l = phi.apply_left(l);
        p.gemm(0.5 * dt, &phi_l, &phi_l.transpose(), 1.0);
        p.gemm(0.5 * dt, l, &l.transpose(), 1.0);
        for (i, s) in lin.feature_noise.iter().enumerate() {
            p[(i, i)] += s * dt;
        }
        symmetrize(&mut p);

        let (nav, stages) = rk4_step(&self.nav, imu, dt, gravity);
        for f in self.features.iter_mut() {
            let ext = &sensors[f.anchor];
            let v_stages = stages.v.map(|v| radar_velocity(&v, &imu.gyro, ext));
            let w_r = ext.r_rb * imu.gyro;
            *f = propagate_feature_stages(f, &v_stages, &w_r, dt).0;
        }
        self.nav = nav;
        self.p = p;
        self.t += dt;
        self.quick_health()
    }

    /// Update with one feature's measurement.
    ///
    /// `pred` must have been computed from the current estimate; `z` is the
    /// residual `measured ⊟ predicted` and `r` its covariance.
    pub fn update_feature(
        &mut self,
        index: usize,
        pred: &PredictedMeasurement,
        z: &MeasVector,
        r: &MeasMatrix,
    ) -> Result<UpdateOutcome> {
        if index >= self.features.len() {
            return Err(Error::InvalidInput(format!("feature index {index} out of range")));
        }
        let rows = FeatureRows {
            index,
            h_nav: &pred.h_nav,
            h_f: &pred.h_f,
            h_rate: self.rate_block.map(|o| {
                let mut h = SMatrix::<f64, MEAS_DIM, 3>::zeros();
                h.row_mut(0).copy_from(&pred.d_doppler_d_gyro);
                (o, h)
            }),
        };
        let Some(dx) = kalman_step(&mut self.p, &rows, z, r) else {
            self.features[index].flagged = true;
            return Ok(UpdateOutcome::Rejected);
        };
        let clamped = self.inject(&dx)[index];
        self.quick_health()?;
        Ok(UpdateOutcome::Applied { clamped })
    }

    /// Retract an error-state correction into the estimate. Returns per-feature clamp flags.
    pub fn inject(&mut self, dx: &DVector<f64>) -> Vec<bool> {
        let dnav = NavVector::from_fn(|i, _| dx[i]);
        self.nav = self.nav.boxplus(&dnav);
        self.features
            .iter_mut()
            .enumerate()
            .map(|(j, f)| {
                let o = Self::feature_offset(j);
                f.apply_correction(&Vector3::new(dx[o], dx[o + 1], dx[o + 2]))
            })
            .collect()
    }

    /// Append an error block for the body-rate sample shared by every
    /// detection of one scan, with variance `var` per axis.
    ///
    /// While it is present, [`FilterState::update_feature`] carries the doppler
    /// sensitivity to the rate in the Jacobian, so the measurement noise passed
    /// in must leave the rate term out. Errors in that sample are then
    /// correlated across the scan instead of counted once per detection.
    pub fn begin_shared_rate(&mut self, var: f64) {
        if self.rate_block.is_some() {
            return;
        }
        let n = self.p.nrows();
        let p = std::mem::replace(&mut self.p, DMatrix::zeros(0, 0));
        let mut p = p.resize(n + 3, n + 3, 0.0);
        p.view_mut((n, n), (3, 3)).fill_diagonal(var);
        self.p = p;
        self.rate_block = Some(n);
    }

    /// Marginalize the block added by [`FilterState::begin_shared_rate`].
    pub fn end_shared_rate(&mut self) {
        if let Some(o) = self.rate_block.take() {
            let p = std::mem::replace(&mut self.p, DMatrix::zeros(0, 0));
            self.p = p.remove_rows(o, 3).remove_columns(o, 3);
        }
    }

    pub fn has_shared_rate(&self) -> bool {
        self.rate_block.is_some()
    }

    /// Append a feature with zero cross-covariance.
    pub fn insert_feature(&mut self, f: Feature, init_cov: &Matrix3<f64>) -> Result<()> {
        if self.rate_block.is_some() {
            return Err(Error::InvalidInput(
                "cannot resize the state during a shared-rate update".into(),
            ));
        }
        if self.features.len() >= self.capacity {
            return Err(Error::CapacityExceeded(self.capacity));
        }
        let n = self.dim();
        let p = std::mem::replace(&mut self.p, DMatrix::zeros(0, 0));
        let mut p = p.resize(n + FEATURE_DIM, n + FEATURE_DIM, 0.0);
        p.view_mut((n, n), (3, 3)).copy_from(init_cov);
        self.p = p;
        self.features.push(f);
        Ok(())
    }

    /// Drop a feature and its covariance rows and columns.
    pub fn remove_feature(&mut self, id: u64) -> Result<Feature> {
        if self.rate_block.is_some() {
            return Err(Error::InvalidInput(
                "cannot resize the state during a shared-rate update".into(),
            ));
        }
        let j = self.index_of(id).ok_or(Error::UnknownFeature(id))?;
        let o = Self::feature_offset(j);
        let p = std::mem::replace(&mut self.p, DMatrix::zeros(0, 0));
        self.p = p.remove_rows(o, FEATURE_DIM).remove_columns(o, FEATURE_DIM);
        Ok(self.features.remove(j))
    }

    /// Finite diagonal, nonnegative variances, finite mean.
    pub fn quick_health(&self) -> Result<()> {
        if !self.nav.is_finite() {
            return Err(Error::NumericalHealth {
                t: self.t,
                reason: "non-finite nav state".into(),
            });
        }
        for i in 0..self.p.nrows() {
            let d = self.p[(i, i)];
            if !(d.is_finite() && d >= 0.0) {
                return Err(Error::NumericalHealth {
                    t: self.t,
                    reason: format!("variance {d} at index {i}"),
                });
            }
        }
        Ok(())
    }

    /// Symmetry within 1e-9 and a Cholesky factorization with at most 1e-12 jitter.
    pub fn full_health(&self) -> Result<()> {
        self.quick_health()?;
        let asym = (&self.p - self.p.transpose()).amax();
        if asym > 1e-9 {
            return Err(Error::NumericalHealth {
                t: self.t,
                reason: format!("covariance asymmetry {asym:e}"),
            });
        }
        let n = self.p.nrows();
        let jittered = &self.p + DMatrix::<f64>::identity(n, n) * 1e-12;
        if jittered.cholesky().is_none() {
            return Err(Error::NumericalHealth {
                t: self.t,
                reason: "covariance not positive semidefinite".into(),
            });
        }
        Ok(())
    }
}

fn sensor(sensors: &[RadarExtrinsics], index: usize) -> Result<&RadarExtrinsics> {
    sensors
        .get(index)
        .ok_or_else(|| Error::UnknownSensor(format!("#{index}")))
}

/// Position (world) and attitude sigmas are handy for output; this gives the
/// nav block diagonal square-rooted.
pub fn nav_sigmas(state: &FilterState) -> [f64; NAV_DIM] {
    std::array::from_fn(|i| state.p[(i, i)].max(0.0).sqrt())
}

/// World-frame velocity of the current estimate.
pub fn world_velocity(nav: &NavState) -> Vector3<f64> {
    quat_to_rotmat(&nav.q) * nav.v
}

/// Stacked measurement for the dense batch reference.
#[doc(hidden)]
pub fn dense_joseph_update(
    p: &DMatrix<f64>,
    h: &DMatrix<f64>,
    z: &DVector<f64>,
    r: &DMatrix<f64>,
) -> Option<(DMatrix<f64>, DVector<f64>)> {
    let s = h * p * h.transpose() + r;
    let k = p * h.transpose() * s.cholesky()?.inverse();
    let i_kh = DMatrix::identity(p.nrows(), p.ncols()) - &k * h;
    let post = &i_kh * p * i_kh.transpose() + &k * r * k.transpose();
    Some((post, k * z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::bearing_quat;
    use crate::radar::predict_measurement;
    use crate::testutil::{rel_frobenius, TestRng};
    use nalgebra::Vector4;

    fn zero_noise() -> ProcessNoiseConfig {
        ProcessNoiseConfig {
            sigma_a: 0.0,
            sigma_w: 0.0,
            sigma_feature_bearing: 0.0,
            sigma_feature_depth: 0.0,
        }
    }

    fn random_spd(rng: &mut TestRng, n: usize, scale: f64) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.uniform(-1.0, 1.0));
        (&a * a.transpose()) * scale / n as f64 + DMatrix::identity(n, n) * (0.01 * scale)
    }

    fn random_state(rng: &mut TestRng, m: usize) -> (FilterState, Vec<RadarExtrinsics>) {
        let sensors = vec![
            RadarExtrinsics::from_mount(0.0, 0.0, 0.8, Vector3::new(3.5, 0.8, 0.5)),
            RadarExtrinsics::from_mount(0.0, 0.0, -0.8, Vector3::new(3.5, -0.8, 0.5)),
        ];
        let nav = NavState {
            v: rng.vec3(3.0),
            q: rng.quat(),
            p: rng.vec3(10.0),
        };
        let mut s = FilterState::new(0.0, nav, NavMatrix::identity(), 50);
        for j in 0..m {
            let pos = Vector3::new(rng.uniform(3.0, 30.0), rng.uniform(-10.0, 10.0), rng.uniform(-1.0, 1.0));
            let f = Feature::new(j as u64, j % 2, bearing_quat(&pos), pos.norm(), 0.0);
            s.insert_feature(f, &Matrix3::identity()).unwrap();
        }
        let n = s.dim();
        s.p = random_spd(rng, n, 0.1);
        (s, sensors)
    }

    fn still_imu() -> ImuSample {
        ImuSample::new(0.0, Vector3::new(0.0, 0.0, 9.81), Vector3::zeros())
    }

    #[test]
    fn zero_rates_give_identity_transition() {
        let mut rng = TestRng::new(30);
        let zero = (Matrix3::zeros(), SMatrix::<f64, 3, NAV_DIM>::zeros());
        let phi = Transition::from_rates(&NavMatrix::zeros(), &[zero, zero], 0.01);
        assert_eq!(phi.to_dense(), DMatrix::identity(15, 15));
        let p = random_spd(&mut rng, 15, 1.0);
        assert_eq!(phi.apply_left(&phi.apply_left(&p).transpose()), p);
    }

    #[test]
    fn pure_noise_prediction_adds_q() {
        // At rest with zero gravity only ∂ṗ/∂v survives; with P = 0 the result is Q_k itself.
        let mut s = FilterState::new(0.0, NavState::default(), NavMatrix::zeros(), 10);
        let imu = ImuSample::new(0.0, Vector3::zeros(), Vector3::zeros());
        let g = GravityModel { g_world: [0.0; 3] };
        let noise = ProcessNoiseConfig::default();
        let dt = 0.01;
        s.predict(&imu, dt, &g, &noise, &[]).unwrap();
        let qa = noise.sigma_a.powi(2);
        let qw = noise.sigma_w.powi(2);
        // Trapezoid: ½dt (Φ L Lᵀ Φᵀ + L Lᵀ) with Φ_pv = dt.
        let expected = [
            qa * dt,
            qa * dt,
            qa * dt,
            qw * dt,
            qw * dt,
            qw * dt,
            0.5 * qa * dt.powi(3),
            0.5 * qa * dt.powi(3),
            0.5 * qa * dt.powi(3),
        ];
        for (i, e) in expected.iter().enumerate() {
            assert!((s.p[(i, i)] - e).abs() < 1e-18, "{i}: {}", s.p[(i, i)]);
        }
        assert!((s.p[(0, 6)] - 0.5 * qa * dt * dt).abs() < 1e-18);
    }

    #[test]
    fn scalar_random_walk_closed_form() {
        // Accelerometer noise alone on a zero-rate, zero-gravity system drives
        // δv as a random walk: P_vv(n) = P0 + n σ² dt exactly.
        let mut s = FilterState::new(0.0, NavState::default(), NavMatrix::identity() * 0.2, 1);
        let imu = ImuSample::new(0.0, Vector3::zeros(), Vector3::zeros());
        let g = GravityModel { g_world: [0.0; 3] };
        let noise = ProcessNoiseConfig {
            sigma_a: 0.3,
            ..zero_noise()
        };
        let dt = 0.01;
        for _ in 0..100 {
            s.predict(&imu, dt, &g, &noise, &[]).unwrap();
        }
        assert!((s.p[(0, 0)] - (0.2 + 100.0 * 0.09 * dt)).abs() < 1e-12);
    }

    #[test]
    fn riccati_oracle() {
        // Sub-step the continuous Riccati equation along a fine mean trajectory.
        let mut rng = TestRng::new(31);
        let (mut s, sensors) = random_state(&mut rng, 3);
        s.nav.q = crate::geometry::exp_so3(&Vector3::new(0.05, -0.03, 0.4));
        s.nav.v = Vector3::new(2.0, 0.1, 0.0);
        let gravity = GravityModel::default();
        let noise = ProcessNoiseConfig::default();
        let imu = ImuSample::new(0.0, Vector3::new(0.3, 0.2, 9.7), Vector3::new(0.01, -0.02, 0.15));
        let mut fine = s.clone();
        let dt = 1e-3;
        for _ in 0..1000 {
            s.predict(&imu, dt, &gravity, &noise, &sensors).unwrap();
        }
        let h = 1e-5;
        let mut p = fine.p.clone();
        for _ in 0..100_000 {
            let lin = fine.linearize(&imu, &gravity, &noise, &sensors).unwrap();
            let f = lin.dense_rate();
            let qc = lin.dense_noise();
            // RK2 on Ṗ = F P + P Fᵀ + Q_c with F frozen over the sub-step.
            let rate = |p: &DMatrix<f64>| &f * p + p * f.transpose() + &qc;
            let k1 = rate(&p);
            let k2 = rate(&(&p + &k1 * h));
            p += (k1 + k2) * (0.5 * h);
            let mut next = fine.clone();
            next.p = DMatrix::identity(fine.dim(), fine.dim());
            next.predict(&imu, h, &gravity, &zero_noise(), &sensors).unwrap();
            fine.nav = next.nav;
            fine.features = next.features;
        }
        let err = rel_frobenius(&s.p, &p);
        assert!(err <= 1e-3, "Riccati mismatch {err}");
    }

    #[test]
    fn scalar_update_closed_form() {
        let mut p = DMatrix::from_element(1, 1, 2.0);
        let r = 0.5;
        let k = 2.0 / (2.0 + r);
        let post = 2.0 * r / (2.0 + r);
        // One-dimensional Joseph form through the dense reference.
        let (pp, dx) = dense_joseph_update(
            &p,
            &DMatrix::from_element(1, 1, 1.0),
            &DVector::from_element(1, 1.0),
            &DMatrix::from_element(1, 1, r),
        )
        .unwrap();
        assert!((pp[(0, 0)] - post).abs() < 1e-15);
        assert!((dx[0] - k).abs() < 1e-15);
        p[(0, 0)] = post;
        assert_eq!(p, pp);
    }

    fn sample_update(
        rng: &mut TestRng,
        s: &FilterState,
        j: usize,
        sensors: &[RadarExtrinsics],
    ) -> (PredictedMeasurement, MeasVector, MeasMatrix) {
        let f = &s.features[j];
        let ext = &sensors[f.anchor];
        let v_r = radar_velocity(&s.nav.v, &Vector3::new(0.0, 0.0, 0.1), ext);
        let pred = predict_measurement(f, &v_r, ext);
        let z = MeasVector::new(
            rng.uniform(-0.1, 0.1),
            rng.uniform(-0.01, 0.01),
            rng.uniform(-0.01, 0.01),
            rng.uniform(-0.2, 0.2),
        );
        let r = MeasMatrix::from_diagonal(&Vector4::new(0.05f64.powi(2), 1e-4, 1e-4, 0.01));
        (pred, z, r)
    }

    #[test]
    fn zero_residual_shrinks_trace_without_moving_mean() {
        let mut rng = TestRng::new(32);
        let (mut s, sensors) = random_state(&mut rng, 4);
        let (pred, _, r) = sample_update(&mut rng, &s, 2, &sensors);
        let before = s.clone();
        let out = s.update_feature(2, &pred, &MeasVector::zeros(), &r).unwrap();
        assert_eq!(out, UpdateOutcome::Applied { clamped: false });
        assert_eq!(s.nav, before.nav);
        assert_eq!(s.features, before.features);
        assert!(s.p.trace() < before.p.trace());
    }

    #[test]
    fn sequential_equals_batch() {
        let mut rng = TestRng::new(33);
        for _ in 0..100 {
            let m = 1 + rng.index(6);
            let (s, sensors) = random_state(&mut rng, m);
            let n = s.dim();
            let k = 1 + rng.index(m);
            let updates: Vec<_> = (0..k).map(|j| sample_update(&mut rng, &s, j, &sensors)).collect();

            let mut p_seq = s.p.clone();
            let mut dx = DVector::zeros(n);
            for (j, (pred, z, r)) in updates.iter().enumerate() {
                let rows = FeatureRows {
                    index: j,
                    h_nav: &pred.h_nav,
                    h_f: &pred.h_f,
                    h_rate: None,
                };
                let z_adj = z - rows.apply_vec(&dx);
                dx += kalman_step(&mut p_seq, &rows, &z_adj, r).unwrap();
            }

            let mut h = DMatrix::zeros(4 * k, n);
            let mut z = DVector::zeros(4 * k);
            let mut r = DMatrix::zeros(4 * k, 4 * k);
            for (j, (pred, zj, rj)) in updates.iter().enumerate() {
                let rows = FeatureRows {
                    index: j,
                    h_nav: &pred.h_nav,
                    h_f: &pred.h_f,
                    h_rate: None,
                };
                h.rows_mut(4 * j, 4).copy_from(&rows.to_dense(n));
                z.rows_mut(4 * j, 4).copy_from(zj);
                r.view_mut((4 * j, 4 * j), (4, 4)).copy_from(rj);
            }
            let (p_batch, dx_batch) = dense_joseph_update(&s.p, &h, &z, &r).unwrap();
            assert!((&p_seq - &p_batch).amax() <= 1e-9);
            assert!((&dx - &dx_batch).amax() <= 1e-9);
        }
    }

    #[test]
    fn ill_conditioned_innovation_is_rejected() {
        let mut rng = TestRng::new(34);
        let (mut s, sensors) = random_state(&mut rng, 2);
        let (pred, z, _) = sample_update(&mut rng, &s, 0, &sensors);
        s.p.fill(0.0);
        let r = MeasMatrix::from_diagonal(&Vector4::new(1.0, 1.0, 1.0, 1e-14));
        let before = s.clone();
        assert_eq!(s.update_feature(0, &pred, &z, &r).unwrap(), UpdateOutcome::Rejected);
        assert_eq!(s.nav, before.nav);
        assert!(s.features[0].flagged);
    }

    #[test]
    fn insert_into_empty_and_remove_restores() {
        let p_nav = NavMatrix::from_fn(|i, j| if i == j { 1.0 + i as f64 } else { 0.01 });
        let mut s = FilterState::new(0.0, NavState::default(), p_nav, 5);
        let init = Matrix3::from_diagonal(&Vector3::new(1e-4, 2e-4, 0.01));
        let f = Feature::new(9, 0, bearing_quat(&Vector3::new(1.0, 1.0, 0.0)), 5.0, 0.0);
        s.insert_feature(f, &init).unwrap();
        let mut expected = DMatrix::zeros(12, 12);
        expected.view_mut((0, 0), (9, 9)).copy_from(&p_nav);
        expected.view_mut((9, 9), (3, 3)).copy_from(&init);
        assert_eq!(s.p, expected);

        let mut rng = TestRng::new(35);
        let (mut s, _) = random_state(&mut rng, 3);
        let before = s.p.clone();
        let f = Feature::new(99, 0, bearing_quat(&Vector3::new(1.0, 0.0, 0.0)), 5.0, 0.0);
        s.insert_feature(f, &init).unwrap();
        s.remove_feature(99).unwrap();
        assert_eq!(s.p, before);
    }

    #[test]
    fn remove_middle_feature_matches_dense_rebuild() {
        let mut rng = TestRng::new(36);
        let (mut s, _) = random_state(&mut rng, 3);
        let before = s.p.clone();
        s.remove_feature(1).unwrap();
        let keep: Vec<usize> = (0..before.nrows()).filter(|i| !(12..15).contains(i)).collect();
        let rebuilt = DMatrix::from_fn(keep.len(), keep.len(), |i, j| before[(keep[i], keep[j])]);
        assert_eq!(s.p, rebuilt);
        assert_eq!(s.features.iter().map(|f| f.id).collect::<Vec<_>>(), vec![0, 2]);
    }

    #[test]
    fn capacity_and_unknown_id() {
        let mut s = FilterState::new(0.0, NavState::default(), NavMatrix::identity(), 1);
        let f = Feature::new(1, 0, bearing_quat(&Vector3::x()), 5.0, 0.0);
        s.insert_feature(f.clone(), &Matrix3::identity()).unwrap();
        assert!(matches!(
            s.insert_feature(f, &Matrix3::identity()),
            Err(Error::CapacityExceeded(1))
        ));
        assert!(matches!(s.remove_feature(7), Err(Error::UnknownFeature(7))));
    }

    #[test]
    fn dead_reckoning_position_variance_grows() {
        let mut s = FilterState::new(0.0, NavState::default(), NavMatrix::identity() * 1e-4, 0);
        let noise = ProcessNoiseConfig::default();
        let mut last = [0.0; 3];
        for _ in 0..500 {
            s.predict(&still_imu(), 0.01, &GravityModel::default(), &noise, &[])
                .unwrap();
            for (k, l) in last.iter_mut().enumerate() {
                let v = s.p[(6 + k, 6 + k)];
                assert!(v > *l);
                *l = v;
            }
        }
    }

    #[test]
    fn covariance_stays_healthy_under_fuzz() {
        let mut rng = TestRng::new(37);
        let (mut s, sensors) = random_state(&mut rng, 4);
        let noise = ProcessNoiseConfig::default();
        let gravity = GravityModel::default();
        for step in 0..100_000 {
            let imu = ImuSample::new(0.0, rng.vec3(1.0) + Vector3::new(0.0, 0.0, 9.81), rng.vec3(0.3));
            s.nav.v = s.nav.v.map(|x| x.clamp(-5.0, 5.0));
            s.predict(&imu, 0.01, &gravity, &noise, &sensors).unwrap();
            if step % 7 == 0 {
                let j = rng.index(s.features.len());
                let (pred, z, r) = sample_update(&mut rng, &s, j, &sensors);
                let trace = s.p.trace();
                s.update_feature(j, &pred, &z, &r).unwrap();
                assert!(s.p.trace() <= trace + 1e-12);
            }
            if step % 1000 == 0 {
                s.full_health().unwrap();
                // Keep features in a sane range so the fuzz exercises numerics, not geometry.
                for (j, f) in s.features.iter_mut().enumerate() {
                    if f.rho < 2.0 || f.rho > 60.0 {
                        *f = Feature::new(f.id, j % 2, bearing_quat(&Vector3::new(10.0, 1.0, 0.0)), 10.0, 0.0);
                    }
                }
            }
        }
        s.full_health().unwrap();
    }
}
