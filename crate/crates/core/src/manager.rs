//! Feature lifecycle: stationarity gating, association, information scores,
//! pruning and selection of new features.
//!
//! Scores are in nats of nav-block entropy. A feature earns the entropy drop of
//! each update it takes part in; every prediction charges the entropy growth
//! to all live features in equal parts.

use std::f64::consts::{E, PI};

use nalgebra::{DMatrix, Matrix3, SMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::ekf::{FilterState, UpdateOutcome};
use crate::error::{Error, Result};
use crate::feature::{radar_velocity, Feature};
use crate::geometry::skew;
use crate::motion::{ImuSample, NavMatrix, NAV_DIM};
use crate::radar::{
    detection_to_measurement, predict_cross_measurement, predict_measurement, MeasMatrix, Measurement,
    PredictedMeasurement, RadarScan, Sensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatingConfig {
    /// Mahalanobis² acceptance threshold (4 dof).
    pub chi2_gate: f64,
    /// Stationarity gate half-width in predicted-doppler sigmas.
    pub doppler_stationarity_sigma: f64,
    /// Seconds between prune/select rounds.
    pub prune_interval: f64,
    pub min_features: usize,
    /// Seconds without a match before a feature may be pruned.
    pub stale_window: f64,
    /// Unmatched detections closer than this (Mahalanobis²) to a tracked
    /// feature are not used as new-feature candidates.
    pub candidate_exclusion_gate: f64,
}

impl Default for GatingConfig {
    fn default() -> Self {
        Self {
            chi2_gate: 9.488,
            doppler_stationarity_sigma: 3.0,
            prune_interval: 0.5,
            min_features: 10,
            stale_window: 2.0,
            candidate_exclusion_gate: 18.467,
        }
    }
}

impl GatingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.chi2_gate > 0.0) || !(self.doppler_stationarity_sigma > 0.0) {
            return Err(Error::Config("gates must be positive".into()));
        }
        if !(self.prune_interval > 0.0) || !(self.stale_window >= 0.0) {
            return Err(Error::Config("prune interval and stale window must be positive".into()));
        }
        Ok(())
    }
}

/// Model switches used by the ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchOptions {
    pub doppler_coupling: bool,
    pub cross_matching: bool,
}

impl Default for MatchOptions {
    fn default() -> Self {
        Self {
            doppler_coupling: true,
            cross_matching: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub feature: u64,
    pub detection: usize,
    pub d2: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AssociationResult {
    /// In ascending `d2`.
    pub matches: Vec<Match>,
    pub unmatched_detections: Vec<usize>,
    pub unmatched_features: Vec<u64>,
}

/// `0.5 ln((2πe)^n |P|)`, nats.
pub fn info_entropy(p: &DMatrix<f64>) -> Result<f64> {
    let n = p.nrows();
    let chol = p.clone().cholesky().ok_or_else(|| Error::NumericalHealth {
        t: f64::NAN,
        reason: "entropy of a non positive definite covariance".into(),
    })?;
    let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    Ok(0.5 * (n as f64 * (2.0 * PI * E).ln() + log_det))
}

fn nav_entropy_of(p: &NavMatrix) -> Result<f64> {
    let chol = p.cholesky().ok_or_else(|| Error::NumericalHealth {
        t: f64::NAN,
        reason: "nav covariance not positive definite".into(),
    })?;
    let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    Ok(0.5 * (NAV_DIM as f64 * (2.0 * PI * E).ln() + log_det))
}

/// Entropy of the nav error block.
pub fn nav_entropy(state: &FilterState) -> Result<f64> {
    nav_entropy_of(&state.nav_covariance()).map_err(|e| match e {
        Error::NumericalHealth { reason, .. } => Error::NumericalHealth { t: state.t, reason },
        other => other,
    })
}

/// Charge a prediction's entropy growth to all live features.
pub fn score_prediction(state: &mut FilterState, entropy_before: f64, entropy_after: f64) {
    let m = state.features.len();
    if m == 0 {
        return;
    }
    let share = (entropy_after - entropy_before) / m as f64;
    for f in state.features.iter_mut() {
        f.score -= share;
    }
}

/// `H P Hᵀ` from the 12×12 nav/feature sub-block.
pub fn projected_covariance(state: &FilterState, index: usize, pred: &PredictedMeasurement) -> MeasMatrix {
    let o = FilterState::feature_offset(index);
    let idx = |i: usize| if i < NAV_DIM { i } else { o + i - NAV_DIM };
    let sub = SMatrix::<f64, 12, 12>::from_fn(|i, j| state.p[(idx(i), idx(j))]);
    let mut h = SMatrix::<f64, 4, 12>::zeros();
    h.fixed_view_mut::<4, 9>(0, 0).copy_from(&pred.h_nav);
    h.fixed_view_mut::<4, 3>(0, 9).copy_from(&pred.h_f);
    h * sub * h.transpose()
}

/// Scan-time context shared by the lifecycle steps.
#[derive(Debug, Clone, Copy)]
pub struct ScanContext<'a> {
    pub sensors: &'a [Sensor],
    /// Most recent IMU sample (its rate enters the radar velocity).
    pub imu: &'a ImuSample,
    /// Variance of one gyro sample, (rad/s)².
    pub gyro_var: f64,
    pub options: MatchOptions,
}

impl ScanContext<'_> {
    fn radar_velocity(&self, state: &FilterState, sensor: usize) -> Vector3<f64> {
        radar_velocity(&state.nav.v, &self.imu.gyro, &self.sensors[sensor].ext)
    }

    /// Predicted measurement of feature `index` in `sensor`, or `None` when the
    /// feature cannot be seen there (outside the FOV, too close, or anchored
    /// elsewhere with cross-matching off).
    pub fn predict(&self, state: &FilterState, index: usize, sensor: usize) -> Option<PredictedMeasurement> {
        let f = &state.features[index];
        let target = &self.sensors[sensor];
        let v_r = self.radar_velocity(state, sensor);
        let pred = if f.anchor == sensor {
            predict_measurement(f, &v_r, &target.ext)
        } else if self.options.cross_matching {
            predict_cross_measurement(f, &self.sensors[f.anchor].ext, &target.ext, &v_r).ok()?
        } else {
            return None;
        };
        target.fov.contains(&(pred.bearing * pred.range)).then_some(pred)
    }

    /// Mahalanobis² of measurement `m` in `sensor` against feature `index`,
    /// as used by association.
    pub fn mahalanobis(&self, state: &FilterState, index: usize, sensor: usize, m: &Measurement) -> Option<f64> {
        let base = self.predict(state, index, sensor)?;
        let hph = projected_covariance(state, index, &base);
        self.distance(state, index, sensor, &base, &hph, m)
    }

    /// Mahalanobis² of a measurement against a feature's prediction.
    fn distance(
        &self,
        state: &FilterState,
        index: usize,
        sensor: usize,
        base: &PredictedMeasurement,
        hph: &MeasMatrix,
        m: &Measurement,
    ) -> Option<f64> {
        let pred = self.finish(state, sensor, *base, m);
        let hph = if self.options.doppler_coupling {
            *hph
        } else {
            projected_covariance(state, index, &pred)
        };
        let s = hph + pred.noise(m, self.gyro_var);
        let z = pred.residual(m).ok()?;
        let chol = s.cholesky()?;
        Some(z.dot(&chol.solve(&z)))
    }

    fn finish(
        &self,
        state: &FilterState,
        sensor: usize,
        mut pred: PredictedMeasurement,
        m: &Measurement,
    ) -> PredictedMeasurement {
        if !self.options.doppler_coupling {
            let v_r = self.radar_velocity(state, sensor);
            pred.decouple_doppler(m, &v_r, &self.sensors[sensor].ext);
        }
        pred
    }
}

/// Keep detections whose doppler is consistent with a static world.
///
/// The doppler expected from the velocity estimate along the *measured*
/// bearing is compared against the measurement with a spread that combines
/// doppler noise, velocity covariance, bearing noise and gyro noise.
pub fn stationarity_gate(
    scan: &RadarScan,
    measurements: &[Measurement],
    state: &FilterState,
    ctx: &ScanContext<'_>,
    cfg: &GatingConfig,
) -> Vec<bool> {
    let sensor = &ctx.sensors[scan.sensor];
    let v_r = ctx.radar_velocity(state, scan.sensor);
    let p_vv = state.p.fixed_view::<3, 3>(0, 0).into_owned();
    let r = sensor.ext.r_rb;
    let gyro_arm = r * skew(&sensor.ext.lever_arm);
    measurements
        .iter()
        .map(|m| {
            let u = m.bearing;
            let row = u.transpose() * r;
            let var_v = (row * p_vv * row.transpose())[0];
            let n = crate::geometry::nq_projection(&m.q);
            let g = n.transpose() * v_r;
            let var_b = (g.transpose() * m.cov.fixed_view::<2, 2>(1, 1) * g)[0];
            let var_w = (u.transpose() * gyro_arm).norm_squared() * ctx.gyro_var;
            let sigma = (m.cov[(0, 0)] + var_v + var_b + var_w).sqrt();
            (m.doppler - u.dot(&v_r)).abs() <= cfg.doppler_stationarity_sigma * sigma
        })
        .collect()
}

/// Greedy nearest-neighbour association on the full 4D Mahalanobis distance.
///
/// `candidates` masks the detections that may be matched at all.
pub fn associate(
    scan: &RadarScan,
    measurements: &[Measurement],
    candidates: &[bool],
    state: &FilterState,
    ctx: &ScanContext<'_>,
    gate: f64,
) -> AssociationResult {
    let mut pairs = Vec::new();
    let mut visible = Vec::new();
    for j in 0..state.features.len() {
        let Some(base) = ctx.predict(state, j, scan.sensor) else {
            continue;
        };
        visible.push(j);
        let hph = projected_covariance(state, j, &base);
        for (i, m) in measurements.iter().enumerate() {
            if !candidates[i] {
                continue;
            }
            let Some(d2) = ctx.distance(state, j, scan.sensor, &base, &hph, m) else {
                continue;
            };
            if d2 <= gate {
                pairs.push(Match {
                    feature: state.features[j].id,
                    detection: i,
                    d2,
                });
            }
        }
    }
    pairs.sort_by(|a, b| {
        a.d2.total_cmp(&b.d2)
            .then(a.feature.cmp(&b.feature))
            .then(a.detection.cmp(&b.detection))
    });
    let mut used_f = std::collections::HashSet::new();
    let mut used_d = vec![false; measurements.len()];
    let mut matches = Vec::new();
    for p in pairs {
        if used_d[p.detection] || used_f.contains(&p.feature) {
            continue;
        }
        used_d[p.detection] = true;
        used_f.insert(p.feature);
        matches.push(p);
    }
    AssociationResult {
        unmatched_detections: (0..measurements.len())
            .filter(|i| candidates[*i] && !used_d[*i])
            .collect(),
        unmatched_features: visible
            .iter()
            .map(|j| state.features[*j].id)
            .filter(|id| !used_f.contains(id))
            .collect(),
        matches,
    }
}

/// Nav entropy drop from a hypothetical first update of a new feature.
pub fn candidate_information(
    state: &FilterState,
    candidate: &Feature,
    init_cov: &Matrix3<f64>,
    m: &Measurement,
    ctx: &ScanContext<'_>,
    sensor: usize,
) -> Result<f64> {
    let p_nav = state.nav_covariance();
    let post = hypothetical_update(state, &p_nav, candidate, init_cov, m, ctx, sensor);
    Ok(nav_entropy_of(&p_nav)? - nav_entropy_of(&post)?)
}

/// Nav covariance after one update of a fresh, uncorrelated feature.
fn hypothetical_update(
    state: &FilterState,
    p_nav: &NavMatrix,
    candidate: &Feature,
    init_cov: &Matrix3<f64>,
    m: &Measurement,
    ctx: &ScanContext<'_>,
    sensor: usize,
) -> NavMatrix {
    let ext = &ctx.sensors[sensor].ext;
    let v_r = ctx.radar_velocity(state, sensor);
    let pred = ctx.finish(state, sensor, predict_measurement(candidate, &v_r, ext), m);
    let mut p = SMatrix::<f64, 12, 12>::zeros();
    p.fixed_view_mut::<9, 9>(0, 0).copy_from(p_nav);
    p.fixed_view_mut::<3, 3>(9, 9).copy_from(init_cov);
    let mut h = SMatrix::<f64, 4, 12>::zeros();
    h.fixed_view_mut::<4, 9>(0, 0).copy_from(&pred.h_nav);
    h.fixed_view_mut::<4, 3>(0, 9).copy_from(&pred.h_f);
    let s = h * p * h.transpose() + pred.noise(m, ctx.gyro_var);
    let Some(chol) = s.cholesky() else { return *p_nav };
    let ph = p * h.transpose();
    let post = p - ph * chol.solve(&ph.transpose());
    NavMatrix::from_fn(|i, j| 0.5 * (post[(i, j)] + post[(j, i)]))
}

/// What became of one detection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DetectionOutcome {
    /// Non-finite or non-positive range.
    Invalid,
    /// Rejected by the stationarity gate.
    NonStationary,
    /// Associated and used in an update.
    Matched { feature: u64, d2: f64 },
    /// Associated, but the update was rejected as ill-conditioned.
    UpdateRejected { feature: u64 },
    /// Started a new feature.
    Inserted { feature: u64 },
    /// Passed the gate but neither matched nor selected.
    Unused,
}

impl DetectionOutcome {
    /// Whether the detection influenced the estimate.
    pub fn is_used(&self) -> bool {
        matches!(self, Self::Matched { .. } | Self::Inserted { .. })
    }
}

/// Counters for one scan.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScanReport {
    pub detections: usize,
    pub stationarity_rejected: usize,
    pub matched: usize,
    pub cross_matched: usize,
    pub updates_rejected: usize,
    pub inserted: usize,
    pub pruned: usize,
    /// Total nav entropy drop credited to features in this scan, nats.
    pub entropy_credited: f64,
    /// Per detection, in scan order.
    pub outcomes: Vec<DetectionOutcome>,
}

/// Lifecycle bookkeeping that outlives a single scan.
#[derive(Debug, Clone)]
pub struct FeatureManager {
    pub cfg: GatingConfig,
    next_id: u64,
    last_prune: f64,
    /// Set after a prune round; features not seen since are replaceable.
    round_start: f64,
}

impl FeatureManager {
    pub fn new(cfg: GatingConfig, t0: f64) -> Self {
        Self {
            cfg,
            next_id: 0,
            last_prune: t0,
            round_start: t0,
        }
    }

    /// Gate, associate, update, score and, on cadence, prune and select.
    pub fn process_scan(
        &mut self,
        state: &mut FilterState,
        scan: &RadarScan,
        ctx: &ScanContext<'_>,
    ) -> Result<ScanReport> {
        let sensor = ctx
            .sensors
            .get(scan.sensor)
            .ok_or_else(|| Error::UnknownSensor(format!("#{}", scan.sensor)))?;
        let measurements: Vec<Measurement> = scan
            .detections
            .iter()
            .map(|d| detection_to_measurement(d, &sensor.noise))
            .collect();
        let valid: Vec<bool> = scan.detections.iter().map(|d| d.is_valid()).collect();
        let stationary = stationarity_gate(scan, &measurements, state, ctx, &self.cfg);
        let keep: Vec<bool> = valid.iter().zip(&stationary).map(|(a, b)| *a && *b).collect();
        let mut report = ScanReport {
            detections: scan.detections.len(),
            stationarity_rejected: valid.iter().zip(&stationary).filter(|(v, s)| **v && !**s).count(),
            outcomes: valid
                .iter()
                .zip(&stationary)
                .map(|(v, s)| match (v, s) {
                    (false, _) => DetectionOutcome::Invalid,
                    (true, false) => DetectionOutcome::NonStationary,
                    (true, true) => DetectionOutcome::Unused,
                })
                .collect(),
            ..Default::default()
        };

        let assoc = associate(scan, &measurements, &keep, state, ctx, self.cfg.chi2_gate);
        for id in &assoc.unmatched_features {
            if let Some(j) = state.index_of(*id) {
                state.features[j].misses += 1;
            }
        }
        state.begin_shared_rate(ctx.gyro_var);
        let updated = self.update_matches(state, scan, &measurements, &assoc.matches, ctx, &mut report);
        state.end_shared_rate();
        updated?;

        let due = scan.t - self.last_prune >= self.cfg.prune_interval;
        if due {
            report.pruned = self.prune(state, scan.t)?;
        }
        if due || state.features.len() < self.cfg.min_features {
            let candidates = self.candidates(state, scan, &measurements, &assoc.unmatched_detections, ctx);
            let inserted = self.select(state, scan, &measurements, candidates, ctx)?;
            report.inserted = inserted.len();
            for (i, id) in inserted {
                report.outcomes[i] = DetectionOutcome::Inserted { feature: id };
            }
        }
        if due {
            self.last_prune = scan.t;
            self.round_start = scan.t;
        }
        Ok(report)
    }

    /// Sequential updates with the associated detections.
    fn update_matches(
        &mut self,
        state: &mut FilterState,
        scan: &RadarScan,
        measurements: &[Measurement],
        matches: &[Match],
        ctx: &ScanContext<'_>,
        report: &mut ScanReport,
    ) -> Result<()> {
        for m in matches {
            let Some(j) = state.index_of(m.feature) else { continue };
            // Relinearize at the current estimate.
            let Some(base) = ctx.predict(state, j, scan.sensor) else {
                continue;
            };
            let meas = &measurements[m.detection];
            let pred = ctx.finish(state, scan.sensor, base, meas);
            let z = pred.residual(meas)?;
            let r = pred.noise(meas, 0.0);
            let before = nav_entropy(state)?;
            match state.update_feature(j, &pred, &z, &r)? {
                UpdateOutcome::Applied { .. } => {
                    let gain = before - nav_entropy(state)?;
                    let f = &mut state.features[j];
                    f.score += gain;
                    f.hits += 1;
                    f.last_seen = scan.t;
                    report.entropy_credited += gain;
                    report.matched += 1;
                    report.outcomes[m.detection] = DetectionOutcome::Matched {
                        feature: m.feature,
                        d2: m.d2,
                    };
                    if f.anchor != scan.sensor {
                        report.cross_matched += 1;
                    }
                }
                UpdateOutcome::Rejected => {
                    report.updates_rejected += 1;
                    report.outcomes[m.detection] = DetectionOutcome::UpdateRejected { feature: m.feature };
                }
            }
        }

        Ok(())
    }

    /// Remove stale features, lowest score first, without dropping below the floor.
    pub fn prune(&mut self, state: &mut FilterState, now: f64) -> Result<usize> {
        let mut stale: Vec<(f64, u64)> = state
            .features
            .iter()
            .filter(|f| now - f.last_seen > self.cfg.stale_window)
            .map(|f| (f.score, f.id))
            .collect();
        stale.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut removed = 0;
        for (_, id) in stale {
            if state.features.len() <= self.cfg.min_features {
                break;
            }
            state.remove_feature(id)?;
            removed += 1;
        }
        Ok(removed)
    }

    /// Unmatched detections that are not near any tracked feature.
    fn candidates(
        &self,
        state: &FilterState,
        scan: &RadarScan,
        measurements: &[Measurement],
        unmatched: &[usize],
        ctx: &ScanContext<'_>,
    ) -> Vec<usize> {
        // Any detection within the exclusion gate of some feature is dropped,
        // not just one-to-one winners.
        let mut taken = vec![false; measurements.len()];
        for j in 0..state.features.len() {
            let Some(base) = ctx.predict(state, j, scan.sensor) else {
                continue;
            };
            let hph = projected_covariance(state, j, &base);
            for &i in unmatched {
                if taken[i] {
                    continue;
                }
                if let Some(d2) = ctx.distance(state, j, scan.sensor, &base, &hph, &measurements[i]) {
                    taken[i] = d2 <= self.cfg.candidate_exclusion_gate;
                }
            }
        }
        unmatched.iter().copied().filter(|i| !taken[*i]).collect()
    }

    /// Greedy selection: repeatedly take the candidate whose first update
    /// would shrink the nav entropy most, given the candidates already taken.
    fn rank_candidates(
        &self,
        state: &FilterState,
        measurements: &[Measurement],
        mut pool: Vec<(usize, Feature, Matrix3<f64>)>,
        slots: usize,
        ctx: &ScanContext<'_>,
        sensor: usize,
    ) -> Result<Vec<(usize, Feature, Matrix3<f64>)>> {
        let mut p_nav = state.nav_covariance();
        let mut chosen = Vec::with_capacity(slots);
        while chosen.len() < slots && !pool.is_empty() {
            let base = nav_entropy_of(&p_nav)?;
            let mut best: Option<(f64, usize, NavMatrix)> = None;
            for (k, (i, f, cov)) in pool.iter().enumerate() {
                let post = hypothetical_update(state, &p_nav, f, cov, &measurements[*i], ctx, sensor);
                let gain = base - nav_entropy_of(&post)?;
                if best.as_ref().is_none_or(|b| gain > b.0) {
                    best = Some((gain, k, post));
                }
            }
            let (_, k, post) = best.expect("pool is not empty");
            p_nav = post;
            chosen.push(pool.remove(k));
        }
        Ok(chosen)
    }

    /// Rank candidates by hypothetical nav information and insert the best.
    /// Returns (detection, new feature id) pairs.
    ///
    /// At capacity, features not matched since the previous round are
    /// replaced (lowest score first) by better-ranked candidates.
    fn select(
        &mut self,
        state: &mut FilterState,
        scan: &RadarScan,
        measurements: &[Measurement],
        candidates: Vec<usize>,
        ctx: &ScanContext<'_>,
    ) -> Result<Vec<(usize, u64)>> {
        let mut pool = Vec::with_capacity(candidates.len());
        for i in candidates {
            let m = &measurements[i];
            let (f, cov) = self.initial_feature(m, scan);
            if ctx.sensors[scan.sensor].fov.contains(&f.position()) {
                pool.push((i, f, cov));
            }
        }
        let mut replaceable: Vec<(f64, u64)> = state
            .features
            .iter()
            .filter(|f| f.last_seen < self.round_start)
            .map(|f| (f.score, f.id))
            .collect();
        replaceable.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let free = state.capacity.saturating_sub(state.features.len()) + replaceable.len();
        let slots = free.min(pool.len());
        let ranked = self.rank_candidates(state, measurements, pool, slots, ctx, scan.sensor)?;
        let mut replaceable = replaceable.into_iter();

        let mut inserted = Vec::with_capacity(ranked.len());
        for (i, mut f, cov) in ranked {
            if state.features.len() >= state.capacity {
                let Some((_, id)) = replaceable.next() else { break };
                state.remove_feature(id)?;
            }
            f.id = self.next_id;
            self.next_id += 1;
            inserted.push((i, f.id));
            state.insert_feature(f, &cov)?;
        }
        Ok(inserted)
    }

    /// Feature at the measured bearing and range, covariance from the measurement noise.
    pub fn initial_feature(&self, m: &Measurement, scan: &RadarScan) -> (Feature, Matrix3<f64>) {
        let f = Feature::new(u64::MAX, scan.sensor, m.q, m.range, scan.t);
        let mut cov = Matrix3::zeros();
        cov.fixed_view_mut::<2, 2>(0, 0)
            .copy_from(&m.cov.fixed_view::<2, 2>(1, 1));
        cov[(2, 2)] = m.cov[(3, 3)];
        (f, cov)
    }
}
