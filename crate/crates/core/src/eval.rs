//! Trajectory accuracy metrics: APE after rigid alignment, RPE and RRE over
//! consecutive resampled pairs, end-pose error and unaligned RMSE, plus
//! nearest-rank percentile aggregation over runs.

use std::io::Write;

use nalgebra::{Matrix3, Vector3};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::trajectory::{Trajectory, TrajectoryPoint};

/// Maximum distance (s) between a resampling instant and the poses associated with it.
pub const MAX_TIME_OFFSET: f64 = 0.050;

/// `p ↦ R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            r: Matrix3::identity(),
            t: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.r * p + self.t
    }
}

/// Least-squares rotation and translation taking `est` onto `reference`
/// (minimizes `Σ‖R e + t − r‖²`), no scale.
pub fn align_umeyama(est: &[Vector3<f64>], reference: &[Vector3<f64>]) -> Result<RigidTransform> {
    if est.len() != reference.len() {
        return Err(Error::InvalidInput(format!(
            "alignment needs paired positions ({} vs {})",
            est.len(),
            reference.len()
        )));
    }
    if est.len() < 3 {
        return Err(Error::DegenerateGeometry("alignment needs at least 3 positions".into()));
    }
    let n = est.len() as f64;
    let mean = |ps: &[Vector3<f64>]| ps.iter().sum::<Vector3<f64>>() / n;
    let (me, mr) = (mean(est), mean(reference));
    let mut h = Matrix3::zeros();
    for (e, r) in est.iter().zip(reference) {
        h += (r - mr) * (e - me).transpose();
    }
    h /= n;
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut s = svd.singular_values;
    // Sort descending to read off the rank.
    s.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
    let spread = |ps: &[Vector3<f64>], m: &Vector3<f64>| ps.iter().map(|p| (p - m).norm_squared()).sum::<f64>() / n;
    let scale = spread(est, &me).max(spread(reference, &mr));
    if !(s[1] > 1e-10 * scale) {
        return Err(Error::DegenerateGeometry(
            "positions are collinear or coincident".into(),
        ));
    }
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * v_t;
    Ok(RigidTransform { r, t: mr - r * me })
}

/// Errors of one consecutive pair of resampled poses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairError {
    pub t0: f64,
    pub t1: f64,
    /// Relative translation error, m.
    pub translation: f64,
    /// Relative rotation error, degrees.
    pub rotation_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    /// Position RMSE after rigid alignment, m.
    pub ape_rmse: f64,
    pub rpe_rmse: f64,
    /// Degrees.
    pub rre_rmse: f64,
    /// Final position distance without alignment, m.
    pub end_pose_error: f64,
    /// Position RMSE without alignment, m.
    pub trajectory_rmse: f64,
    pub samples: usize,
    /// False when the path was too degenerate for a rotation fit and only the
    /// centroids were aligned.
    pub rotation_aligned: bool,
    pub pairs: Vec<PairError>,
}

/// Pairs of (estimate, reference) poses at `rate` Hz over the common time span.
/// Instants without a pose within [`MAX_TIME_OFFSET`] in both are skipped.
pub fn associate(
    est: &Trajectory,
    reference: &Trajectory,
    rate: f64,
) -> Result<Vec<(TrajectoryPoint, TrajectoryPoint)>> {
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::InvalidInput(format!("sample rate {rate} must be positive")));
    }
    let (Some(e0), Some(e1), Some(r0), Some(r1)) = (est.first(), est.last(), reference.first(), reference.last())
    else {
        return Err(Error::EmptyOverlap);
    };
    let (start, end) = (e0.t.max(r0.t), e1.t.min(r1.t));
    if start > end {
        return Err(Error::EmptyOverlap);
    }
    let steps = ((end - start) * rate + 1e-9).floor() as usize;
    let mut out = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let t = start + k as f64 / rate;
        let (Some(i), Some(j)) = (est.nearest(t), reference.nearest(t)) else {
            continue;
        };
        let (a, b) = (est.points[i], reference.points[j]);
        if (a.t - t).abs() <= MAX_TIME_OFFSET && (b.t - t).abs() <= MAX_TIME_OFFSET {
            out.push((a, b));
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyOverlap);
    }
    Ok(out)
}

fn rmse(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

/// Relative errors of one consecutive pair.
///
/// The translation error is the difference of the relative displacements,
/// each expressed in its own trajectory's body frame. The squared error is
/// averaged over the frames of both endpoints, which keeps it invariant to a
/// global rigid transform of either trajectory and symmetric under time
/// reversal.
pub fn pair_error(e0: &TrajectoryPoint, e1: &TrajectoryPoint, r0: &TrajectoryPoint, r1: &TrajectoryPoint) -> PairError {
    let (de, dr) = (e1.p - e0.p, r1.p - r0.p);
    let a = (e0.q.inverse_transform_vector(&de) - r0.q.inverse_transform_vector(&dr)).norm_squared();
    let b = (e1.q.inverse_transform_vector(&de) - r1.q.inverse_transform_vector(&dr)).norm_squared();
    let rel_e = (e0.q.inverse() * e1.q).into_inner().coords;
    let rel_r = (r0.q.inverse() * r1.q).into_inner().coords;
    // Angle between unit quaternions, exact zero for equal inputs.
    let (d, s) = ((rel_e - rel_r).norm(), (rel_e + rel_r).norm());
    PairError {
        t0: r0.t,
        t1: r1.t,
        translation: (0.5 * (a + b)).sqrt(),
        rotation_deg: (2.0 * d.min(s).atan2(d.max(s))).to_degrees(),
    }
}

pub fn compute_metrics(est: &Trajectory, reference: &Trajectory, rate: f64) -> Result<MetricReport> {
    let pairs = associate(est, reference, rate)?;
    let pe: Vec<Vector3<f64>> = pairs.iter().map(|(e, _)| e.p).collect();
    let pr: Vec<Vector3<f64>> = pairs.iter().map(|(_, r)| r.p).collect();
    let n = pe.len() as f64;
    let centroid = RigidTransform {
        r: Matrix3::identity(),
        t: (pr.iter().sum::<Vector3<f64>>() - pe.iter().sum::<Vector3<f64>>()) / n,
    };
    let residual = |a: &RigidTransform| rmse(pe.iter().zip(&pr).map(|(e, r)| (a.apply(e) - r).norm_squared()));
    // The rotation fit is optimal; the centroid-only residual can still be smaller by round-off.
    let (ape_rmse, rotation_aligned) = match align_umeyama(&pe, &pr) {
        Ok(t) => (residual(&t).min(residual(&centroid)), true),
        Err(_) => (residual(&centroid), false),
    };
    let trajectory_rmse = rmse(pe.iter().zip(&pr).map(|(e, r)| (e - r).norm_squared()));
    let (e_end, r_end) = pairs.last().expect("associate returns at least one pair");
    let pair_errors: Vec<PairError> = pairs
        .windows(2)
        .map(|w| pair_error(&w[0].0, &w[1].0, &w[0].1, &w[1].1))
        .collect();
    Ok(MetricReport {
        ape_rmse,
        rpe_rmse: rmse(pair_errors.iter().map(|p| p.translation.powi(2))),
        rre_rmse: rmse(pair_errors.iter().map(|p| p.rotation_deg.powi(2))),
        end_pose_error: (e_end.p - r_end.p).norm(),
        trajectory_rmse,
        samples: pairs.len(),
        rotation_aligned,
        pairs: pair_errors,
    })
}

/// Smallest value whose cumulative fraction is at least `percent`/100.
pub fn nearest_rank(values: &[f64], percent: f64) -> Option<f64> {
    if values.is_empty() || !(percent > 0.0 && percent <= 100.0) {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // Guard against 63/100·n landing a hair above an integer.
    let rank = ((percent / 100.0 * n as f64) - 1e-9).ceil().max(1.0) as usize;
    Some(sorted[rank.min(n) - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PercentileRow {
    pub metric: &'static str,
    pub p63: f64,
    pub p95: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateTable {
    pub runs: usize,
    pub rows: Vec<PercentileRow>,
}

pub const METRIC_NAMES: [&str; 5] = ["ape_rmse", "rpe_rmse", "rre_rmse", "end_pose_error", "trajectory_rmse"];

fn metric(r: &MetricReport, name: &str) -> f64 {
    match name {
        "ape_rmse" => r.ape_rmse,
        "rpe_rmse" => r.rpe_rmse,
        "rre_rmse" => r.rre_rmse,
        "end_pose_error" => r.end_pose_error,
        "trajectory_rmse" => r.trajectory_rmse,
        _ => unreachable!("unknown metric {name}"),
    }
}

/// 63rd and 95th nearest-rank percentiles and maximum of every metric.
pub fn aggregate_runs(reports: &[MetricReport]) -> Result<AggregateTable> {
    if reports.is_empty() {
        return Err(Error::InvalidInput("no reports to aggregate".into()));
    }
    let rows = METRIC_NAMES
        .iter()
        .map(|name| {
            let v: Vec<f64> = reports.iter().map(|r| metric(r, name)).collect();
            PercentileRow {
                metric: name,
                p63: nearest_rank(&v, 63.0).expect("non-empty"),
                p95: nearest_rank(&v, 95.0).expect("non-empty"),
                max: nearest_rank(&v, 100.0).expect("non-empty"),
            }
        })
        .collect();
    Ok(AggregateTable {
        runs: reports.len(),
        rows,
    })
}

impl AggregateTable {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let err = |e: csv::Error| Error::InvalidInput(e.to_string());
        wtr.write_record(["metric", "p63", "p95", "max", "runs"]).map_err(err)?;
        for r in &self.rows {
            wtr.write_record([
                r.metric.to_string(),
                format!("{}", r.p63),
                format!("{}", r.p95),
                format!("{}", r.max),
                self.runs.to_string(),
            ])
            .map_err(err)?;
        }
        wtr.flush()?;
        Ok(())
    }
}
