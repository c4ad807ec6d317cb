//! Dataset replay: merges the IMU and radar streams and drives the filter.
//!
//! Each IMU sample is held constant until the next one arrives. A radar scan
//! is processed after predicting forward to its own timestamp with the held
//! sample, so scans never see a stale state.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::config::RunConfig;
use crate::ekf::{nav_sigmas, world_velocity, FilterState};
use crate::error::{Error, Result};
use crate::feature::RadarExtrinsics;
use crate::io;
use crate::manager::{nav_entropy, score_prediction, FeatureManager, MatchOptions, ScanContext, ScanReport};
use crate::motion::{ImuSample, MAX_STEP};
use crate::radar::{RadarScan, Sensor};
use crate::trajectory::{Trajectory, TrajectoryPoint};

/// IMU interval assumed until two samples have been seen, s.
const NOMINAL_IMU_DT: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    Imu(ImuSample),
    Scan(RadarScan),
}

impl Event {
    pub fn t(&self) -> f64 {
        match self {
            Event::Imu(s) => s.t,
            Event::Scan(s) => s.t,
        }
    }
}

/// Time-ordered merge. At equal timestamps scans come first (in sensor order),
/// so the pose logged at that IMU event already includes the scan.
pub fn merge_events(imu: Vec<ImuSample>, scans: Vec<RadarScan>) -> Vec<Event> {
    let mut events: Vec<Event> = scans
        .into_iter()
        .map(Event::Scan)
        .chain(imu.into_iter().map(Event::Imu))
        .collect();
    let rank = |e: &Event| match e {
        Event::Scan(s) => s.sensor,
        Event::Imu(_) => usize::MAX,
    };
    events.sort_by(|a, b| a.t().total_cmp(&b.t()).then(rank(a).cmp(&rank(b))));
    events
}

/// Read `imu.csv` and one scan file per `(radar id, path)`.
pub fn load_dataset(imu: &Path, radars: &[(String, PathBuf)], cfg: &RunConfig) -> Result<Vec<Event>> {
    let samples = io::read_imu(imu)?;
    let mut scans = Vec::new();
    for (id, path) in radars {
        let sensor = cfg.sensor_index(id)?;
        scans.extend(io::read_radar(path, sensor)?);
    }
    Ok(merge_events(samples, scans))
}

/// Ablation switches and checking level.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ReplayOptions {
    pub matching: MatchOptions,
    /// Check symmetry and positive definiteness of the full covariance after
    /// every step instead of the cheap finiteness/diagonal check.
    pub strict_health: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ErrorReport {
    pub class: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunDiagnostics {
    pub imu_events: usize,
    pub scans: usize,
    /// Scans before the first IMU sample, which cannot be processed.
    pub scans_skipped: usize,
    pub detections: usize,
    pub stationarity_rejected: usize,
    pub matched: usize,
    pub cross_matched: usize,
    pub updates_rejected: usize,
    pub inserted: usize,
    pub pruned: usize,
    /// Matched detections over all detections.
    pub match_rate: f64,
    /// Averaged over IMU events.
    pub mean_feature_count: f64,
    pub max_feature_count: usize,
    pub final_feature_count: usize,
    pub scan_time_mean_ms: f64,
    pub scan_time_max_ms: f64,
    pub error: Option<ErrorReport>,
}

impl RunDiagnostics {
    fn add_scan(&mut self, r: &ScanReport) {
        self.scans += 1;
        self.detections += r.detections;
        self.stationarity_rejected += r.stationarity_rejected;
        self.matched += r.matched;
        self.cross_matched += r.cross_matched;
        self.updates_rejected += r.updates_rejected;
        self.inserted += r.inserted;
        self.pruned += r.pruned;
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("diagnostics are always serializable")
    }
}

/// Streaming replay engine.
#[derive(Debug, Clone)]
pub struct Replay {
    cfg: RunConfig,
    options: ReplayOptions,
    sensors: Vec<Sensor>,
    extrinsics: Vec<RadarExtrinsics>,
    state: Option<FilterState>,
    manager: FeatureManager,
    held: Option<ImuSample>,
    imu_dt: f64,
    trajectory: Trajectory,
    diag: RunDiagnostics,
    feature_count_sum: usize,
    scan_time_sum: f64,
}

impl Replay {
    pub fn new(cfg: &RunConfig, options: ReplayOptions) -> Result<Self> {
        cfg.validate()?;
        let sensors = cfg.sensors();
        Ok(Self {
            extrinsics: sensors.iter().map(|s| s.ext).collect(),
            sensors,
            manager: FeatureManager::new(cfg.gating, 0.0),
            cfg: cfg.clone(),
            options,
            state: None,
            held: None,
            imu_dt: NOMINAL_IMU_DT,
            trajectory: Trajectory::default(),
            diag: RunDiagnostics::default(),
            feature_count_sum: 0,
            scan_time_sum: 0.0,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn sensors(&self) -> &[Sensor] {
        &self.sensors
    }

    /// `None` until the first IMU sample.
    pub fn state(&self) -> Option<&FilterState> {
        self.state.as_ref()
    }

    pub fn trajectory(&self) -> &Trajectory {
        &self.trajectory
    }

    /// Counters so far, with the averages filled in.
    pub fn diagnostics(&self) -> RunDiagnostics {
        let mut d = self.diag.clone();
        summarize(&mut d, self.feature_count_sum, self.scan_time_sum, self.state.as_ref());
        d
    }

    /// Association context for the current state, once an IMU sample is held.
    pub fn context(&self) -> Option<ScanContext<'_>> {
        let imu = self.held.as_ref()?;
        Some(ScanContext {
            sensors: &self.sensors,
            imu,
            gyro_var: self.gyro_var(),
            options: self.options.matching,
        })
    }

    /// Variance of one gyro sample.
    fn gyro_var(&self) -> f64 {
        self.cfg.process_noise.sigma_w.powi(2) / self.imu_dt
    }

    fn health(&self, state: &FilterState) -> Result<()> {
        if self.options.strict_health {
            state.full_health()
        } else {
            Ok(())
        }
    }

    /// Predict to `t` with the held sample, charging the entropy growth to the features.
    pub fn advance_to(&mut self, t: f64) -> Result<()> {
        let (Some(state), Some(imu)) = (self.state.as_mut(), self.held) else {
            return Err(Error::InvalidInput("no IMU sample yet".into()));
        };
        if t < state.t {
            return Err(Error::InvalidInput(format!(
                "cannot predict backwards from {} to {t}",
                state.t
            )));
        }
        let span = t - state.t;
        if span == 0.0 {
            return Ok(());
        }
        let steps = (span / MAX_STEP).ceil().max(1.0) as usize;
        let dt = span / steps as f64;
        let (gravity, noise) = (self.cfg.gravity, self.cfg.process_noise);
        for _ in 0..steps {
            let before = nav_entropy(state)?;
            state.predict(&imu, dt, &gravity, &noise, &self.extrinsics)?;
            let after = nav_entropy(state)?;
            score_prediction(state, before, after);
        }
        state.t = t;
        let state = self.state.as_ref().expect("checked above");
        self.health(state)
    }

    pub fn push_imu(&mut self, sample: ImuSample) -> Result<()> {
        if !(sample.t.is_finite() && sample.accel.iter().chain(sample.gyro.iter()).all(|x| x.is_finite())) {
            return Err(Error::Propagation { field: "imu sample" });
        }
        match self.held {
            None => {
                let init = &self.cfg.initial;
                self.state = Some(FilterState::new(
                    sample.t,
                    init.nav(),
                    init.covariance(),
                    self.cfg.max_features,
                ));
                self.manager = FeatureManager::new(self.cfg.gating, sample.t);
            }
            Some(prev) => {
                if sample.t <= prev.t {
                    return Err(Error::InvalidInput(format!(
                        "IMU timestamps not increasing ({} -> {})",
                        prev.t, sample.t
                    )));
                }
                self.advance_to(sample.t)?;
                self.imu_dt = sample.t - prev.t;
            }
        }
        self.held = Some(sample);
        self.diag.imu_events += 1;
        let state = self.state.as_ref().expect("initialized above");
        self.feature_count_sum += state.features.len();
        self.diag.max_feature_count = self.diag.max_feature_count.max(state.features.len());
        self.trajectory.push(TrajectoryPoint {
            t: sample.t,
            p: state.nav.p,
            q: state.nav.q,
            v: world_velocity(&state.nav),
            sigma: Some(nav_sigmas(state)),
        });
        Ok(())
    }

    pub fn push_scan(&mut self, scan: &RadarScan) -> Result<ScanReport> {
        if self.held.is_none() {
            self.diag.scans_skipped += 1;
            return Ok(ScanReport::default());
        }
        if scan.sensor >= self.sensors.len() {
            return Err(Error::UnknownSensor(format!("#{}", scan.sensor)));
        }
        self.advance_to(scan.t)?;
        let start = Instant::now();
        let mut state = self.state.take().expect("initialized with the first IMU sample");
        let imu = self.held.expect("checked above");
        let ctx = ScanContext {
            sensors: &self.sensors,
            imu: &imu,
            gyro_var: self.gyro_var(),
            options: self.options.matching,
        };
        let result = self.manager.process_scan(&mut state, scan, &ctx);
        let elapsed = start.elapsed().as_secs_f64() * 1e3;
        let checked = result.and_then(|r| self.health(&state).map(|_| r));
        self.state = Some(state);
        let report = checked?;
        self.scan_time_sum += elapsed;
        self.diag.scan_time_max_ms = self.diag.scan_time_max_ms.max(elapsed);
        self.diag.add_scan(&report);
        Ok(report)
    }

    pub fn push(&mut self, event: &Event) -> Result<()> {
        match event {
            Event::Imu(s) => self.push_imu(*s),
            Event::Scan(s) => self.push_scan(s).map(|_| ()),
        }
    }

    pub fn finish(mut self) -> (Trajectory, RunDiagnostics) {
        summarize(
            &mut self.diag,
            self.feature_count_sum,
            self.scan_time_sum,
            self.state.as_ref(),
        );
        (self.trajectory, self.diag)
    }
}

fn summarize(d: &mut RunDiagnostics, feature_count_sum: usize, scan_time_sum: f64, state: Option<&FilterState>) {
    d.match_rate = if d.detections > 0 {
        d.matched as f64 / d.detections as f64
    } else {
        0.0
    };
    d.mean_feature_count = if d.imu_events > 0 {
        feature_count_sum as f64 / d.imu_events as f64
    } else {
        0.0
    };
    d.scan_time_mean_ms = if d.scans > 0 {
        scan_time_sum / d.scans as f64
    } else {
        0.0
    };
    d.final_feature_count = state.map_or(0, |s| s.features.len());
}

/// Result of a replay; on error the trajectory holds everything up to the failure.
#[derive(Debug)]
pub struct ReplayOutcome {
    pub trajectory: Trajectory,
    pub diagnostics: RunDiagnostics,
    pub error: Option<Error>,
}

pub fn run_replay(events: &[Event], cfg: &RunConfig, options: ReplayOptions) -> Result<ReplayOutcome> {
    let mut replay = Replay::new(cfg, options)?;
    let mut error = None;
    for e in events {
        if let Err(err) = replay.push(e) {
            let t = replay.state().map_or(e.t(), |s| s.t);
            error = Some(match err {
                Error::NumericalHealth { .. } => err,
                other if other.class() == "propagation" || other.class() == "geometry" => Error::NumericalHealth {
                    t,
                    reason: other.to_string(),
                },
                other => other,
            });
            break;
        }
    }
    let (trajectory, mut diagnostics) = replay.finish();
    diagnostics.error = error.as_ref().map(|e| ErrorReport {
        class: e.class().to_string(),
        message: e.to_string(),
    });
    Ok(ReplayOutcome {
        trajectory,
        diagnostics,
        error,
    })
}
