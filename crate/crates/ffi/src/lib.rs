//! C ABI over `rio-core`.
//!
//! Every function returns a [`RioStatus`]; on failure the message is kept per
//! thread and can be read with [`rio_last_error_message`]. Handles are opaque
//! and owned by the caller until passed to their `_free` function. Panics
//! never cross the boundary and are reported as [`RioStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use nalgebra::Vector3;
use rio_core::config::RunConfig;
use rio_core::ekf::{nav_sigmas, world_velocity};
use rio_core::eval::compute_metrics;
use rio_core::io::{read_trajectory, write_trajectory_file};
use rio_core::manager::MatchOptions;
use rio_core::motion::ImuSample;
use rio_core::radar::{RadarDetection, RadarScan};
use rio_core::replay::{load_dataset, run_replay, Replay, ReplayOptions};
use rio_core::trajectory::TrajectoryPoint;
use rio_core::Error;

/// Result codes. Values are stable.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RioStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Dataset = 4,
    Input = 5,
    Io = 6,
    NumericalHealth = 7,
    Propagation = 8,
    Geometry = 9,
    FeatureBookkeeping = 10,
    /// A previous step failed; the filter must be recreated.
    Failed = 11,
    Panic = 12,
}

impl RioStatus {
    fn of(e: &Error) -> Self {
        match e.class() {
            "config" => Self::Config,
            "dataset" => Self::Dataset,
            "input" => Self::Input,
            "io" => Self::Io,
            "numerical-health" => Self::NumericalHealth,
            "propagation" => Self::Propagation,
            "geometry" => Self::Geometry,
            "feature-bookkeeping" => Self::FeatureBookkeeping,
            _ => Self::Input,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: RioStatus, msg: impl Into<String>) -> RioStatus {
    set_error(msg.into());
    status
}

fn from_error(e: &Error) -> RioStatus {
    fail(RioStatus::of(e), format!("{}: {e}", e.class()))
}

/// Run `f`, converting panics into [`RioStatus::Panic`].
fn guard(f: impl FnOnce() -> RioStatus) -> RioStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(RioStatus::Panic, format!("panic: {msg}"))
        }
    }
}

/// # Safety
/// `ptr` must be null or a valid NUL-terminated string.
unsafe fn str_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, RioStatus> {
    if ptr.is_null() {
        return Err(fail(RioStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| fail(RioStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(status) => return status,
        }
    };
}

macro_rules! core {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(err) => return from_error(&err),
        }
    };
}

/// Message of the last failure on this thread, or null. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn rio_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rio_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Ablation switches and checking level.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct RioOptions {
    pub doppler_coupling: bool,
    pub cross_matching: bool,
    pub strict_health: bool,
    /// Overrides the configured feature capacity when nonzero.
    pub max_features: usize,
}

/// Defaults: coupling and cross-matching on, cheap health checks, configured capacity.
#[no_mangle]
pub extern "C" fn rio_options_default() -> RioOptions {
    RioOptions {
        doppler_coupling: true,
        cross_matching: true,
        strict_health: false,
        max_features: 0,
    }
}

impl RioOptions {
    fn replay(&self) -> ReplayOptions {
        ReplayOptions {
            matching: MatchOptions {
                doppler_coupling: self.doppler_coupling,
                cross_matching: self.cross_matching,
            },
            strict_health: self.strict_health,
        }
    }

    fn apply(&self, cfg: &mut RunConfig) {
        if self.max_features > 0 {
            cfg.max_features = self.max_features;
        }
    }
}

/// One radar detection. `snr` is NaN when not reported.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct RioDetection {
    pub azimuth: f64,
    pub elevation: f64,
    pub range: f64,
    pub doppler: f64,
    pub snr: f64,
}

/// Estimated pose with velocity and the nav error standard deviations
/// `[δv, δθ, δp]`.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct RioPose {
    pub t: f64,
    pub position: [f64; 3],
    /// Body-to-world, `w, x, y, z`.
    pub quaternion: [f64; 4],
    /// World frame.
    pub velocity: [f64; 3],
    pub sigma: [f64; 9],
}

impl From<&TrajectoryPoint> for RioPose {
    fn from(p: &TrajectoryPoint) -> Self {
        let q = p.q.quaternion();
        Self {
            t: p.t,
            position: p.p.into(),
            quaternion: [q.w, q.i, q.j, q.k],
            velocity: p.v.into(),
            sigma: p.sigma.unwrap_or([f64::NAN; 9]),
        }
    }
}

/// Counters of one processed scan.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct RioScanSummary {
    pub detections: usize,
    pub stationarity_rejected: usize,
    pub matched: usize,
    pub cross_matched: usize,
    pub inserted: usize,
    pub pruned: usize,
    pub feature_count: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct RioMetrics {
    pub ape_rmse: f64,
    pub rpe_rmse: f64,
    /// Degrees.
    pub rre_rmse: f64,
    pub end_pose_error: f64,
    pub trajectory_rmse: f64,
    pub samples: usize,
}

/// Streaming filter handle.
pub struct RioFilter {
    replay: Replay,
    failed: bool,
}

/// Create a filter from a TOML configuration string. `options` may be null.
///
/// # Safety
/// `config_toml` must be a NUL-terminated string, `options` null or valid,
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rio_filter_new(
    config_toml: *const c_char,
    options: *const RioOptions,
    out: *mut *mut RioFilter,
) -> RioStatus {
    guard(|| {
        if out.is_null() {
            return fail(RioStatus::NullPointer, "out is null");
        }
        *out = std::ptr::null_mut();
        let text = tri!(str_arg(config_toml, "config_toml"));
        let options = if options.is_null() {
            rio_options_default()
        } else {
            *options
        };
        let mut cfg = core!(RunConfig::from_toml(text));
        options.apply(&mut cfg);
        let replay = core!(Replay::new(&cfg, options.replay()));
        *out = Box::into_raw(Box::new(RioFilter { replay, failed: false }));
        RioStatus::Ok
    })
}

/// # Safety
/// `filter` must be null or a handle from [`rio_filter_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rio_filter_free(filter: *mut RioFilter) {
    if !filter.is_null() {
        drop(Box::from_raw(filter));
    }
}

unsafe fn handle<'a>(filter: *mut RioFilter) -> Result<&'a mut RioFilter, RioStatus> {
    let f = filter
        .as_mut()
        .ok_or_else(|| fail(RioStatus::NullPointer, "filter is null"))?;
    if f.failed {
        return Err(fail(RioStatus::Failed, "filter failed earlier and must be recreated"));
    }
    Ok(f)
}

fn record(f: &mut RioFilter, e: &Error) -> RioStatus {
    if matches!(
        e.class(),
        "numerical-health" | "propagation" | "geometry" | "feature-bookkeeping"
    ) {
        f.failed = true;
    }
    from_error(e)
}

/// Feed one IMU sample (specific force m/s², body rate rad/s).
///
/// # Safety
/// `filter` must be a live handle; `accel` and `gyro` must point to 3 doubles.
#[no_mangle]
pub unsafe extern "C" fn rio_filter_push_imu(
    filter: *mut RioFilter,
    t: f64,
    accel: *const f64,
    gyro: *const f64,
) -> RioStatus {
    guard(|| {
        let f = tri!(handle(filter));
        if accel.is_null() || gyro.is_null() {
            return fail(RioStatus::NullPointer, "accel or gyro is null");
        }
        let a = Vector3::from_column_slice(std::slice::from_raw_parts(accel, 3));
        let w = Vector3::from_column_slice(std::slice::from_raw_parts(gyro, 3));
        match f.replay.push_imu(ImuSample::new(t, a, w)) {
            Ok(()) => RioStatus::Ok,
            Err(e) => record(f, &e),
        }
    })
}

/// Feed one radar scan of sensor `sensor_id`. `summary` may be null.
///
/// # Safety
/// `filter` must be a live handle, `sensor_id` a NUL-terminated string,
/// `detections` valid for `count` elements (may be null when `count` is 0).
#[no_mangle]
pub unsafe extern "C" fn rio_filter_push_scan(
    filter: *mut RioFilter,
    sensor_id: *const c_char,
    t: f64,
    detections: *const RioDetection,
    count: usize,
    summary: *mut RioScanSummary,
) -> RioStatus {
    guard(|| {
        let f = tri!(handle(filter));
        let id = tri!(str_arg(sensor_id, "sensor_id"));
        if detections.is_null() && count > 0 {
            return fail(RioStatus::NullPointer, "detections is null");
        }
        if !t.is_finite() {
            return fail(RioStatus::InvalidArgument, "scan time is not finite");
        }
        let sensor = core!(f.replay.config().sensor_index(id));
        let raw = if count == 0 {
            &[][..]
        } else {
            std::slice::from_raw_parts(detections, count)
        };
        let scan = RadarScan {
            t,
            sensor,
            detections: raw
                .iter()
                .map(|d| RadarDetection {
                    azimuth: d.azimuth,
                    elevation: d.elevation,
                    range: d.range,
                    doppler: d.doppler,
                    snr: (!d.snr.is_nan()).then_some(d.snr),
                })
                .collect(),
        };
        match f.replay.push_scan(&scan) {
            Ok(r) => {
                if let Some(s) = summary.as_mut() {
                    *s = RioScanSummary {
                        detections: r.detections,
                        stationarity_rejected: r.stationarity_rejected,
                        matched: r.matched,
                        cross_matched: r.cross_matched,
                        inserted: r.inserted,
                        pruned: r.pruned,
                        feature_count: f.replay.state().map_or(0, |s| s.features.len()),
                    };
                }
                RioStatus::Ok
            }
            Err(e) => record(f, &e),
        }
    })
}

/// Current estimate. Fails with `Input` before the first IMU sample.
///
/// # Safety
/// `filter` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn rio_filter_nav_state(filter: *const RioFilter, out: *mut RioPose) -> RioStatus {
    guard(|| {
        let Some(f) = filter.as_ref() else {
            return fail(RioStatus::NullPointer, "filter is null");
        };
        let Some(out) = out.as_mut() else {
            return fail(RioStatus::NullPointer, "out is null");
        };
        let Some(s) = f.replay.state() else {
            return fail(RioStatus::Input, "no IMU sample yet");
        };
        *out = RioPose::from(&TrajectoryPoint {
            t: s.t,
            p: s.nav.p,
            q: s.nav.q,
            v: world_velocity(&s.nav),
            sigma: Some(nav_sigmas(s)),
        });
        RioStatus::Ok
    })
}

/// Number of tracked features.
///
/// # Safety
/// `filter` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn rio_filter_feature_count(filter: *const RioFilter, out: *mut usize) -> RioStatus {
    guard(|| {
        let Some(f) = filter.as_ref() else {
            return fail(RioStatus::NullPointer, "filter is null");
        };
        let Some(out) = out.as_mut() else {
            return fail(RioStatus::NullPointer, "out is null");
        };
        *out = f.replay.state().map_or(0, |s| s.features.len());
        RioStatus::Ok
    })
}

/// Number of poses recorded so far (one per IMU sample).
///
/// # Safety
/// `filter` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn rio_filter_trajectory_len(filter: *const RioFilter, out: *mut usize) -> RioStatus {
    guard(|| {
        let Some(f) = filter.as_ref() else {
            return fail(RioStatus::NullPointer, "filter is null");
        };
        let Some(out) = out.as_mut() else {
            return fail(RioStatus::NullPointer, "out is null");
        };
        *out = f.replay.trajectory().len();
        RioStatus::Ok
    })
}

/// Recorded pose `index`.
///
/// # Safety
/// `filter` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn rio_filter_trajectory_pose(
    filter: *const RioFilter,
    index: usize,
    out: *mut RioPose,
) -> RioStatus {
    guard(|| {
        let Some(f) = filter.as_ref() else {
            return fail(RioStatus::NullPointer, "filter is null");
        };
        let Some(out) = out.as_mut() else {
            return fail(RioStatus::NullPointer, "out is null");
        };
        match f.replay.trajectory().points.get(index) {
            Some(p) => {
                *out = RioPose::from(p);
                RioStatus::Ok
            }
            None => fail(RioStatus::InvalidArgument, format!("pose index {index} out of range")),
        }
    })
}

/// Run diagnostics as a JSON string; release it with [`rio_string_free`].
///
/// # Safety
/// `filter` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn rio_filter_diagnostics_json(filter: *const RioFilter, out: *mut *mut c_char) -> RioStatus {
    guard(|| {
        let Some(f) = filter.as_ref() else {
            return fail(RioStatus::NullPointer, "filter is null");
        };
        if out.is_null() {
            return fail(RioStatus::NullPointer, "out is null");
        }
        let json = f.replay.diagnostics().to_json();
        *out = CString::new(json).expect("JSON has no NULs").into_raw();
        RioStatus::Ok
    })
}

/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rio_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Replay dataset files and write the trajectory CSV, like `rio run`.
/// `radar_ids[i]` names the stream in `radar_paths[i]`. `options` and
/// `diag_path` may be null. A replay that fails midway still writes the
/// partial trajectory and returns the failure.
///
/// # Safety
/// All strings must be NUL-terminated; the two arrays must hold `radar_count`
/// entries each.
#[no_mangle]
pub unsafe extern "C" fn rio_run_files(
    config_path: *const c_char,
    imu_path: *const c_char,
    radar_ids: *const *const c_char,
    radar_paths: *const *const c_char,
    radar_count: usize,
    options: *const RioOptions,
    out_path: *const c_char,
    diag_path: *const c_char,
) -> RioStatus {
    guard(|| {
        let config = tri!(str_arg(config_path, "config_path"));
        let imu = tri!(str_arg(imu_path, "imu_path"));
        let out = tri!(str_arg(out_path, "out_path"));
        if radar_count > 0 && (radar_ids.is_null() || radar_paths.is_null()) {
            return fail(RioStatus::NullPointer, "radar arrays are null");
        }
        let mut radars = Vec::with_capacity(radar_count);
        for i in 0..radar_count {
            let id = tri!(str_arg(*radar_ids.add(i), "radar id"));
            let path = tri!(str_arg(*radar_paths.add(i), "radar path"));
            radars.push((id.to_string(), PathBuf::from(path)));
        }
        let options = if options.is_null() {
            rio_options_default()
        } else {
            *options
        };
        let mut cfg = core!(RunConfig::load(config.as_ref()));
        options.apply(&mut cfg);
        let events = core!(load_dataset(imu.as_ref(), &radars, &cfg));
        let outcome = core!(run_replay(&events, &cfg, options.replay()));
        core!(write_trajectory_file(out.as_ref(), &outcome.trajectory));
        if !diag_path.is_null() {
            let diag = tri!(str_arg(diag_path, "diag_path"));
            core!(std::fs::write(diag, outcome.diagnostics.to_json()).map_err(Error::from));
        }
        match &outcome.error {
            Some(e) => from_error(e),
            None => RioStatus::Ok,
        }
    })
}

/// Metrics of an estimated trajectory file against a reference file.
///
/// # Safety
/// Strings must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn rio_evaluate_files(
    est_path: *const c_char,
    ref_path: *const c_char,
    rate_hz: f64,
    out: *mut RioMetrics,
) -> RioStatus {
    guard(|| {
        let est = tri!(str_arg(est_path, "est_path"));
        let reference = tri!(str_arg(ref_path, "ref_path"));
        let Some(out) = out.as_mut() else {
            return fail(RioStatus::NullPointer, "out is null");
        };
        let est = core!(read_trajectory(est.as_ref()));
        let reference = core!(read_trajectory(reference.as_ref()));
        let m = core!(compute_metrics(&est, &reference, rate_hz));
        *out = RioMetrics {
            ape_rmse: m.ape_rmse,
            rpe_rmse: m.rpe_rmse,
            rre_rmse: m.rre_rmse,
            end_pose_error: m.end_pose_error,
            trajectory_rmse: m.trajectory_rmse,
            samples: m.samples,
        };
        RioStatus::Ok
    })
}
