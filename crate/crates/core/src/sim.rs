//! Synthetic ground truth: analytic planar trajectories, IMU synthesis and
//! radar scan rendering over a landmark field.
//!
//! Every trajectory is a path `γ(u)` in the ground plane traversed with a time
//! law `u(t)`, rigidly placed so that it starts at the origin heading along +x.
//! Attitude is yaw-only and follows the path tangent.

use std::f64::consts::FRAC_1_SQRT_2;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{InitialState, RadarConfig, RunConfig};
use crate::ekf::ProcessNoiseConfig;
use crate::error::{Error, Result};
use crate::geometry::{angles_from_vector, log_so3, Quat};
use crate::manager::GatingConfig;
use crate::motion::{rk4_step, GravityModel, ImuSample, NavState, NavVector};
use crate::radar::{RadarDetection, RadarScan};
use crate::trajectory::{Trajectory, TrajectoryPoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TrajectoryKind {
    Straight {
        speed: f64,
    },
    /// Counter-clockwise.
    Circle {
        radius: f64,
        speed: f64,
    },
    /// Lemniscate of Gerono of half-width `scale`, traversed at a constant
    /// parameter rate; `speed` is the peak speed, reached at the crossing.
    FigureEight {
        scale: f64,
        speed: f64,
    },
    /// Natural cubic spline through the waypoints, driven rest-to-rest with a
    /// quintic time law after `standstill` seconds at rest.
    Parking {
        waypoints: Vec<[f64; 2]>,
        max_speed: f64,
        standstill: f64,
    },
}

impl TrajectoryKind {
    /// A forward-left parking maneuver of about 15 m.
    pub fn parking() -> Self {
        TrajectoryKind::Parking {
            waypoints: vec![[0.0, 0.0], [4.5, 0.0], [8.5, 1.2], [11.0, 3.6], [12.0, 6.6]],
            max_speed: 2.0,
            standstill: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandmarkSpec {
    pub count: usize,
    pub box_min: [f64; 3],
    pub box_max: [f64; 3],
    /// Minimum distance to the vehicle path, m.
    pub clearance: f64,
    /// Fraction of landmarks that move at constant horizontal velocity.
    pub mover_fraction: f64,
    /// Mover speed range, m/s.
    pub mover_speed: [f64; 2],
}

impl Default for LandmarkSpec {
    fn default() -> Self {
        Self {
            count: 200,
            box_min: [-12.0, -20.0, -1.5],
            box_max: [28.0, 20.0, 2.5],
            clearance: 1.0,
            mover_fraction: 0.0,
            mover_speed: [1.0, 3.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimNoise {
    /// Off: ideal IMU and detections. Radar noise levels come from each radar's config.
    pub enabled: bool,
    /// Accelerometer white-noise density, m/s²/√Hz.
    pub sigma_a: f64,
    /// Gyro white-noise density, rad/s/√Hz.
    pub sigma_w: f64,
}

impl Default for SimNoise {
    fn default() -> Self {
        Self {
            enabled: false,
            sigma_a: 0.02,
            sigma_w: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub trajectory: TrajectoryKind,
    pub duration: f64,
    #[serde(default = "default_imu_rate")]
    pub imu_rate: f64,
    #[serde(default = "default_radar_rate")]
    pub radar_rate: f64,
    #[serde(default)]
    pub landmarks: LandmarkSpec,
    #[serde(rename = "radar", default = "RunConfig::corner_radars")]
    pub radars: Vec<RadarConfig>,
    #[serde(default)]
    pub noise: SimNoise,
    #[serde(default)]
    pub gravity: GravityModel,
    #[serde(default)]
    pub seed: u64,
}

fn default_imu_rate() -> f64 {
    100.0
}

fn default_radar_rate() -> f64 {
    15.0
}

impl ScenarioSpec {
    pub fn new(trajectory: TrajectoryKind, duration: f64) -> Self {
        Self {
            trajectory,
            duration,
            imu_rate: default_imu_rate(),
            radar_rate: default_radar_rate(),
            landmarks: LandmarkSpec::default(),
            radars: RunConfig::corner_radars(),
            noise: SimNoise::default(),
            gravity: GravityModel::default(),
            seed: 0,
        }
    }

    /// The desk-scale parking benchmark: 15 m, ≤ 2 m/s, two corner radars, 200 landmarks.
    pub fn parking() -> Self {
        Self::new(TrajectoryKind::parking(), 17.0)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad("duration must be positive");
        }
        if !(self.imu_rate > 0.0 && self.radar_rate > 0.0) {
            return bad("rates must be positive");
        }
        match &self.trajectory {
            TrajectoryKind::Straight { speed } if !(*speed >= 0.0) => return bad("speed must be non-negative"),
            TrajectoryKind::Circle { radius, speed } if !(*radius > 0.0 && *speed >= 0.0) => {
                return bad("circle needs radius > 0 and speed >= 0")
            }
            TrajectoryKind::FigureEight { scale, speed } if !(*scale > 0.0 && *speed >= 0.0) => {
                return bad("figure-eight needs scale > 0 and speed >= 0")
            }
            TrajectoryKind::Parking {
                waypoints,
                max_speed,
                standstill,
            } => {
                if !(*max_speed > 0.0 && *max_speed <= 3.0) {
                    return bad("parking max_speed must be in (0, 3] m/s");
                }
                if !(*standstill >= 0.0) {
                    return bad("standstill must be non-negative");
                }
                if waypoints.len() < 2 || waypoints.windows(2).any(|w| w[0] == w[1]) {
                    return bad("parking needs at least two distinct consecutive waypoints");
                }
            }
            _ => {}
        }
        let l = &self.landmarks;
        if !(0.0..=1.0).contains(&l.mover_fraction)
            || !(l.mover_speed[0] >= 0.0 && l.mover_speed[1] >= l.mover_speed[0])
        {
            return bad("invalid mover settings");
        }
        if (0..3).any(|i| !(l.box_max[i] > l.box_min[i])) {
            return bad("landmark box is empty");
        }
        RunConfig {
            radars: self.radars.clone(),
            ..Default::default()
        }
        .validate()
    }
}

/// Ground-plane path with its first two derivatives in the path parameter.
#[derive(Debug, Clone)]
enum PathShape {
    Line,
    Circle { radius: f64 },
    Gerono { a: f64 },
    Spline(NaturalSpline),
}

impl PathShape {
    fn eval(&self, u: f64) -> [Vector2<f64>; 3] {
        match self {
            PathShape::Line => [Vector2::new(u, 0.0), Vector2::new(1.0, 0.0), Vector2::zeros()],
            PathShape::Circle { radius: r } => {
                let (s, c) = (u / r).sin_cos();
                [
                    Vector2::new(r * s, r * (1.0 - c)),
                    Vector2::new(c, s),
                    Vector2::new(-s / r, c / r),
                ]
            }
            PathShape::Gerono { a } => {
                let (s, c) = u.sin_cos();
                let (s2, c2) = (2.0 * u).sin_cos();
                [
                    Vector2::new(a * s, 0.5 * a * s2),
                    Vector2::new(a * c, a * c2),
                    Vector2::new(-a * s, -2.0 * a * s2),
                ]
            }
            PathShape::Spline(sp) => sp.eval(u),
        }
    }

    fn knots(&self) -> &[f64] {
        match self {
            PathShape::Spline(sp) => &sp.knots,
            _ => &[],
        }
    }
}

/// Natural cubic spline in the plane, parameterized by cumulative chord length.
#[derive(Debug, Clone)]
struct NaturalSpline {
    knots: Vec<f64>,
    points: Vec<Vector2<f64>>,
    /// Second derivatives at the knots.
    m: Vec<Vector2<f64>>,
}

impl NaturalSpline {
    fn new(waypoints: &[[f64; 2]]) -> Self {
        let points: Vec<Vector2<f64>> = waypoints.iter().map(|w| Vector2::new(w[0], w[1])).collect();
        let mut knots = vec![0.0];
        for w in points.windows(2) {
            knots.push(knots.last().unwrap() + (w[1] - w[0]).norm());
        }
        let n = points.len() - 1;
        let mut m = vec![Vector2::zeros(); n + 1];
        if n >= 2 {
            // Thomas algorithm on the interior knots.
            let h: Vec<f64> = knots.windows(2).map(|k| k[1] - k[0]).collect();
            let mut diag = vec![0.0; n + 1];
            let mut rhs = vec![Vector2::zeros(); n + 1];
            for i in 1..n {
                diag[i] = 2.0 * (h[i - 1] + h[i]);
                rhs[i] = 6.0 * ((points[i + 1] - points[i]) / h[i] - (points[i] - points[i - 1]) / h[i - 1]);
            }
            for i in 2..n {
                let w = h[i - 1] / diag[i - 1];
                diag[i] -= w * h[i - 1];
                rhs[i] = rhs[i] - rhs[i - 1] * w;
            }
            for i in (1..n).rev() {
                m[i] = (rhs[i] - m[i + 1] * h[i]) / diag[i];
            }
        }
        Self { knots, points, m }
    }

    fn length_param(&self) -> f64 {
        *self.knots.last().unwrap()
    }

    fn eval(&self, u: f64) -> [Vector2<f64>; 3] {
        let u = u.clamp(0.0, self.length_param());
        let i = self.knots.partition_point(|k| *k <= u).clamp(1, self.knots.len() - 1) - 1;
        let h = self.knots[i + 1] - self.knots[i];
        let (a, b) = (self.knots[i + 1] - u, u - self.knots[i]);
        let (m0, m1) = (self.m[i], self.m[i + 1]);
        let c0 = self.points[i] / h - m0 * (h / 6.0);
        let c1 = self.points[i + 1] / h - m1 * (h / 6.0);
        [
            m0 * (a.powi(3) / (6.0 * h)) + m1 * (b.powi(3) / (6.0 * h)) + c0 * a + c1 * b,
            -m0 * (a * a / (2.0 * h)) + m1 * (b * b / (2.0 * h)) - c0 + c1,
            m0 * (a / h) + m1 * (b / h),
        ]
    }
}

/// `u(t)` with its first two derivatives.
#[derive(Debug, Clone, Copy)]
enum TimeLaw {
    Linear {
        rate: f64,
    },
    /// Quintic from 0 to `span` over `[t0, t0 + duration]`, constant outside.
    RestToRest {
        t0: f64,
        duration: f64,
        span: f64,
    },
}

impl TimeLaw {
    fn eval(&self, t: f64) -> [f64; 3] {
        match *self {
            TimeLaw::Linear { rate } => [rate * t, rate, 0.0],
            TimeLaw::RestToRest { t0, duration, span } => {
                let tau = ((t - t0) / duration).clamp(0.0, 1.0);
                if tau <= 0.0 || tau >= 1.0 {
                    return [if tau >= 1.0 { span } else { 0.0 }, 0.0, 0.0];
                }
                let (t2, t3) = (tau * tau, tau * tau * tau);
                let s = t3 * (10.0 - 15.0 * tau + 6.0 * t2);
                let ds = 30.0 * t2 * (1.0 - 2.0 * tau + t2);
                let dds = 60.0 * tau * (1.0 - 3.0 * tau + 2.0 * t2);
                [span * s, span * ds / duration, span * dds / (duration * duration)]
            }
        }
    }

    /// Inverse of a non-decreasing `u(t)` on `[lo, hi]`, by bisection.
    fn time_of(&self, u: f64, mut lo: f64, mut hi: f64) -> f64 {
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.eval(mid)[0] < u {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// True vehicle state at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthState {
    pub t: f64,
    pub p: Vector3<f64>,
    /// World frame.
    pub v: Vector3<f64>,
    /// World frame.
    pub a: Vector3<f64>,
    pub q: Quat,
    /// Body rate, rad/s.
    pub omega: Vector3<f64>,
}

impl TruthState {
    pub fn body_velocity(&self) -> Vector3<f64> {
        self.q.inverse_transform_vector(&self.v)
    }

    /// Specific force in the body frame.
    pub fn specific_force(&self, gravity: &GravityModel) -> Vector3<f64> {
        self.q.inverse_transform_vector(&(self.a - gravity.vector()))
    }
}

/// Closed-form motion of a scenario.
#[derive(Debug, Clone)]
pub struct Motion {
    shape: PathShape,
    law: TimeLaw,
    /// Rotation and offset placing the path start at the origin, heading +x.
    rot: nalgebra::Rotation2<f64>,
    offset: Vector2<f64>,
    breakpoints: Vec<f64>,
}

impl Motion {
    pub fn new(spec: &ScenarioSpec) -> Result<Self> {
        spec.validate()?;
        let (shape, law) = match &spec.trajectory {
            TrajectoryKind::Straight { speed } => (PathShape::Line, TimeLaw::Linear { rate: *speed }),
            TrajectoryKind::Circle { radius, speed } => {
                (PathShape::Circle { radius: *radius }, TimeLaw::Linear { rate: *speed })
            }
            TrajectoryKind::FigureEight { scale, speed } => (
                PathShape::Gerono { a: *scale },
                // |γ'| peaks at a√2 where the lobes cross.
                TimeLaw::Linear {
                    rate: speed / scale * FRAC_1_SQRT_2,
                },
            ),
            TrajectoryKind::Parking {
                waypoints,
                max_speed,
                standstill,
            } => {
                let spline = NaturalSpline::new(waypoints);
                let span = spline.length_param();
                // Scale the maneuver time so the peak speed is exactly max_speed.
                let peak = (0..=4000)
                    .map(|k| {
                        let tau = k as f64 / 4000.0;
                        let law = TimeLaw::RestToRest {
                            t0: 0.0,
                            duration: 1.0,
                            span,
                        };
                        let [u, du, _] = law.eval(tau);
                        spline.eval(u)[1].norm() * du
                    })
                    .fold(0.0, f64::max);
                let duration = peak / max_speed;
                if standstill + duration > spec.duration {
                    return Err(Error::Config(format!(
                        "parking maneuver needs {:.2} s but the scenario lasts {} s",
                        standstill + duration,
                        spec.duration
                    )));
                }
                (
                    PathShape::Spline(spline),
                    TimeLaw::RestToRest {
                        t0: *standstill,
                        duration,
                        span,
                    },
                )
            }
        };
        let [p0, d0, _] = shape.eval(0.0);
        let rot = nalgebra::Rotation2::new(-d0.y.atan2(d0.x));
        let mut motion = Self {
            shape,
            law,
            rot,
            offset: -(rot * p0),
            breakpoints: Vec::new(),
        };
        if let TimeLaw::RestToRest { t0, duration, .. } = law {
            motion.breakpoints.push(t0);
            motion.breakpoints.push(t0 + duration);
            for &k in &motion.shape.knots()[1..motion.shape.knots().len() - 1] {
                motion.breakpoints.push(law.time_of(k, t0, t0 + duration));
            }
            motion.breakpoints.sort_by(f64::total_cmp);
        }
        Ok(motion)
    }

    /// Times where the inputs are not smooth; quadrature splits here.
    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn state(&self, t: f64) -> TruthState {
        let [u, du, ddu] = self.law.eval(t);
        let [g, dg, ddg] = self.shape.eval(u);
        let (g, dg, ddg) = (self.rot * g + self.offset, self.rot * dg, self.rot * ddg);
        let v = dg * du;
        let a = ddg * (du * du) + dg * ddu;
        let yaw = dg.y.atan2(dg.x);
        let yaw_rate = (dg.x * ddg.y - dg.y * ddg.x) / dg.norm_squared() * du;
        TruthState {
            t,
            p: Vector3::new(g.x, g.y, 0.0),
            v: Vector3::new(v.x, v.y, 0.0),
            a: Vector3::new(a.x, a.y, 0.0),
            q: UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw),
            omega: Vector3::new(0.0, 0.0, yaw_rate),
        }
    }

    /// Path length travelled over `[0, t]`, by quadrature.
    pub fn distance(&self, t: f64) -> f64 {
        integrate(0.0, t, &self.breakpoints, |s| {
            Vector3::new(self.state(s).v.norm(), 0.0, 0.0)
        })
        .x
    }
}

const GL_NODES: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683,
    0.0,
    0.538_469_310_105_683,
    0.906_179_845_938_664,
];
const GL_WEIGHTS: [f64; 5] = [
    0.236_926_885_056_189,
    0.478_628_670_499_366,
    0.568_888_888_888_889,
    0.478_628_670_499_366,
    0.236_926_885_056_189,
];

/// Gauss–Legendre quadrature of `f` over `[a, b]`, split at breakpoints and
/// into four panels per piece.
fn integrate(a: f64, b: f64, breakpoints: &[f64], f: impl Fn(f64) -> Vector3<f64>) -> Vector3<f64> {
    let mut cuts = vec![a];
    cuts.extend(breakpoints.iter().copied().filter(|x| *x > a && *x < b));
    cuts.push(b);
    let mut total = Vector3::zeros();
    for w in cuts.windows(2) {
        let panels = 4;
        let h = (w[1] - w[0]) / panels as f64;
        for k in 0..panels {
            let (lo, hi) = (w[0] + k as f64 * h, w[0] + (k + 1) as f64 * h);
            let (mid, half) = (0.5 * (lo + hi), 0.5 * (hi - lo));
            for (x, wt) in GL_NODES.iter().zip(GL_WEIGHTS) {
                total += f(mid + half * x) * (wt * half);
            }
        }
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmark {
    pub id: usize,
    /// World position at t = 0.
    pub p: Vector3<f64>,
    /// World velocity; zero for static landmarks.
    pub v: Vector3<f64>,
}

impl Landmark {
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.p + self.v * t
    }

    pub fn is_mover(&self) -> bool {
        self.v != Vector3::zeros()
    }
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// At the IMU sample times.
    pub states: Vec<TruthState>,
    pub landmarks: Vec<Landmark>,
}

impl GroundTruth {
    pub fn trajectory(&self) -> Trajectory {
        Trajectory {
            points: self
                .states
                .iter()
                .map(|s| TrajectoryPoint {
                    t: s.t,
                    p: s.p,
                    q: s.q,
                    v: s.v,
                    sigma: None,
                })
                .collect(),
        }
    }
}

/// A rendered scan and, per detection, the index of the landmark it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScan {
    pub scan: RadarScan,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: ScenarioSpec,
    pub truth: GroundTruth,
    pub imu: Vec<ImuSample>,
    /// Sorted by time, then sensor. Empty scans are omitted.
    pub scans: Vec<LabeledScan>,
}

fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

fn sample_times(duration: f64, rate: f64, phase: f64) -> impl Iterator<Item = f64> {
    let n = ((duration * rate - phase) + 1e-9).floor().max(-1.0) as i64;
    (0..=n).map(move |k| (k as f64 + phase) / rate)
}

/// Ground truth at the IMU rate plus the landmark field.
pub fn generate_trajectory(spec: &ScenarioSpec) -> Result<(Motion, GroundTruth)> {
    let motion = Motion::new(spec)?;
    let states: Vec<TruthState> = sample_times(spec.duration, spec.imu_rate, 0.0)
        .map(|t| motion.state(t))
        .collect();
    let landmarks = place_landmarks(spec, &motion);
    Ok((motion, GroundTruth { states, landmarks }))
}

fn place_landmarks(spec: &ScenarioSpec, motion: &Motion) -> Vec<Landmark> {
    let l = &spec.landmarks;
    let mut rng = stream(spec.seed, 1);
    let path: Vec<Vector3<f64>> = sample_times(spec.duration, 10.0, 0.0)
        .map(|t| motion.state(t).p)
        .collect();
    let n_movers = (l.count as f64 * l.mover_fraction).round() as usize;
    let mut out = Vec::with_capacity(l.count);
    while out.len() < l.count {
        let p = Vector3::from_fn(|i, _| rng.random_range(l.box_min[i]..l.box_max[i]));
        if path.iter().any(|q| (p - q).norm() < l.clearance) {
            continue;
        }
        let v = if out.len() < n_movers {
            let speed = if l.mover_speed[1] > l.mover_speed[0] {
                rng.random_range(l.mover_speed[0]..l.mover_speed[1])
            } else {
                l.mover_speed[0]
            };
            let heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            Vector3::new(speed * heading.cos(), speed * heading.sin(), 0.0)
        } else {
            Vector3::zeros()
        };
        out.push(Landmark { id: out.len(), p, v });
    }
    out
}

/// Ideal IMU samples for a held-input mechanization.
///
/// Sample k is held over `[t_k, t_k + 1/rate]`. Its rate is the exact mean
/// body rate over that interval. Its specific force is the value for which one
/// RK4 step of the mechanization, started from the previous step's result,
/// lands on the true position at the end of the interval. Positions and
/// attitudes of the noise-free mechanization therefore match the truth to
/// round-off; the velocity carries a bounded O(dt²) sawtooth instead.
/// White noise is added afterwards when enabled.
pub fn synthesize_imu(spec: &ScenarioSpec, motion: &Motion, gt: &GroundTruth) -> Vec<ImuSample> {
    let dt = 1.0 / spec.imu_rate;
    let mut rng = stream(spec.seed, 2);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let (sa, sw) = if spec.noise.enabled {
        (spec.noise.sigma_a / dt.sqrt(), spec.noise.sigma_w / dt.sqrt())
    } else {
        (0.0, 0.0)
    };
    let Some(s0) = gt.states.first() else { return Vec::new() };
    let mut nav = NavState {
        v: s0.body_velocity(),
        q: s0.q,
        p: s0.p,
    };
    gt.states
        .iter()
        .map(|s| {
            let end = motion.state(s.t + dt);
            let w = log_so3(&(nav.q.inverse() * end.q)) / dt;
            let mean = integrate(s.t, s.t + dt, motion.breakpoints(), |t| {
                motion.state(t).specific_force(&spec.gravity)
            }) / dt;
            let f = position_consistent_force(&nav, &end.p, s.t, &w, mean, dt, &spec.gravity);
            let ideal = ImuSample::new(s.t, f, w);
            nav = rk4_step(&nav, &ideal, dt, &spec.gravity).0;
            let mut noise = || Vector3::from_fn(|_, _| unit.sample(&mut rng));
            let (na, nw) = (noise(), noise());
            if spec.noise.enabled {
                ImuSample::new(s.t, f + na * sa, w + nw * sw)
            } else {
                ideal
            }
        })
        .collect()
}

/// Newton on the (affine) map from held specific force to end position.
fn position_consistent_force(
    nav: &NavState,
    target: &Vector3<f64>,
    t: f64,
    w: &Vector3<f64>,
    guess: Vector3<f64>,
    dt: f64,
    gravity: &GravityModel,
) -> Vector3<f64> {
    let p_end = |f: &Vector3<f64>| rk4_step(nav, &ImuSample::new(t, *f, *w), dt, gravity).0.p;
    let mut f = guess;
    for _ in 0..2 {
        let p0 = p_end(&f);
        let jac = Matrix3::from_columns(&[0, 1, 2].map(|i| p_end(&(f + Vector3::ith(i, 1.0))) - p0));
        match jac.lu().solve(&(target - p0)) {
            Some(step) => f += step,
            None => break,
        }
    }
    f
}

/// Detections of every landmark inside each sensor's field of view.
///
/// Sensors scan at the same rate with evenly staggered phases.
pub fn render_scans(spec: &ScenarioSpec, motion: &Motion, landmarks: &[Landmark]) -> Vec<LabeledScan> {
    let mut rng = stream(spec.seed, 3);
    let sensors: Vec<_> = spec.radars.iter().map(RadarConfig::sensor).collect();
    let n = sensors.len() as f64;
    let mut scans = Vec::new();
    for k in 0..sensors.len() {
        for t in sample_times(spec.duration, spec.radar_rate, k as f64 / n) {
            scans.push((t, k));
        }
    }
    scans.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut out = Vec::with_capacity(scans.len());
    for (t, k) in scans {
        let sensor = &sensors[k];
        let s = motion.state(t);
        let r_wb: Matrix3<f64> = s.q.to_rotation_matrix().into_inner();
        let r_rb = sensor.ext.r_rb;
        let v_r = r_rb * (s.body_velocity() + s.omega.cross(&sensor.ext.lever_arm));
        let noise = &sensor.noise;
        let mut detections = Vec::new();
        for lm in landmarks {
            let p_r = r_rb * (r_wb.transpose() * (lm.at(t) - s.p) - sensor.ext.lever_arm);
            if !sensor.fov.contains(&p_r) {
                continue;
            }
            let range = p_r.norm();
            let u = p_r / range;
            let v_rel = v_r - r_rb * (r_wb.transpose() * lm.v);
            let (az, el) = angles_from_vector(&p_r);
            let mut d = RadarDetection {
                azimuth: az,
                elevation: el,
                range,
                doppler: -u.dot(&v_rel),
                snr: None,
            };
            if spec.noise.enabled {
                let mut g = |sigma: f64| sigma * Normal::new(0.0, 1.0).expect("unit normal").sample(&mut rng);
                d.azimuth += g(noise.sigma_az);
                d.elevation += g(noise.sigma_el);
                d.range += g(noise.sigma_range);
                d.doppler += g(noise.sigma_doppler);
            }
            detections.push((d, lm.id));
        }
        if detections.is_empty() {
            continue;
        }
        detections.shuffle(&mut rng);
        let (detections, labels) = detections.into_iter().unzip();
        out.push(LabeledScan {
            scan: RadarScan {
                t,
                sensor: k,
                detections,
            },
            labels,
        });
    }
    out
}

pub fn simulate(spec: &ScenarioSpec) -> Result<Dataset> {
    let (motion, truth) = generate_trajectory(spec)?;
    let imu = synthesize_imu(spec, &motion, &truth);
    let scans = render_scans(spec, &motion, &truth.landmarks);
    Ok(Dataset {
        spec: spec.clone(),
        truth,
        imu,
        scans,
    })
}

impl Dataset {
    /// Filter configuration matching the simulated sensors, initialized at the true start.
    pub fn run_config(&self) -> RunConfig {
        let s0 = &self.truth.states[0];
        let (roll, pitch, yaw) = s0.q.euler_angles();
        RunConfig {
            seed: self.spec.seed,
            max_features: 50,
            gravity: self.spec.gravity,
            process_noise: ProcessNoiseConfig {
                sigma_a: self.spec.noise.sigma_a,
                sigma_w: self.spec.noise.sigma_w,
                ..ProcessNoiseConfig::default()
            },
            gating: GatingConfig::default(),
            initial: InitialState {
                position: s0.p.into(),
                velocity: s0.body_velocity().into(),
                attitude_rpy: [roll, pitch, yaw],
                ..InitialState::default()
            },
            radars: self.spec.radars.clone(),
        }
    }

    /// [`Dataset::run_config`] with the initial estimate drawn from its own
    /// prior around the truth (RNG stream 4), as a Monte-Carlo run needs.
    pub fn perturbed_run_config(&self) -> RunConfig {
        let mut cfg = self.run_config();
        let init = cfg.initial;
        let mut rng = stream(self.spec.seed, 4);
        let sigmas = init.covariance().diagonal().map(f64::sqrt);
        let dx = NavVector::from_fn(|i, _| sigmas[i] * Normal::new(0.0, 1.0).expect("unit normal").sample(&mut rng));
        let nav = init.nav().boxplus(&dx);
        let (roll, pitch, yaw) = nav.q.euler_angles();
        cfg.initial = InitialState {
            position: nav.p.into(),
            velocity: nav.v.into(),
            attitude_rpy: [roll, pitch, yaw],
            ..init
        };
        cfg
    }

    pub fn radar_scans(&self) -> Vec<RadarScan> {
        self.scans.iter().map(|s| s.scan.clone()).collect()
    }

    /// Writes `imu.csv`, `radar_<id>.csv` per sensor, `gt.csv`,
    /// `landmarks.csv` and `config.toml` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<DatasetFiles> {
        fs::create_dir_all(dir)?;
        let files = DatasetFiles::in_dir(dir, &self.spec.radars);
        crate::io::write_imu(BufWriter::new(fs::File::create(&files.imu)?), &self.imu)?;
        for (k, (_, path)) in files.radars.iter().enumerate() {
            let scans: Vec<RadarScan> = self
                .scans
                .iter()
                .filter(|s| s.scan.sensor == k)
                .map(|s| s.scan.clone())
                .collect();
            crate::io::write_radar(BufWriter::new(fs::File::create(path)?), &scans)?;
        }
        crate::io::write_trajectory_file(&files.ground_truth, &self.truth.trajectory())?;
        let mut wtr = csv::Writer::from_path(&files.landmarks).map_err(|e| Error::InvalidInput(e.to_string()))?;
        let rows = std::iter::once(["id", "x", "y", "z", "vx", "vy", "vz"].map(String::from)).chain(
            self.truth
                .landmarks
                .iter()
                .map(|l| [l.id as f64, l.p.x, l.p.y, l.p.z, l.v.x, l.v.y, l.v.z].map(|x| format!("{x}"))),
        );
        for row in rows {
            wtr.write_record(&row).map_err(|e| Error::InvalidInput(e.to_string()))?;
        }
        wtr.flush()?;
        fs::write(&files.config, self.run_config().to_toml())?;
        Ok(files)
    }
}

/// Paths of a dataset directory.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFiles {
    pub imu: PathBuf,
    pub radars: Vec<(String, PathBuf)>,
    pub ground_truth: PathBuf,
    pub landmarks: PathBuf,
    pub config: PathBuf,
}

impl DatasetFiles {
    pub fn in_dir(dir: &Path, radars: &[RadarConfig]) -> Self {
        Self {
            imu: dir.join("imu.csv"),
            radars: radars
                .iter()
                .map(|r| (r.id.clone(), dir.join(format!("radar_{}.csv", r.id))))
                .collect(),
            ground_truth: dir.join("gt.csv"),
            landmarks: dir.join("landmarks.csv"),
            config: dir.join("config.toml"),
        }
    }
}
