//! Run configuration, read from TOML.

use std::path::Path;

use nalgebra::{Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::ekf::ProcessNoiseConfig;
use crate::error::{Error, Result};
use crate::feature::{FieldOfView, RadarExtrinsics};
use crate::manager::GatingConfig;
use crate::motion::{GravityModel, NavMatrix, NavState};
use crate::radar::{MeasurementNoise, Sensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadarConfig {
    pub id: String,
    /// Radar origin in the body frame, m.
    pub position: [f64; 3],
    /// Radar orientation in the body frame as roll, pitch, yaw (rad), applied `Rz Ry Rx`.
    pub orientation_rpy: [f64; 3],
    #[serde(default)]
    pub fov: FieldOfView,
    #[serde(default)]
    pub noise: MeasurementNoise,
}

impl RadarConfig {
    pub fn extrinsics(&self) -> RadarExtrinsics {
        let [r, p, y] = self.orientation_rpy;
        RadarExtrinsics::from_mount(r, p, y, Vector3::from(self.position))
    }

    pub fn sensor(&self) -> Sensor {
        Sensor {
            id: self.id.clone(),
            ext: self.extrinsics(),
            fov: self.fov,
            noise: self.noise,
        }
    }
}

/// Initial estimate and its (diagonal) uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialState {
    /// World position, m.
    pub position: [f64; 3],
    /// Body-frame velocity, m/s.
    pub velocity: [f64; 3],
    /// Roll, pitch, yaw of the body in the world frame, rad.
    pub attitude_rpy: [f64; 3],
    pub sigma_velocity: f64,
    /// Per axis of the global attitude error, rad.
    pub sigma_attitude: [f64; 3],
    pub sigma_position: f64,
}

impl Default for InitialState {
    fn default() -> Self {
        Self {
            position: [0.0; 3],
            velocity: [0.0; 3],
            attitude_rpy: [0.0; 3],
            sigma_velocity: 0.01,
            sigma_attitude: [1e-3, 1e-3, 1e-3],
            sigma_position: 1e-3,
        }
    }
}

impl InitialState {
    pub fn nav(&self) -> NavState {
        let [r, p, y] = self.attitude_rpy;
        NavState {
            v: Vector3::from(self.velocity),
            q: nalgebra::UnitQuaternion::from_rotation_matrix(&Rotation3::from_euler_angles(r, p, y)),
            p: Vector3::from(self.position),
        }
    }

    pub fn covariance(&self) -> NavMatrix {
        let mut d = [0.0; 9];
        for i in 0..3 {
            d[i] = self.sigma_velocity.powi(2);
            d[3 + i] = self.sigma_attitude[i].powi(2);
            d[6 + i] = self.sigma_position.powi(2);
        }
        NavMatrix::from_diagonal(&d.into())
    }
}

fn default_capacity() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Recorded with the run; the filter itself draws no random numbers.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_capacity")]
    pub max_features: usize,
    #[serde(default)]
    pub gravity: GravityModel,
    #[serde(default)]
    pub process_noise: ProcessNoiseConfig,
    #[serde(default)]
    pub gating: GatingConfig,
    #[serde(default)]
    pub initial: InitialState,
    #[serde(rename = "radar")]
    pub radars: Vec<RadarConfig>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        if self.radars.is_empty() {
            return Err(Error::Config("at least one [[radar]] is required".into()));
        }
        for (i, r) in self.radars.iter().enumerate() {
            if self.radars[..i].iter().any(|o| o.id == r.id) {
                return Err(Error::Config(format!("duplicate radar id {:?}", r.id)));
            }
            if r.id.is_empty() || !r.id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(Error::Config(format!("radar id {:?} must be [A-Za-z0-9_-]+", r.id)));
            }
            let finite = r.position.iter().chain(&r.orientation_rpy).all(|x| x.is_finite());
            if !finite {
                return Err(Error::Config(format!("radar {:?} has non-finite extrinsics", r.id)));
            }
            let f = &r.fov;
            if !(f.azimuth > 0.0 && f.elevation > 0.0 && f.range_min >= 0.0 && f.range_max > f.range_min) {
                return Err(Error::Config(format!("radar {:?} has an empty field of view", r.id)));
            }
            r.noise.validate()?;
        }
        self.process_noise.validate()?;
        self.gating.validate()?;
        if self.max_features < self.gating.min_features {
            return Err(Error::Config(format!(
                "max_features {} is below gating.min_features {}",
                self.max_features, self.gating.min_features
            )));
        }
        let g = &self.initial;
        let sig = [g.sigma_velocity, g.sigma_position]
            .into_iter()
            .chain(g.sigma_attitude)
            .all(|s| s.is_finite() && s > 0.0);
        if !sig {
            return Err(Error::Config("initial sigmas must be positive".into()));
        }
        if !self.gravity.g_world.iter().all(|x| x.is_finite()) {
            return Err(Error::Config("gravity must be finite".into()));
        }
        Ok(())
    }

    pub fn sensors(&self) -> Vec<Sensor> {
        self.radars.iter().map(RadarConfig::sensor).collect()
    }

    pub fn sensor_index(&self, id: &str) -> Result<usize> {
        self.radars
            .iter()
            .position(|r| r.id == id)
            .ok_or_else(|| Error::UnknownSensor(id.to_string()))
    }

    /// Two corner radars looking ±45° off the vehicle axis.
    pub fn corner_radars() -> Vec<RadarConfig> {
        let corner = |id: &str, side: f64| RadarConfig {
            id: id.into(),
            position: [3.6, 0.8 * side, 0.5],
            orientation_rpy: [0.0, 0.0, 45f64.to_radians() * side],
            fov: FieldOfView::default(),
            noise: MeasurementNoise::default(),
        };
        vec![corner("front_left", 1.0), corner("front_right", -1.0)]
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            max_features: default_capacity(),
            gravity: GravityModel::default(),
            process_noise: ProcessNoiseConfig::default(),
            gating: GatingConfig::default(),
            initial: InitialState::default(),
            radars: Self::corner_radars(),
        }
    }
}
