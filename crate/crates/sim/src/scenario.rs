//! Scenario description: analytic ground-truth motion, landmark box and
//! sensor/noise parameters. Loaded from TOML.
//!
//! ```toml
//! seed = 7
//! duration = 10.0
//! pixel_noise_sigma = 0.5
//! event_threshold_px = 0.4
//! outlier_track_fraction = 0.0
//!
//! [trajectory]
//! kind = "figure_eight"
//! amplitude_x = 1.5
//! amplitude_y = 0.75
//! period = 10.0
//!
//! [landmarks]
//! count = 30
//! min = [-2.5, -1.5, 4.0]
//! max = [2.5, 1.5, 7.0]
//! ```

use std::f64::consts::TAU;
use std::path::Path;

use ctvo_core::{CameraIntrinsics, SE3Pose, Twist};
use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::SimError;

/// Analytic camera-to-world motion. The camera looks along +z; landmarks
/// live in a box in front of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrajectoryKind {
    Stationary,
    /// Constant body twist from the identity pose.
    ConstantVelocity {
        velocity: [f64; 3],
        #[serde(default)]
        angular_velocity: [f64; 3],
    },
    Circle {
        radius: f64,
        period: f64,
        #[serde(default = "default_yaw")]
        yaw_amplitude: f64,
    },
    FigureEight {
        amplitude_x: f64,
        amplitude_y: f64,
        period: f64,
        #[serde(default = "default_yaw")]
        yaw_amplitude: f64,
        #[serde(default = "default_pitch")]
        pitch_amplitude: f64,
    },
    /// Straight line along x with speed `initial_speed · exp(−t / time_constant)`.
    DeceleratingLine { initial_speed: f64, time_constant: f64 },
    /// Repetitive back-and-forth pass with a small lift at the turnarounds
    /// and the camera panning against the motion.
    Ur5Sweep {
        amplitude: f64,
        period: f64,
        #[serde(default = "default_lift")]
        lift: f64,
        #[serde(default = "default_pan")]
        pan_amplitude: f64,
    },
}

fn default_yaw() -> f64 {
    0.15
}

fn default_pitch() -> f64 {
    0.08
}

fn default_lift() -> f64 {
    0.1
}

fn default_pan() -> f64 {
    0.2
}

fn oriented(position: Vector3<f64>, yaw: f64, pitch: f64) -> SE3Pose<f64> {
    let r = Rotation3::from_axis_angle(&Vector3::y_axis(), yaw) * Rotation3::from_axis_angle(&Vector3::x_axis(), pitch);
    SE3Pose::from_parts(*r.matrix(), position)
}

impl TrajectoryKind {
    /// Camera-to-world pose at `t` seconds.
    pub fn pose(&self, t: f64) -> SE3Pose<f64> {
        match *self {
            Self::Stationary => SE3Pose::identity(),
            Self::ConstantVelocity { velocity, angular_velocity } => {
                let xi = Twist::new(Vector3::from(velocity), Vector3::from(angular_velocity)).scale(t);
                SE3Pose::exp(&xi).expect("finite twist")
            }
            Self::Circle { radius, period, yaw_amplitude } => {
                let w = TAU / period;
                let p = Vector3::new(radius * (w * t).cos() - radius, radius * (w * t).sin(), 0.0);
                oriented(p, yaw_amplitude * (w * t).sin(), 0.0)
            }
            Self::FigureEight { amplitude_x, amplitude_y, period, yaw_amplitude, pitch_amplitude } => {
                let w = TAU / period;
                let p = Vector3::new(amplitude_x * (w * t).sin(), amplitude_y * (2.0 * w * t).sin(), 0.0);
                oriented(p, yaw_amplitude * (w * t).sin(), pitch_amplitude * (2.0 * w * t).sin())
            }
            Self::DeceleratingLine { initial_speed, time_constant } => {
                let x = initial_speed * time_constant * (1.0 - (-t / time_constant).exp());
                SE3Pose::from_translation(Vector3::new(x, 0.0, 0.0))
            }
            Self::Ur5Sweep { amplitude, period, lift, pan_amplitude } => {
                let w = TAU / period;
                let p = Vector3::new(
                    amplitude * (w * t).sin(),
                    lift * 0.5 * (1.0 - (2.0 * w * t).cos()),
                    0.1 * amplitude * (2.0 * w * t).sin(),
                );
                oriented(p, -pan_amplitude * (w * t).sin(), 0.0)
            }
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(SimError::Config(format!("trajectory.{name} must be positive")))
            }
        };
        match *self {
            Self::Stationary | Self::ConstantVelocity { .. } => Ok(()),
            Self::Circle { radius, period, .. } => positive("radius", radius).and(positive("period", period)),
            Self::FigureEight { amplitude_x, amplitude_y, period, .. } => positive("amplitude_x", amplitude_x)
                .and(positive("amplitude_y", amplitude_y))
                .and(positive("period", period)),
            Self::DeceleratingLine { initial_speed, time_constant } => {
                positive("initial_speed", initial_speed).and(positive("time_constant", time_constant))
            }
            Self::Ur5Sweep { amplitude, period, .. } => positive("amplitude", amplitude).and(positive("period", period)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandmarkConfig {
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default = "default_min")]
    pub min: [f64; 3],
    #[serde(default = "default_max")]
    pub max: [f64; 3],
    /// Explicit positions; replaces the random box when given.
    #[serde(default)]
    pub points: Option<Vec<[f64; 3]>>,
}

fn default_count() -> usize {
    30
}

fn default_min() -> [f64; 3] {
    [-2.5, -1.5, 4.0]
}

fn default_max() -> [f64; 3] {
    [2.5, 1.5, 7.0]
}

impl Default for LandmarkConfig {
    fn default() -> Self {
        Self { count: default_count(), min: default_min(), max: default_max(), points: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraConfig {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self { fx: 400.0, fy: 400.0, cx: 320.0, cy: 240.0, width: 640.0, height: 480.0 }
    }
}

/// On-disk scenario schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub duration: f64,
    pub trajectory: TrajectoryKind,
    #[serde(default)]
    pub landmarks: LandmarkConfig,
    #[serde(default)]
    pub camera: CameraConfig,
    #[serde(default = "default_noise")]
    pub pixel_noise_sigma: f64,
    #[serde(default = "default_threshold")]
    pub event_threshold_px: f64,
    #[serde(default)]
    pub outlier_track_fraction: f64,
    /// Ground-truth sampling rate, Hz.
    #[serde(default = "default_gt_rate")]
    pub ground_truth_rate: f64,
    /// Grid step used to locate threshold crossings, seconds.
    #[serde(default = "default_resolution")]
    pub time_resolution: f64,
}

fn default_noise() -> f64 {
    0.5
}

fn default_threshold() -> f64 {
    1.0
}

fn default_gt_rate() -> f64 {
    100.0
}

fn default_resolution() -> f64 {
    1e-4
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, SimError> {
        let cfg: Self = toml::from_str(text).map_err(|e| SimError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let checks = [
            ("duration", self.duration > 0.0 && self.duration.is_finite()),
            ("pixel_noise_sigma", self.pixel_noise_sigma >= 0.0 && self.pixel_noise_sigma.is_finite()),
            ("event_threshold_px", self.event_threshold_px > 0.0 && self.event_threshold_px.is_finite()),
            ("outlier_track_fraction", (0.0..=1.0).contains(&self.outlier_track_fraction)),
            ("ground_truth_rate", self.ground_truth_rate > 0.0 && self.ground_truth_rate.is_finite()),
            ("time_resolution", self.time_resolution > 0.0 && self.time_resolution < self.duration),
            ("landmarks.count", self.landmarks.points.is_some() || self.landmarks.count > 0),
            ("landmarks.max", (0..3).all(|i| self.landmarks.max[i] >= self.landmarks.min[i])),
        ];
        if let Some((name, _)) = checks.iter().find(|(_, ok)| !ok) {
            return Err(SimError::Config(format!("invalid value for `{name}`")));
        }
        self.trajectory.validate()?;
        self.intrinsics()?;
        Ok(())
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics<f64>, SimError> {
        let c = self.camera;
        CameraIntrinsics::new(c.fx, c.fy, c.cx, c.cy, c.width, c.height).map_err(|e| SimError::Config(format!("camera: {e}")))
    }

    /// Resolves the random parts (landmark box) into a concrete scenario.
    pub fn build(&self) -> Result<SimScenario, SimError> {
        self.validate()?;
        let landmarks = match &self.landmarks.points {
            Some(points) => points.iter().map(|p| Vector3::from(*p)).collect(),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ LANDMARK_STREAM);
                let (lo, hi) = (self.landmarks.min, self.landmarks.max);
                let mut axis = |i: usize| if hi[i] > lo[i] { rng.random_range(lo[i]..hi[i]) } else { lo[i] };
                (0..self.landmarks.count).map(|_| Vector3::new(axis(0), axis(1), axis(2))).collect()
            }
        };
        Ok(SimScenario {
            trajectory: self.trajectory.clone(),
            landmarks,
            intrinsics: self.intrinsics()?,
            pixel_noise_sigma: self.pixel_noise_sigma,
            event_threshold_px: self.event_threshold_px,
            outlier_track_fraction: self.outlier_track_fraction,
            seed: self.seed,
            duration: self.duration,
            ground_truth_rate: self.ground_truth_rate,
            time_resolution: self.time_resolution,
        })
    }
}

/// Separates the landmark RNG stream from the noise stream.
const LANDMARK_STREAM: u64 = 0x6c61_6e64_6d61_726b;

/// Fully resolved scenario: everything `generate_events` needs.
#[derive(Debug, Clone, PartialEq)]
pub struct SimScenario {
    pub trajectory: TrajectoryKind,
    pub landmarks: Vec<Vector3<f64>>,
    pub intrinsics: CameraIntrinsics<f64>,
    pub pixel_noise_sigma: f64,
    pub event_threshold_px: f64,
    pub outlier_track_fraction: f64,
    pub seed: u64,
    pub duration: f64,
    pub ground_truth_rate: f64,
    pub time_resolution: f64,
}

impl SimScenario {
    pub fn pose(&self, t: f64) -> SE3Pose<f64> {
        self.trajectory.pose(t)
    }

    /// Fraction of ground-truth sample times at which landmark `i` is in
    /// front of the camera.
    pub fn front_fraction(&self, i: usize) -> f64 {
        let n = 200;
        let front = (0..=n)
            .filter(|k| {
                let t = self.duration * *k as f64 / n as f64;
                self.pose(t).inverse().transform_point(&self.landmarks[i]).z > 0.0
            })
            .count();
        front as f64 / (n + 1) as f64
    }

    /// Translational length of the ground-truth path, metres.
    pub fn path_length(&self) -> f64 {
        let n = (self.duration * 1000.0).ceil() as usize;
        (1..=n)
            .map(|k| {
                let (a, b) = ((k - 1) as f64 / n as f64, k as f64 / n as f64);
                (self.pose(b * self.duration).translation() - self.pose(a * self.duration).translation()).norm()
            })
            .sum()
    }
}

/// Built-in scenarios.
pub mod presets {
    use super::*;

    fn base(seed: u64, duration: f64, trajectory: TrajectoryKind) -> ScenarioConfig {
        ScenarioConfig {
            seed,
            duration,
            trajectory,
            landmarks: LandmarkConfig::default(),
            camera: CameraConfig::default(),
            pixel_noise_sigma: default_noise(),
            event_threshold_px: default_threshold(),
            outlier_track_fraction: 0.0,
            ground_truth_rate: default_gt_rate(),
            time_resolution: default_resolution(),
        }
    }

    pub fn circle(seed: u64) -> ScenarioConfig {
        base(seed, 5.0, TrajectoryKind::Circle { radius: 0.75, period: 5.0, yaw_amplitude: default_yaw() })
    }

    pub fn figure_eight(seed: u64) -> ScenarioConfig {
        let mut cfg = base(
            seed,
            10.0,
            TrajectoryKind::FigureEight {
                amplitude_x: 1.5,
                amplitude_y: 0.75,
                period: 10.0,
                yaw_amplitude: default_yaw(),
                pitch_amplitude: default_pitch(),
            },
        );
        cfg.event_threshold_px = 0.4;
        cfg
    }

    pub fn decelerating_line(seed: u64) -> ScenarioConfig {
        base(seed, 5.0, TrajectoryKind::DeceleratingLine { initial_speed: 1.5, time_constant: 1.2 })
    }

    pub fn ur5_sweep(seed: u64) -> ScenarioConfig {
        base(
            seed,
            8.0,
            TrajectoryKind::Ur5Sweep { amplitude: 1.0, period: 4.0, lift: default_lift(), pan_amplitude: default_pan() },
        )
    }

    /// Looks a preset up by name (`circle`, `figure_eight`, `decelerating_line`, `ur5_sweep`).
    pub fn by_name(name: &str, seed: u64) -> Option<ScenarioConfig> {
        Some(match name {
            "circle" => circle(seed),
            "figure_eight" => figure_eight(seed),
            "decelerating_line" => decelerating_line(seed),
            "ur5_sweep" => ur5_sweep(seed),
            _ => return None,
        })
    }
}
