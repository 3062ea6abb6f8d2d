//! Run configuration (TOML).
//!
//! ```toml
//! output_dir = "runs/fig8"
//!
//! [input]
//! scenario = "scenarios/figure_eight.toml"
//! # or: events = "events.txt" and optionally ground_truth = "gt.txt"
//!
//! [engine]
//! state_insertion_period = 0.05
//!
//! [initializer]
//! kind = "sim_assisted"
//!
//! [baseline]
//! batching = { fixed_duration = 0.1 }
//! ```

use std::path::{Path, PathBuf};

use ctvo_core::engine::{RandomDepthInitializer, SimAssistedInitializer, TwoViewInitializer};
use ctvo_core::EstimatorConfig;
use ctvo_sim::baseline::BaselineConfig;
use ctvo_sim::scenario::CameraConfig;
use ctvo_sim::Batching;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    pub scenario: Option<PathBuf>,
    pub events: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitializerConfig {
    /// Second bootstrap pose from ground truth plus uniform jitter.
    SimAssisted {
        #[serde(default)]
        translation_noise: f64,
        #[serde(default)]
        rotation_noise_deg: f64,
    },
    /// No ground truth needed; `baseline` sets the map scale.
    RandomDepth { depth: f64, jitter: f64, baseline: f64 },
}

impl Default for InitializerConfig {
    fn default() -> Self {
        Self::SimAssisted { translation_noise: 0.0, rotation_noise_deg: 0.0 }
    }
}

impl InitializerConfig {
    /// `truth` is required by the simulator-assisted variant.
    pub fn build(
        &self,
        truth: Option<ctvo_core::engine::PoseOracle<f64>>,
        seed: u64,
    ) -> Result<Box<dyn TwoViewInitializer<f64>>, CliError> {
        Ok(match *self {
            Self::SimAssisted { translation_noise, rotation_noise_deg } => {
                let truth = truth.ok_or_else(|| {
                    CliError::Config("initializer.kind = \"sim_assisted\" needs ground truth".into())
                })?;
                Box::new(SimAssistedInitializer::new(truth, translation_noise, rotation_noise_deg, seed))
            }
            Self::RandomDepth { depth, jitter, baseline } => {
                Box::new(RandomDepthInitializer::new(depth, jitter, baseline, seed))
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineRunConfig {
    pub batching: Batching,
    #[serde(default)]
    pub ba: BaselineConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub input: InputConfig,
    #[serde(default)]
    pub engine: EstimatorConfig,
    #[serde(default)]
    pub initializer: InitializerConfig,
    pub baseline: Option<BaselineRunConfig>,
    /// Sensor model for `events` input; scenarios carry their own.
    #[serde(default)]
    pub camera: CameraConfig,
    pub output_dir: PathBuf,
    /// Seeds the initializer; scenario inputs carry their own seed.
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Relative input paths are resolved against the config file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.input.scenario, &mut cfg.input.events, &mut cfg.input.ground_truth].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        match (&self.input.scenario, &self.input.events) {
            (Some(_), Some(_)) => {
                return Err(CliError::Config("input: give either `scenario` or `events`, not both".into()))
            }
            (None, None) => return Err(CliError::Config("input: one of `scenario` or `events` is required".into())),
            (Some(_), None) if self.input.ground_truth.is_some() => {
                return Err(CliError::Config("input.ground_truth only applies to `events` input".into()))
            }
            _ => {}
        }
        self.engine.validate().map_err(|e| CliError::Config(format!("engine: {e}")))?;
        if let Some(b) = &self.baseline {
            let ok = match b.batching {
                Batching::FixedDuration(dt) => dt > 0.0 && dt.is_finite(),
                Batching::FixedCount(n) => n > 0,
            };
            if !ok {
                return Err(CliError::Config("invalid value for `baseline.batching`".into()));
            }
        }
        Ok(())
    }
}
