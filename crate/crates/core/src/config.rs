//! Experiment configuration: one flat JSON object, plus `key=value`
//! overrides applied on top.
//!
//! All randomness comes from two seeds. `plant_seed` draws the plant (or
//! `θ*` for a realizable plant) and `weight_seed_base` starts the sequence of
//! initial-weight seeds.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::control::{AdaptationLaw, Gains};
use crate::error::{Error, Result};
use crate::monte_carlo::PlantSelection;
use crate::plant::{sample_plant, sample_realizable_plant, PlantInstance};
use crate::resnet::{Activation, ResNetSpec};
use crate::rng::SimRng;
use crate::sim::{Integrator, SimConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub n: usize,
    pub num_blocks: usize,
    pub hidden_layers_per_block: usize,
    pub width: usize,
    pub activation: Activation,
    pub shortcut: bool,
    pub init_low: f64,
    pub init_high: f64,

    pub sigma_e: f64,
    pub sigma_s: f64,
    pub sigma_theta: f64,
    pub gamma: f64,
    pub law: AdaptationLaw,

    pub dt: f64,
    pub horizon_s: f64,
    pub integrator: Integrator,
    pub boundary_layer: Option<f64>,
    pub decimation: usize,
    pub snapshot_interval: f64,
    /// Weight indices written to the snapshot CSV.
    pub snapshot_indices: Vec<usize>,

    pub plant_seed: u64,
    pub weight_seed_base: u64,
    /// Replace the drift by the controller's own network at `θ*`.
    pub realizable: bool,
    /// `θ* ~ U[-b, b)`.
    pub realizable_bound: f64,
    /// Resample the plant for every Monte Carlo run.
    pub per_run_plant: bool,
    /// Load `A`, `x0`, `ω` from CSV instead of sampling.
    pub plant_file: Option<PathBuf>,

    pub runs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let sim = SimConfig::benchmark_default();
        let gains = Gains::default();
        Self {
            n: 10,
            num_blocks: 20,
            hidden_layers_per_block: 1,
            width: 10,
            activation: Activation::Tanh,
            shortcut: true,
            init_low: sim.init_low,
            init_high: sim.init_high,
            sigma_e: gains.sigma_e,
            sigma_s: gains.sigma_s,
            sigma_theta: gains.sigma_theta,
            gamma: gains.gamma,
            law: AdaptationLaw::Sliding,
            dt: sim.dt,
            horizon_s: sim.horizon,
            integrator: sim.integrator,
            boundary_layer: None,
            decimation: 1,
            snapshot_interval: sim.snapshot_interval,
            snapshot_indices: (0..10).map(|i| i * 397).collect(),
            plant_seed: 1,
            weight_seed_base: 0,
            realizable: false,
            realizable_bound: 0.05,
            per_run_plant: false,
            plant_file: None,
            runs: 100,
        }
    }
}

fn parse_error(source: &str, e: &serde_json::Error) -> Error {
    Error::InvalidConfig(format!("{source}:{}:{}: {e}", e.line(), e.column()))
}

impl ExperimentConfig {
    /// Parses JSON text; `source` names it in error messages.
    pub fn from_json(text: &str, source: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| parse_error(source, &e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `key=value` overrides. The value is read as JSON when it
    /// parses, otherwise as a bare string, so `law=emod` and `dt=0.01` both
    /// work.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let Value::Object(mut map) = serde_json::to_value(self).expect("config serializes") else {
            unreachable!("config is an object")
        };
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("override `{item}` is not key=value"))
            })?;
            let key = key.trim();
            if !map.contains_key(key) {
                return Err(Error::InvalidConfig(format!(
                    "override `{item}`: unknown key `{key}`"
                )));
            }
            let value = serde_json::from_str(raw.trim())
                .unwrap_or_else(|_| Value::String(raw.trim().to_string()));
            map.insert(key.to_string(), value);
        }
        Self::from_map(map)
    }

    fn from_map(map: Map<String, Value>) -> Result<Self> {
        serde_json::from_value(Value::Object(map))
            .map_err(|e| Error::InvalidConfig(format!("override: {e}")))
    }

    pub fn spec(&self) -> Result<ResNetSpec> {
        ResNetSpec::uniform(
            self.n,
            self.num_blocks,
            self.hidden_layers_per_block,
            self.width,
            self.activation,
            self.shortcut,
        )
    }

    pub fn gains(&self) -> Gains {
        Gains {
            sigma_e: self.sigma_e,
            sigma_s: self.sigma_s,
            sigma_theta: self.sigma_theta,
            gamma: self.gamma,
        }
    }

    pub fn sim_config(&self) -> Result<SimConfig> {
        let cfg = SimConfig {
            dt: self.dt,
            horizon: self.horizon_s,
            integrator: self.integrator,
            spec: self.spec()?,
            gains: self.gains(),
            law: self.law,
            boundary_layer: self.boundary_layer,
            decimation: self.decimation,
            init_low: self.init_low,
            init_high: self.init_high,
            snapshot_interval: self.snapshot_interval,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The plant every single-episode command and fixed-plant batch uses.
    pub fn plant(&self) -> Result<PlantInstance> {
        if let Some(path) = &self.plant_file {
            if self.realizable {
                return Err(Error::InvalidConfig(
                    "plant_file and realizable are exclusive".into(),
                ));
            }
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
            let plant = PlantInstance::from_csv(&text)?;
            if plant.n() != self.n {
                return Err(Error::Dimension {
                    context: "plant file",
                    expected: self.n,
                    actual: plant.n(),
                });
            }
            return Ok(plant);
        }
        let mut rng = SimRng::seed_from_u64(self.plant_seed);
        if self.realizable {
            sample_realizable_plant(&mut rng, &self.spec()?, self.realizable_bound)
        } else {
            Ok(sample_plant(&mut rng, self.n))
        }
    }

    pub fn plant_selection(&self) -> Result<PlantSelection> {
        if self.per_run_plant {
            if self.realizable || self.plant_file.is_some() {
                return Err(Error::InvalidConfig(
                    "per_run_plant only applies to sampled f(x) = A y(x) plants".into(),
                ));
            }
            Ok(PlantSelection::PerRun {
                plant_seed: self.plant_seed,
                n: self.n,
            })
        } else {
            Ok(PlantSelection::Fixed(self.plant()?))
        }
    }
}
