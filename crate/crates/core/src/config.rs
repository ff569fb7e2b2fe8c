//! Run configuration shared by the command-line tools.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::barriernet::{BarrierSource, ForwardOptions, NetworkConfig, TrainConfig};
use crate::diffqp::QpSettings;
use crate::dynamics::VehicleParams;
use crate::error::{Error, Result};
use crate::harness::EvalConfig;
use crate::nominal_mpc::{DatasetSpec, MpcConfig};
use crate::scenario::ScenarioDistribution;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// How a trained network is deployed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    /// constraints from the true state
    #[default]
    Exact,
    /// constraints from the network's own estimates
    Estimated,
    /// reference control only, QP layer removed
    NoCbf,
}

impl PolicyMode {
    pub fn options(self, qp: QpSettings) -> ForwardOptions {
        match self {
            PolicyMode::Exact => ForwardOptions { source: BarrierSource::Exact, use_cbf: true, use_bounds: true, qp },
            PolicyMode::Estimated => ForwardOptions { source: BarrierSource::Estimated, use_cbf: true, use_bounds: true, qp },
            PolicyMode::NoCbf => ForwardOptions { source: BarrierSource::Exact, use_cbf: false, use_bounds: true, qp },
        }
    }
}

impl std::str::FromStr for PolicyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Self::Exact),
            "estimated" => Ok(Self::Estimated),
            "no-cbf" | "no_cbf" => Ok(Self::NoCbf),
            _ => Err(Error::InvalidInput(format!("unknown policy mode {s:?} (exact, estimated, no-cbf)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub schema_version: u32,
    pub vehicle: VehicleParams<f64>,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub mpc: MpcConfig,
    pub dataset: DatasetSpec,
    pub eval: EvalConfig,
    /// scenario distribution used by `eval` and `sweep-noise`
    pub eval_distribution: ScenarioDistribution,
    pub policy: PolicyMode,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            vehicle: VehicleParams::default(),
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            mpc: MpcConfig::default(),
            dataset: DatasetSpec::default(),
            eval: EvalConfig::default(),
            eval_distribution: ScenarioDistribution::obstacle_avoidance(),
            policy: PolicyMode::default(),
        }
    }
}

impl Config {
    /// Reads TOML, or JSON when the extension is `.json`. Missing sections
    /// take their defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Config = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text)?
        };
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Format(format!("unsupported config schema_version {}", cfg.schema_version)));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.vehicle.validate()?;
        self.network.validate()?;
        self.train.validate()?;
        self.mpc.validate()?;
        self.dataset.validate()?;
        self.eval_distribution.validate()?;
        if self.dataset.n_slots() != self.network.n_slots || self.eval_distribution.slots != self.network.n_slots {
            return Err(Error::InvalidInput("dataset, evaluation and network slot counts differ".into()));
        }
        Ok(())
    }

    /// Applies a master seed to every seeded stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.dataset.seed = seed;
        self.train.seed = seed;
        self.eval.seed = seed;
        self
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}
