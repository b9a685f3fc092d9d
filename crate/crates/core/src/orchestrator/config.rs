//! Scenario configuration: one JSON document drives the whole pipeline.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cloud::{CapMode, FinetuneConfig, PretrainConfig, SubTaskRule};
use crate::env::{CsvSchema, LocalConfig, SkewKind, SyntheticConfig, DEFAULT_TIERS};
use crate::error::{Error, Result};
use crate::modular::ModelShape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Synthetic(SyntheticConfig),
    Csv(CsvDataset),
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic(SyntheticConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvDataset {
    /// Relative paths resolve against the config file's directory.
    pub path: PathBuf,
    #[serde(default)]
    pub schema: CsvSchema,
    /// Stratified share held out as the global evaluation set.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FleetConfig {
    pub num_devices: usize,
    /// Share of devices sampled each round, in (0, 1].
    pub participation: f64,
    /// Classes (or groups) per device.
    pub m: usize,
    pub size_range: (usize, usize),
    /// Budget tiers as fractions of the full model's cost.
    pub tiers: Vec<f64>,
    pub skew: SkewKind,
}

impl Default for FleetConfig {
    fn default() -> Self {
        Self {
            num_devices: 500,
            participation: 0.05,
            m: 2,
            size_range: (50, 150),
            tiers: DEFAULT_TIERS.to_vec(),
            skew: SkewKind::Label,
        }
    }
}

impl FleetConfig {
    pub fn participants(&self) -> usize {
        ((self.participation * self.num_devices as f64).ceil() as usize).clamp(1, self.num_devices.max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnhanceConfig {
    /// Skip the sub-task guided fine-tuning when false.
    pub enabled: bool,
    pub subtasks: SubTaskRule,
    /// Module cap per sub-task; defaults to the top-k width.
    pub kappa2: Option<usize>,
    /// Column cap. Count mode defaults to `⌈T·κ2/N⌉` sub-tasks per module;
    /// weighted mode to that count divided by `κ2`, the mass of a module
    /// shared evenly by its sub-tasks.
    pub kappa1: Option<f64>,
    pub cap_mode: CapMode,
    pub finetune: FinetuneConfig,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            subtasks: SubTaskRule::PerClass,
            kappa2: None,
            kappa1: None,
            cap_mode: CapMode::Count,
            finetune: FinetuneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicsConfig {
    /// Share of each device's data replaced at a shift.
    pub shift_fraction: f64,
    /// Rounds between shifts; 0 disables shifts.
    pub shift_period: usize,
    /// Per-round multiplicative range for compute and memory budgets.
    pub fluctuation: (f64, f64),
    /// Swap one assigned class per shift.
    pub class_drift: bool,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self {
            shift_fraction: 0.5,
            shift_period: 10,
            fluctuation: (1.0, 1.0),
            class_drift: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Eclm,
    NoAdapt,
    LocalOnly,
    Fedavg,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Eclm, Strategy::NoAdapt, Strategy::LocalOnly, Strategy::Fedavg];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Eclm => "eclm",
            Strategy::NoAdapt => "no_adapt",
            Strategy::LocalOnly => "local_only",
            Strategy::Fedavg => "fedavg",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}` (eclm, no_adapt, local_only, fedavg)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub rounds: usize,
    pub strategy: Strategy,
    pub dataset: DatasetConfig,
    /// Share of the source data kept by the cloud for offline training.
    pub proxy_fraction: f64,
    /// Share of the edge data held back for future shifts.
    pub shift_pool_fraction: f64,
    pub fleet: FleetConfig,
    pub model: ModelShape,
    pub pretrain: PretrainConfig,
    pub enhance: EnhanceConfig,
    pub local: LocalConfig,
    pub dynamics: DynamicsConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            rounds: 60,
            strategy: Strategy::Eclm,
            dataset: DatasetConfig::default(),
            proxy_fraction: 0.3,
            shift_pool_fraction: 0.5,
            fleet: FleetConfig::default(),
            model: ModelShape::default(),
            pretrain: PretrainConfig::default(),
            enhance: EnhanceConfig::default(),
            local: LocalConfig::default(),
            dynamics: DynamicsConfig::default(),
        }
    }
}

fn unit(name: &str, v: f64, open_low: bool) -> Result<()> {
    let ok = if open_low { v > 0.0 && v <= 1.0 } else { (0.0..=1.0).contains(&v) };
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be in {}0, 1], got {v}", if open_low { "(" } else { "[" })))
    }
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative CSV paths are resolved against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_json(&std::fs::read_to_string(path)?)?;
        if let DatasetConfig::Csv(c) = &mut cfg.dataset {
            if c.path.is_relative() {
                if let Some(dir) = path.parent() {
                    c.path = dir.join(&c.path);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        unit("fleet.participation", self.fleet.participation, true)?;
        unit("proxy_fraction", self.proxy_fraction, true)?;
        unit("shift_pool_fraction", self.shift_pool_fraction, false)?;
        unit("dynamics.shift_fraction", self.dynamics.shift_fraction, false)?;
        if self.proxy_fraction >= 1.0 {
            return Err(Error::Config("proxy_fraction must leave data for the devices".into()));
        }
        if self.fleet.num_devices == 0 {
            return Err(Error::Config("fleet.num_devices must be at least 1".into()));
        }
        if self.fleet.tiers.is_empty() || self.fleet.tiers.iter().any(|t| !(*t > 0.0) || !t.is_finite()) {
            return Err(Error::Config("fleet.tiers must be positive fractions".into()));
        }
        let (lo, hi) = self.dynamics.fluctuation;
        if !(lo > 0.0) || lo > hi || !hi.is_finite() {
            return Err(Error::Config(format!("dynamics.fluctuation [{lo}, {hi}] is not a positive range")));
        }
        match &self.dataset {
            DatasetConfig::Synthetic(s) => {
                s.validate()?;
                if s.dim != self.model.input_dim || s.num_classes != self.model.num_classes {
                    return Err(Error::Config(format!(
                        "model expects {} inputs and {} classes, synthetic task has {} and {}",
                        self.model.input_dim, self.model.num_classes, s.dim, s.num_classes
                    )));
                }
            }
            DatasetConfig::Csv(c) => unit("dataset.test_fraction", c.test_fraction, false)?,
        }
        self.local.sgd().validate()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = ScenarioConfig::default();
        cfg.validate().unwrap();
        let back = ScenarioConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.fleet.participants(), 25);
        assert_eq!(cfg.fleet.size_range, (50, 150));
        assert_eq!((cfg.local.epochs, cfg.local.batch_size), (3, 16));
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = ScenarioConfig::from_json(r#"{"rounds": 3, "fleet": {"num_devices": 4, "participation": 1.0}}"#).unwrap();
        assert_eq!(cfg.rounds, 3);
        assert_eq!(cfg.fleet.participants(), 4);
        assert_eq!(cfg.fleet.m, 2);
        let cfg = ScenarioConfig::from_json(r#"{"dataset": {"kind": "synthetic", "drift_step": 0.5}}"#).unwrap();
        assert!(matches!(cfg.dataset, DatasetConfig::Synthetic(ref s) if s.drift_step == 0.5));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ScenarioConfig::from_json(r#"{"roundz": 3}"#).is_err());
        assert!(ScenarioConfig::from_json(r#"{"fleet": {"devices": 3}}"#).is_err());
        assert!(ScenarioConfig::from_json(r#"{"dataset": {"kind": "synthetic", "dims": 3}}"#).is_err());
        assert!(ScenarioConfig::from_json(r#"{"dataset": {"kind": "csv", "path": "a.csv", "x": 1}}"#).is_err());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for doc in [
            r#"{"fleet": {"participation": 0.0}}"#,
            r#"{"fleet": {"participation": 1.5}}"#,
            r#"{"dynamics": {"shift_fraction": 2.0}}"#,
            r#"{"dynamics": {"fluctuation": [1.2, 1.0]}}"#,
            r#"{"model": {"input_dim": 7}}"#,
        ] {
            assert_eq!(ScenarioConfig::from_json(doc).unwrap_err().class(), "config", "{doc}");
        }
    }

    #[test]
    fn strategies_parse_by_name() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("fedprox".parse::<Strategy>().is_err());
    }
}
