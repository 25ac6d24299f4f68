//! Declarative experiment configuration (TOML).
//!
//! ```toml
//! seed = 0
//! output_dir = "out"
//!
//! [data]
//! panel = "panel.csv"      # timestamp column + one column per sensor
//! sensors = "sensors.csv"  # id,x,y | id,lat,lon | distance matrix
//!
//! [scenario]
//! name = "7T8S"            # or explicit fractions below
//! # train_time_fraction = 0.7
//! # train_sensor_fraction = 0.8
//! # missing_ratio = 0.0
//!
//! [arch]                   # see ArchConfig
//! k = 3
//! channels = [32, 32]
//! tcn_widths = [2, 2]
//!
//! [train]                  # see TrainConfig
//! iterations = 1000
//!
//! [baseline]
//! k = [1, 2, 3, 5, 8]
//! ```
//!
//! Relative paths resolve against the config file's directory. A `[synthetic]`
//! table may replace `[data]`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::ScenarioSpec;
use crate::error::{Result, SatcnError};
use crate::model::{ArchConfig, TrainConfig};
use crate::synthetic::SyntheticFieldSpec;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub panel: PathBuf,
    pub sensors: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: Option<String>,
    pub train_time_fraction: Option<f64>,
    pub train_sensor_fraction: Option<f64>,
    pub missing_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub k: Vec<usize>,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig { k: vec![1, 2, 3, 5, 8] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: Option<DataConfig>,
    pub synthetic: Option<SyntheticFieldSpec>,
    pub scenario: Option<ScenarioConfig>,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub baseline: BaselineConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output_dir: PathBuf::from("out"),
            data: None,
            synthetic: None,
            scenario: None,
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            baseline: BaselineConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| SatcnError::Config(e.to_string()))
    }

    /// Parses `path`, resolves relative paths against its directory and
    /// validates the result.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SatcnError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| match e {
            SatcnError::Config(m) => SatcnError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(d) = &mut self.data {
            fix(&mut d.panel);
            fix(&mut d.sensors);
        }
        fix(&mut self.output_dir);
    }

    /// Checks internal consistency and that referenced inputs exist.
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.train.validate()?;
        match (&self.data, &self.synthetic) {
            (Some(_), Some(_)) => {
                return Err(SatcnError::Config("give either [data] or [synthetic], not both".into()))
            }
            (None, None) => return Err(SatcnError::Config("a [data] or [synthetic] table is required".into())),
            (Some(d), None) => {
                for p in [&d.panel, &d.sensors] {
                    if !p.exists() {
                        return Err(SatcnError::Config(format!("input file {} does not exist", p.display())));
                    }
                }
            }
            (None, Some(s)) => s.validate().map_err(|e| SatcnError::Config(e.to_string()))?,
        }
        if self.baseline.k.contains(&0) {
            return Err(SatcnError::Config("baseline K values must be at least 1".into()));
        }
        if self.scenario.is_some() {
            self.scenario_spec()?;
        }
        Ok(())
    }

    /// The scenario with the experiment seed applied.
    pub fn scenario_spec(&self) -> Result<ScenarioSpec> {
        let sc = self
            .scenario
            .as_ref()
            .ok_or_else(|| SatcnError::Config("a [scenario] table is required".into()))?;
        let mut spec = match &sc.name {
            Some(name) => ScenarioSpec::parse(name, self.seed)?,
            None => ScenarioSpec {
                train_time_fraction: 0.7,
                train_sensor_fraction: 0.8,
                missing_ratio: 0.0,
                seed: self.seed,
            },
        };
        if let Some(v) = sc.train_time_fraction {
            spec.train_time_fraction = v;
        }
        if let Some(v) = sc.train_sensor_fraction {
            spec.train_sensor_fraction = v;
        }
        if let Some(v) = sc.missing_ratio {
            spec.missing_ratio = v;
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Training settings with the experiment seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Synthetic spec with the experiment seed applied.
    pub fn synthetic_spec(&self) -> Option<SyntheticFieldSpec> {
        self.synthetic.as_ref().map(|s| SyntheticFieldSpec {
            seed: self.seed,
            ..s.clone()
        })
    }

    /// SHA-256 of the canonical JSON form, first 16 hex digits. Output paths
    /// are left out so moving an experiment does not change its hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let json = serde_json::to_vec(&c).expect("config serializes");
        let digest = Sha256::digest(&json);
        hex::encode(digest)[..16].to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SYNTH: &str = r#"
seed = 3
[synthetic]
n_sensors = 10
n_steps = 50
[scenario]
name = "7T8S"
[train]
iterations = 5
"#;

    #[test]
    fn parses_and_applies_seed() {
        let cfg = ExperimentConfig::from_toml_str(SYNTH).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.train_config().seed, 3);
        assert_eq!(cfg.train.iterations, 5);
        assert_eq!(cfg.arch, ArchConfig::default());
        let sc = cfg.scenario_spec().unwrap();
        assert_eq!((sc.train_time_fraction, sc.train_sensor_fraction, sc.seed), (0.7, 0.8, 3));
        assert_eq!(cfg.synthetic_spec().unwrap().seed, 3);
    }

    #[test]
    fn hash_tracks_content_only() {
        let a = ExperimentConfig::from_toml_str(SYNTH).unwrap();
        let mut b = a.clone();
        b.output_dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.seed = 4;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ExperimentConfig::from_toml_str("seed = \"x\"").is_err());
        assert!(ExperimentConfig::from_toml_str("unknown_key = 1").is_err());
        let none = ExperimentConfig::from_toml_str("seed = 1").unwrap();
        assert!(none.validate().is_err());
        let missing = ExperimentConfig::from_toml_str("[data]\npanel = \"/nonexistent/p.csv\"\nsensors = \"/nonexistent/s.csv\"").unwrap();
        assert!(matches!(missing.validate(), Err(SatcnError::Config(_))));
        let bad_arch = ExperimentConfig::from_toml_str(&format!("{SYNTH}\n[arch]\nchannels = [4]\n")).unwrap();
        assert!(bad_arch.validate().is_err());
    }

    #[test]
    fn toml_errors_report_position() {
        let err = ExperimentConfig::from_toml_str("seed = 1\n[train]\niterations = -\n").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }
}
