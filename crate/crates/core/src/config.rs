//! Experiment configuration files.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::curator::DataConfig;
use crate::error::{Error, Result};
use crate::evaluator::EvaluationConfig;
use crate::search::GaConfig;

/// How a search is executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Serial search and evaluation in one process.
    #[default]
    Local,
    /// Every rank runs the search; each network is trained data-parallel.
    #[serde(alias = "distributed_evaluation")]
    DistEval,
    /// Rank 0 runs the search and farms whole evaluations out to workers.
    #[serde(alias = "distributed_population")]
    DistPop,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Local => "local",
            Mode::DistEval => "dist-eval",
            Mode::DistPop => "dist-pop",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(Mode::Local),
            "dist-eval" | "distributed_evaluation" => Ok(Mode::DistEval),
            "dist-pop" | "distributed_population" => Ok(Mode::DistPop),
            other => Err(Error::Config(format!(
                "unknown mode `{other}` (expected local, dist-eval or dist-pop)"
            ))),
        }
    }
}

/// A whole experiment: `[ga]`, `[eval]`, `[data]` and a top-level `mode`.
/// Missing keys take their defaults; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub ga: GaConfig,
    pub eval: EvaluationConfig,
    pub data: DataConfig,
    pub mode: Mode,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.ga.validate()?;
        self.eval.validate()?;
        self.data.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::Subset;

    #[test]
    fn empty_file_is_all_defaults() {
        let cfg = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.ga.population_size, 10);
        assert_eq!(cfg.ga.generations, 10);
    }

    #[test]
    fn parses_sections() {
        let cfg = ExperimentConfig::from_toml_str(
            r#"
mode = "dist-eval"
[ga]
population_size = 6
seed = 42
[eval]
epochs = 1
train_subset = 128
test_subset = "all"
[data]
source = "synthetic"
classes = 4
image_shape = [1, 6, 6]
"#,
        )
        .unwrap();
        assert_eq!(cfg.mode, Mode::DistEval);
        assert_eq!(cfg.ga.population_size, 6);
        assert_eq!(cfg.ga.crossover_rate, 0.9);
        assert_eq!(cfg.eval.train_subset, Subset::Count(128));
        assert_eq!(cfg.eval.test_subset, Subset::All);
        assert_eq!(cfg.data.classes, 4);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::from_toml_str("[ga]\npoulation = 3\n").unwrap_err();
        assert!(
            matches!(&err, Error::Config(m) if m.contains("poulation")),
            "{err}"
        );
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(ExperimentConfig::from_toml_str("[ga]\nmutation_rate = 2.0\n").is_err());
        assert!(ExperimentConfig::from_toml_str("mode = \"islands\"\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[data]\nsource = \"cifar10\"\n").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig::default();
        assert_eq!(
            ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap(),
            cfg
        );
    }
}
