use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::DType;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::scoring::ScoreFunction;
use crate::vi_head::ViHeadConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Cross-entropy plus annealed reconstruction and KL terms.
    Joint,
    /// Plain cross-entropy on the last `[CLS]` state.
    #[serde(alias = "disc")]
    Discriminative,
}

impl Objective {
    pub fn short_name(self) -> &'static str {
        match self {
            Self::Joint => "joint",
            Self::Discriminative => "disc",
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Self::Joint),
            "disc" | "discriminative" => Ok(Self::Discriminative),
            other => Err(Error::Config(format!(
                "unknown objective {other:?}, expected joint or disc"
            ))),
        }
    }
}

/// File locations of one ID task and its OOD test sets.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub id_train: PathBuf,
    pub id_val: PathBuf,
    pub id_test: PathBuf,
    #[serde(default)]
    pub ood_test: Vec<PathBuf>,
}

impl DatasetSpec {
    /// Resolves relative paths against `base`.
    pub fn relative_to(&self, base: &Path) -> Self {
        let join = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
        Self {
            id_train: join(&self.id_train),
            id_val: join(&self.id_val),
            id_test: join(&self.id_test),
            ood_test: self.ood_test.iter().map(join).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub head: ViHeadConfig,
    pub objective: Objective,
    pub epochs: usize,
    /// Peak learning rate, decayed linearly to zero over all steps.
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub score_functions: Vec<ScoreFunction>,
    /// Use `z = μ` at inference instead of one sampled `z`.
    pub deterministic_inference: bool,
    pub precision: DType,
    pub data: Option<DatasetSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            head: ViHeadConfig::default(),
            objective: Objective::Joint,
            epochs: 20,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            batch_size: 32,
            seed: 7,
            score_functions: ScoreFunction::ALL.to_vec(),
            deterministic_inference: false,
            precision: DType::F32,
            data: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        // The class count may be left at 0 until data is loaded.
        let mut head = self.head.clone();
        if head.num_classes == 0 {
            head.num_classes = 2;
        }
        head.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        if self.score_functions.is_empty() {
            return Err(Error::Config("at least one score function must be enabled".into()));
        }
        Ok(())
    }

    /// Reads a TOML config. Relative data paths resolve against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let (Some(data), Some(dir)) = (&cfg.data, path.parent()) {
            cfg.data = Some(data.relative_to(dir));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig {
            objective: Objective::Discriminative,
            precision: DType::F64,
            ..Default::default()
        };
        cfg.data = Some(DatasetSpec {
            id_train: "train.jsonl".into(),
            id_val: "val.jsonl".into(),
            id_test: "test.jsonl".into(),
            ood_test: vec!["ood.jsonl".into()],
        });
        let back: RunConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let cfg: RunConfig = toml::from_str("epochs = 3\nobjective = \"disc\"\n[encoder]\nlayers = 2\n").unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.objective, Objective::Discriminative);
        assert_eq!(cfg.encoder.layers, 2);
        assert_eq!(cfg.encoder.d_model, 64);
        assert!(toml::from_str::<RunConfig>("epoch = 3").is_err());
    }

    #[test]
    fn rejects_zero_epochs() {
        let cfg = RunConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
