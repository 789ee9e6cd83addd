//! Run configuration: one TOML file with a section per stage.
//!
//! ```toml
//! seed = 7            # drives every random stream in the run
//! mode = "oracle"     # or "flag"
//! q0 = 0.9
//! output_dir = "runs"
//!
//! [data]
//! image_size = 64
//! # manifest = "data/manifest.csv"   # omit to use the synthetic generator
//! [data.synthetic]
//! n_stacks = 3
//!
//! [quality]
//! median_kernel = 5
//!
//! [model]
//! base_channels = 8
//!
//! [train]
//! epochs = 20
//!
//! [finetune]
//! epochs = 20
//!
//! [baseline]
//! fraction = 0.25
//! ```
//!
//! Every key is optional. The global `seed` overrides the seeds of the
//! synthetic generator and the training stages, and `data.image_size`
//! fixes the model input size; [`RunConfig::resolve`] writes both into the
//! nested sections so the resolved file reproduces the run on its own.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::quality::QualitySettings;
use crate::rng::derive_seed;
use crate::selection::{validate_q0, DEFAULT_Q0};
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Annotations for every slice are available; fine-tune and evaluate.
    #[default]
    Oracle,
    /// Emit S_m for external annotation and stop.
    Flag,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(Mode::Oracle),
            "flag" => Ok(Mode::Flag),
            other => Err(Error::Config(format!(
                "unknown mode {other:?}, expected oracle or flag"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Real data; when absent the synthetic generator is used.
    pub manifest: Option<PathBuf>,
    /// Square side every slice is resized to (and the model input size).
    pub image_size: usize,
    pub synthetic: SyntheticSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            image_size: 64,
            synthetic: SyntheticSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    /// Learning rate for fine-tuning; the training rate when absent.
    pub learning_rate: Option<f64>,
    /// Repeat select + fine-tune until S_m comes back empty.
    pub iterate: bool,
    pub max_rounds: usize,
    /// Checkpoint used instead of training on S₀ when the flag-mode S₀ has
    /// no annotations.
    pub warm_start: Option<PathBuf>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: None,
            iterate: false,
            max_rounds: 5,
            warm_start: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub fraction: f64,
    pub runs: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            fraction: 0.25,
            runs: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: Mode,
    pub q0: f64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub quality: QualitySettings,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub baseline: BaselineConfig,
}

impl Default for RunConfig {
    /// Desk-scale defaults: 64×64 synthetic stacks and an 8-channel model.
    fn default() -> Self {
        Self {
            seed: 0,
            mode: Mode::Oracle,
            q0: DEFAULT_Q0,
            output_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            quality: QualitySettings::default(),
            model: ModelConfig {
                input_size: 64,
                base_channels: 8,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                learning_rate: 1e-3,
                epochs: 20,
                batch_size: 2,
                ..TrainConfig::default()
            },
            finetune: FinetuneConfig::default(),
            baseline: BaselineConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Propagates the global seed and image size into the nested sections
    /// and validates everything.
    pub fn resolve(mut self) -> Result<Self> {
        self.data.synthetic.seed = self.seed;
        self.data.synthetic.image_size = self.data.image_size;
        self.model.input_size = self.data.image_size;
        self.train.seed = derive_seed(self.seed, &[1]);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        validate_q0(self.q0)?;
        if self.data.manifest.is_none() {
            self.data.synthetic.validate()?;
        }
        self.quality.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.finetune_config().validate()?;
        if self.finetune.max_rounds == 0 {
            return Err(Error::Config("finetune.max_rounds must be at least 1".into()));
        }
        if !(self.baseline.fraction > 0.0 && self.baseline.fraction < 1.0) {
            return Err(Error::Config("baseline.fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Training config used for fine-tuning round `round` (0-based).
    pub fn finetune_config_for(&self, round: usize) -> TrainConfig {
        TrainConfig {
            epochs: self.finetune.epochs,
            learning_rate: self.finetune.learning_rate.unwrap_or(self.train.learning_rate),
            seed: derive_seed(self.seed, &[2, round as u64]),
            ..self.train.clone()
        }
    }

    pub fn finetune_config(&self) -> TrainConfig {
        self.finetune_config_for(0)
    }

    /// Seed for building the model.
    pub fn model_seed(&self) -> u64 {
        derive_seed(self.seed, &[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
    }

    #[test]
    fn resolved_round_trip() {
        let cfg = RunConfig::from_toml_str("seed = 7\n[data]\nimage_size = 32\n[train]\nepochs = 3\n")
            .unwrap()
            .resolve()
            .unwrap();
        assert_eq!(cfg.model.input_size, 32);
        assert_eq!(cfg.data.synthetic.seed, 7);
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.clone().resolve().unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(RunConfig::from_toml_str("sed = 1").is_err());
        assert!(RunConfig::from_toml_str("[model]\ndepth = 3").is_err());
        assert!(RunConfig::from_toml_str("q0 = 2.0").unwrap().resolve().is_err());
        assert!(RunConfig::from_toml_str("mode = \"other\"").is_err());
        assert!(RunConfig::from_toml_str("[data]\nimage_size = 40")
            .unwrap()
            .resolve()
            .is_err());
    }
}
