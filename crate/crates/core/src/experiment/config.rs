use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, SynthSpec};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::federation::{FedConfig, TrainingMode};
use crate::ssl::AugmentConfig;

/// Environment variable naming the output directory when the config does
/// not.
pub const OUTPUT_DIR_ENV: &str = "LAYERFED_OUTPUT_DIR";
const DEFAULT_OUTPUT_DIR: &str = "runs";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataSource {
    /// CIFAR-100 binary files (`train.bin`, `test.bin`).
    Cifar {
        train: PathBuf,
        test: PathBuf,
    },
    Synth(SynthSpec),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Linear,
    Finetune,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(EvalMode::Linear),
            "finetune" => Ok(EvalMode::Finetune),
            other => Err(Error::config("eval.mode", format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub layers: Vec<usize>,
    pub mode: EvalMode,
    #[serde(default = "default_eval_lr")]
    pub lr: f32,
    #[serde(default = "default_eval_epochs")]
    pub epochs: usize,
    #[serde(default = "default_eval_batch")]
    pub batch_size: usize,
}

fn default_eval_lr() -> f32 {
    1e-2
}

fn default_eval_epochs() -> usize {
    100
}

fn default_eval_batch() -> usize {
    64
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            layers: Vec::new(),
            mode: EvalMode::Linear,
            lr: default_eval_lr(),
            epochs: default_eval_epochs(),
            batch_size: default_eval_batch(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub encoder: EncoderConfig,
    pub fed: FedConfig,
    #[serde(default)]
    pub aug: AugmentConfig,
    pub data: DataSource,
    #[serde(default = "default_mode")]
    pub mode: TrainingMode,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Client-loop threads; 0 means one per core. Never changes results.
    #[serde(default)]
    pub workers: usize,
}

fn default_mode() -> TrainingMode {
    TrainingMode::LayerWise
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let field = e.message().split('`').nth(1).unwrap_or("config").to_string();
            Error::Config { field, message: e.to_string() }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.fed.validate(self.encoder.num_blocks)?;
        self.aug.validate()?;
        if let Some(&bad) = self.eval.layers.iter().find(|&&l| l > self.encoder.num_blocks) {
            return Err(Error::config("eval.layers", format!("layer {bad} exceeds depth {}", self.encoder.num_blocks)));
        }
        if !(self.eval.lr > 0.0) {
            return Err(Error::config("eval.lr", format!("{} must be positive", self.eval.lr)));
        }
        if self.eval.batch_size == 0 {
            return Err(Error::config("eval.batch_size", "must be positive"));
        }
        match &self.data {
            DataSource::Cifar { train, test } => {
                for (field, path) in [("data.train", train), ("data.test", test)] {
                    if !path.is_file() {
                        return Err(Error::config(field, format!("{} does not exist", path.display())));
                    }
                }
                if self.encoder.image_size != data::CIFAR_SIDE {
                    return Err(Error::config("encoder.image_size", "CIFAR images are 32×32"));
                }
            }
            DataSource::Synth(spec) => {
                if spec.height != self.encoder.image_size || spec.width != self.encoder.image_size {
                    return Err(Error::config(
                        "data.height",
                        format!(
                            "synthetic images are {}×{}, encoder expects {}",
                            spec.height, spec.width, self.encoder.image_size
                        ),
                    ));
                }
                if spec.n < self.fed.num_clients {
                    return Err(Error::config(
                        "data.n",
                        format!("{} examples for {} clients", spec.n, self.fed.num_clients),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Config value, then the environment variable, then `runs`.
    pub fn resolved_output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
    }

    pub fn load_train(&self) -> Result<Dataset> {
        match &self.data {
            DataSource::Cifar { train, .. } => data::load_cifar100_binary(train),
            DataSource::Synth(spec) => data::synth_dataset(spec),
        }
    }

    pub fn load_test(&self) -> Result<Dataset> {
        match &self.data {
            DataSource::Cifar { test, .. } => data::load_cifar100_binary(test),
            DataSource::Synth(spec) => {
                data::synth_test_set(spec, if spec.n_test > 0 { spec.n_test } else { spec.n / 2 })
            }
        }
    }
}
