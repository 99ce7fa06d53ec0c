//! Experiment configuration, read from TOML with dotted sections.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::CIFAR10_CLASSES;
use crate::error::{Error, Result};
use crate::model::{Arch, ModelConfig};
use crate::optim::{OptimConfig, Schedule};

/// Environment variable that overrides `data.root`.
pub const DATA_ROOT_ENV: &str = "POOLNET_DATA_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synth,
    Cifar10,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dataset: DatasetKind,
    pub root: Option<PathBuf>,
    pub classes: usize,
    /// Synthetic set sizes.
    pub train_count: usize,
    pub val_count: usize,
    /// CIFAR-10 balanced subsets; all records when unset.
    pub train_per_class: Option<usize>,
    pub val_per_class: Option<usize>,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub balanced: bool,
    pub augment: bool,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Synth,
            root: None,
            classes: 4,
            train_count: 800,
            val_count: 400,
            train_per_class: None,
            val_per_class: None,
            batch_size: 20,
            eval_batch_size: 100,
            balanced: true,
            augment: false,
            seed: 0,
        }
    }
}

impl DataConfig {
    /// `data.root`, unless the environment override is set.
    pub fn resolved_root(&self) -> Option<PathBuf> {
        match std::env::var_os(DATA_ROOT_ENV) {
            Some(v) if !v.is_empty() => Some(PathBuf::from(v)),
            _ => self.root.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Record `wall_seconds` as 0 so repeated runs write identical files.
    pub deterministic: bool,
    /// Also checkpoint before every learning-rate decay.
    pub checkpoint_decays: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
            deterministic: false,
            checkpoint_decays: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    pub model: ModelConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_epochs() -> usize {
    20
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            seed: 0,
            epochs: default_epochs(),
            model,
            optim: OptimConfig::default(),
            schedule: Schedule::default(),
            data: DataConfig::default(),
            output: OutputConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Everything that defines the experiment, with the output location reset
    /// so runs differing only in where they write produce identical echoes.
    pub fn experiment_toml(&self) -> String {
        let mut c = self.clone();
        c.output.dir = OutputConfig::default().dir;
        c.to_toml()
    }

    /// Every setting, defaults included, as sorted `key = value` lines.
    pub fn provenance(&self) -> Vec<String> {
        let value: toml::Value = toml::from_str(&self.experiment_toml()).expect("round trip");
        let mut out = Vec::new();
        flatten("", &value, &mut out);
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        self.schedule.validate()?;
        self.model.perceptron.validate()?;
        let d = &self.data;
        if d.classes < 2 {
            return Err(Error::config("data.classes must be at least 2"));
        }
        if d.batch_size == 0 || d.eval_batch_size == 0 {
            return Err(Error::config("batch sizes must be at least 1"));
        }
        if d.balanced && !d.batch_size.is_multiple_of(d.classes) {
            return Err(Error::config(format!(
                "balanced batches need data.batch_size ({}) divisible by data.classes ({})",
                d.batch_size, d.classes
            )));
        }
        match d.dataset {
            DatasetKind::Cifar10 => {
                if d.classes != CIFAR10_CLASSES {
                    return Err(Error::config(format!(
                        "CIFAR-10 has 10 classes, data.classes is {}",
                        d.classes
                    )));
                }
                if self.model.arch == Arch::TinySynth {
                    return Err(Error::config("tiny_synth expects 16×16 synthetic images, not CIFAR-10"));
                }
            }
            DatasetKind::Synth => {
                if self.model.arch != Arch::TinySynth {
                    return Err(Error::config("the synthetic dataset is 16×16 and only fits tiny_synth"));
                }
            }
        }
        Ok(())
    }
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<String>) {
    match v {
        toml::Value::Table(t) => {
            for (k, child) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out);
            }
        }
        other => out.push(format!("{prefix} = {other}")),
    }
}
