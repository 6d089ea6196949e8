//! Flat TOML experiment files covering a training run and a tuner search.
//!
//! Every key is optional; unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DatasetRef, SynthSpec};
use crate::error::{Error, Result};
use crate::model::{Mode, Preset};
use crate::train::TrainConfig;
use crate::tuner::TunerConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Blobs,
    Mnist,
    Cifar10,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub lr: f64,
    pub alpha: f64,
    pub weight_decay: f64,
    pub fc_weight_decay: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub label_smoothing: f64,
    pub epochs: u32,
    pub batch_size: usize,
    pub warmup_epochs: u32,
    pub seed: u64,
    pub model: Preset,
    pub mcbr_samples: usize,

    pub dataset: DatasetKind,
    pub blobs_classes: usize,
    pub blobs_dim: usize,
    pub blobs_separation: f64,
    pub blobs_sigma: f64,
    pub blobs_per_class: usize,
    pub blobs_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_limit: Option<usize>,

    pub lr_min: f64,
    pub lr_max: f64,
    pub lr_splits: usize,
    /// Per-round budgets in epochs; defaults to `[0.2 epochs, epochs]`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budgets: Option<Vec<f64>>,
    pub alphas: Vec<f64>,
    pub parallelism: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let u = TunerConfig::default();
        ExperimentConfig {
            mode: t.mode,
            lr: t.lr,
            alpha: t.alpha,
            weight_decay: t.weight_decay,
            fc_weight_decay: t.fc_weight_decay,
            momentum: t.momentum,
            nesterov: t.nesterov,
            label_smoothing: t.label_smoothing,
            epochs: t.epochs,
            batch_size: t.batch_size,
            warmup_epochs: t.warmup_epochs,
            seed: t.seed,
            model: t.model,
            mcbr_samples: t.mcbr_samples,
            dataset: DatasetKind::Blobs,
            blobs_classes: 4,
            blobs_dim: 16,
            blobs_separation: 3.0,
            blobs_sigma: 1.0,
            blobs_per_class: 250,
            blobs_seed: 0,
            data_dir: None,
            train_limit: None,
            val_limit: None,
            lr_min: u.lr_min,
            lr_max: u.lr_max,
            lr_splits: u.splits,
            budgets: None,
            alphas: u.alphas,
            parallelism: u.parallelism,
        }
    }
}

/// The key a toml error refers to: the unknown field's name, or the key on
/// the line the error points at.
fn offending_key(err: &toml::de::Error, text: &str) -> String {
    let msg = err.message();
    if let Some(rest) = msg.strip_prefix("unknown field `") {
        if let Some(end) = rest.find('`') {
            return rest[..end].to_string();
        }
    }
    if let Some(span) = err.span() {
        let start = text[..span.start.min(text.len())]
            .rfind('\n')
            .map_or(0, |i| i + 1);
        let line = text[start..].lines().next().unwrap_or("");
        if let Some((key, _)) = line.split_once('=') {
            let key = key.trim().trim_matches('"');
            if !key.is_empty() {
                return key.to_string();
            }
        }
    }
    "<file>".to_string()
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config {
            key: offending_key(&e, text),
            msg: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config fields are all representable in toml")
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            mode: self.mode,
            lr: self.lr,
            alpha: self.alpha,
            weight_decay: self.weight_decay,
            fc_weight_decay: self.fc_weight_decay,
            momentum: self.momentum,
            nesterov: self.nesterov,
            label_smoothing: self.label_smoothing,
            epochs: self.epochs,
            batch_size: self.batch_size,
            warmup_epochs: self.warmup_epochs,
            seed: self.seed,
            model: self.model,
            mcbr_samples: self.mcbr_samples,
        }
    }

    pub fn tuner_config(&self) -> TunerConfig {
        let t = f64::from(self.epochs);
        TunerConfig {
            lr_min: self.lr_min,
            lr_max: self.lr_max,
            splits: self.lr_splits,
            budgets: self.budgets.clone().unwrap_or_else(|| vec![0.2 * t, t]),
            alphas: self.alphas.clone(),
            parallelism: self.parallelism,
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            classes: self.blobs_classes,
            dim: self.blobs_dim,
            separation: self.blobs_separation,
            sigma: self.blobs_sigma,
            per_class: self.blobs_per_class,
            seed: self.blobs_seed,
        }
    }

    pub fn dataset_ref(&self) -> Result<DatasetRef> {
        let dir = || {
            self.data_dir.clone().ok_or_else(|| {
                Error::config(
                    "data_dir",
                    format!("required for dataset `{:?}`", self.dataset).to_lowercase(),
                )
            })
        };
        Ok(match self.dataset {
            DatasetKind::Blobs => DatasetRef::Blobs(self.synth_spec()),
            DatasetKind::Mnist => DatasetRef::Mnist {
                dir: dir()?,
                train_limit: self.train_limit,
                val_limit: self.val_limit,
            },
            DatasetKind::Cifar10 => DatasetRef::Cifar10 {
                dir: dir()?,
                train_limit: self.train_limit,
                val_limit: self.val_limit,
            },
        })
    }

    /// Cross-field checks; the first violation is reported with its key.
    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.tuner_config().validate()?;
        if self.dataset == DatasetKind::Blobs {
            self.synth_spec().validate()?;
        }
        self.dataset_ref()?;
        if self.mcbr_samples == 0 {
            return Err(Error::config("mcbr_samples", "must be at least 1"));
        }
        Ok(())
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::from_toml_str(&text)
}

/// Every key with its default value, in file form.
pub fn defaults_help() -> String {
    format!(
        "Config keys and defaults (budgets defaults to [0.2*epochs, epochs]):\n\n{}",
        ExperimentConfig::default().to_toml_string()
    )
}
