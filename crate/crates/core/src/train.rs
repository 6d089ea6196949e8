//! One complete training run under a chosen mode, with per-epoch metrics.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Tape};
use crate::data::{Dataset, Splits};
use crate::error::{Error, Result};
use crate::heads;
use crate::metrics;
use crate::model::{build_model, Mode, Network, Preset};
use crate::optim::{capture_initial_norms, Schedule, Sgd};
use crate::tensor::Tensor;

/// The full recipe of one run. The data source is resolved separately.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub lr: f64,
    pub alpha: f64,
    /// Decay on every weight, WD mode only.
    pub weight_decay: f64,
    /// Decay on the head weight, ALGO1 mode only.
    pub fc_weight_decay: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub label_smoothing: f64,
    pub epochs: u32,
    pub batch_size: usize,
    pub warmup_epochs: u32,
    pub seed: u64,
    pub model: Preset,
    /// Samples per split used for the cross-boundary metric.
    pub mcbr_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::FixNormFc,
            lr: 0.5,
            alpha: 1.0,
            weight_decay: 0.0,
            fc_weight_decay: 0.0,
            momentum: 0.9,
            nesterov: true,
            label_smoothing: 0.1,
            epochs: 30,
            batch_size: 64,
            warmup_epochs: 4,
            seed: 0,
            model: Preset::MlpBlobs,
            mcbr_samples: 2048,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(
                "lr",
                format!("must be finite and > 0, got {}", self.lr),
            ));
        }
        if self.alpha.is_nan() || self.alpha <= 0.0 {
            return Err(Error::config(
                "alpha",
                format!("must be > 0, got {}", self.alpha),
            ));
        }
        for (key, v) in [
            ("weight_decay", self.weight_decay),
            ("fc_weight_decay", self.fc_weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(
                    key,
                    format!("must be finite and >= 0, got {v}"),
                ));
            }
        }
        match self.mode {
            Mode::Wd if self.fc_weight_decay > 0.0 => {
                return Err(Error::config(
                    "fc_weight_decay",
                    "WD mode decays every weight through weight_decay",
                ));
            }
            Mode::Algo1 if self.weight_decay > 0.0 => {
                return Err(Error::config(
                    "weight_decay",
                    "ALGO1 mode only decays the head (fc_weight_decay)",
                ));
            }
            Mode::WnFc | Mode::FixNormFc => {
                for (key, v) in [
                    ("weight_decay", self.weight_decay),
                    ("fc_weight_decay", self.fc_weight_decay),
                ] {
                    if v > 0.0 {
                        return Err(Error::config(
                            key,
                            format!("{} mode uses no weight decay", self.mode),
                        ));
                    }
                }
            }
            _ => {}
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config("label_smoothing", "must lie in [0, 1)"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::config(
                "batch_size",
                "batch norm needs at least 2 samples per batch",
            ));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::config(
                "warmup_epochs",
                "must be smaller than epochs",
            ));
        }
        Ok(())
    }
}

/// Per-epoch snapshot, persisted as one JSON object per line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: u32,
    /// Optimizer steps completed at the end of this epoch.
    pub step: u64,
    /// Schedule multiplier of the epoch's last step.
    pub lr_mult: f64,
    pub train_loss: f64,
    pub val_top1: f64,
    /// Joint norm of the (possibly) norm-fixed weights.
    pub group_norm: f64,
    /// `‖W^FC‖` for a plain head, the effective gain otherwise.
    pub head_gain: f64,
    pub mcbr_train: f64,
    pub mcbr_val: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunResult {
    pub final_top1: f64,
    pub best_top1: f64,
    pub failed: bool,
    pub failure: Option<String>,
    pub metrics_path: Option<PathBuf>,
    pub steps: u64,
    pub initial_group_norm: f64,
    pub initial_head_gain: f64,
    /// Largest `|‖W_t‖ - ‖W_0‖| / ‖W_0‖` over every step of the tracked group.
    pub max_norm_deviation: f64,
    pub records: Vec<MetricsRecord>,
    #[serde(skip)]
    pub config: TrainConfig,
}

/// Steps per epoch with the partial final batch dropped.
pub fn steps_per_epoch(n_train: usize, batch_size: usize) -> Result<u64> {
    if n_train < batch_size {
        return Err(Error::config(
            "batch_size",
            format!("{batch_size} exceeds the {n_train} training samples"),
        ));
    }
    Ok((n_train / batch_size) as u64)
}

/// Indices of the batch used at global step `t`.
///
/// Each epoch draws a fresh permutation from `(seed, epoch)`; the partial
/// final batch is dropped.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    n: usize,
    batch_size: usize,
    seed: u64,
    cached: Option<(u64, Vec<usize>)>,
}

impl BatchSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::config("dataset", "empty training set"));
        }
        steps_per_epoch(n, batch_size)?;
        Ok(BatchSampler {
            n,
            batch_size,
            seed,
            cached: None,
        })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        (self.n / self.batch_size) as u64
    }

    pub fn epoch_permutation(&self, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch + 1);
        let mut perm: Vec<usize> = (0..self.n).collect();
        perm.shuffle(&mut rng);
        perm
    }

    pub fn indices(&mut self, t: u64) -> &[usize] {
        let spe = self.steps_per_epoch();
        let (epoch, within) = (t / spe, (t % spe) as usize);
        if self.cached.as_ref().map(|c| c.0) != Some(epoch) {
            self.cached = Some((epoch, self.epoch_permutation(epoch)));
        }
        let perm = &self.cached.as_ref().expect("just cached").1;
        &perm[within * self.batch_size..(within + 1) * self.batch_size]
    }
}

/// The `(x, y)` batch at step `t`.
pub fn batch_sampler(
    t: u64,
    data: &Dataset,
    batch_size: usize,
    seed: u64,
) -> Result<(Tensor, Vec<usize>)> {
    let mut s = BatchSampler::new(data.len(), batch_size, seed)?;
    let idx = s.indices(t).to_vec();
    Ok((
        data.features.gather_rows(&idx),
        idx.iter().map(|&i| data.labels[i]).collect(),
    ))
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn top1_from_logits(logits: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let c = logits.shape()[1];
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| kernels::argmax(&logits.data()[i * c..(i + 1) * c]) == y)
        .count();
    hits as f64 / labels.len() as f64
}

/// Eval-mode top-1 accuracy of `net` on `data`.
pub fn evaluate_top1(net: &mut Network, data: &Dataset) -> Result<f64> {
    let (logits, _) = net.predict(&data.features)?;
    Ok(top1_from_logits(&logits, &data.labels))
}

struct EpochEval {
    val_top1: f64,
    mcbr_train: f64,
    mcbr_val: f64,
}

fn evaluate_epoch(
    net: &mut Network,
    train_probe: &Dataset,
    val: &Dataset,
    val_probe: usize,
) -> Result<EpochEval> {
    let (val_logits, val_feats) = net.predict(&val.features)?;
    let val_top1 = top1_from_logits(&val_logits, &val.labels);
    let w = net.head_weight().clone();
    let probe: Vec<usize> = (0..val.len().min(val_probe)).collect();
    let mcbr_val = heads::mcbr(
        &val_feats.gather_rows(&probe),
        &probe.iter().map(|&i| val.labels[i]).collect::<Vec<_>>(),
        &w,
    )?
    .mean;
    let (_, train_feats) = net.predict(&train_probe.features)?;
    let mcbr_train = heads::mcbr(&train_feats, &train_probe.labels, &w)?.mean;
    Ok(EpochEval {
        val_top1,
        mcbr_train,
        mcbr_val,
    })
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite(_) | Error::Divergence { .. })
}

/// Runs `config` on `data`. When `metrics_path` is given the per-epoch
/// records are written there as JSON lines.
///
/// A run that produces a non-finite loss or gradient is not an error: it is
/// returned with `failed = true` and top-1 of 0.
pub fn train_run(
    config: &TrainConfig,
    data: &Splits,
    metrics_path: Option<&Path>,
) -> Result<RunResult> {
    config.validate()?;
    if data.train.classes != data.val.classes {
        return Err(Error::config(
            "dataset",
            "train and val class counts differ",
        ));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (mut net, mut groups) = build_model(
        config.model,
        config.mode,
        config.alpha,
        config.weight_decay,
        config.fc_weight_decay,
        data.train.sample_shape(),
        data.train.classes,
        &mut init_rng,
    )?;
    capture_initial_norms(&mut groups, &net.params)?;

    let mut sampler = BatchSampler::new(data.train.len(), config.batch_size, config.seed)?;
    let spe = sampler.steps_per_epoch();
    let total = spe * u64::from(config.epochs);
    let schedule = Schedule::new(total, spe * u64::from(config.warmup_epochs))?;
    let mut opt = Sgd::new(config.lr, config.momentum, config.nesterov, &net.params);
    let train_probe = data.train.head(config.mcbr_samples);

    let initial_norm = net.tracked_norm();
    let initial_head_gain = net.head_gain();
    let mut max_dev = 0.0f64;
    let mut records = Vec::with_capacity(config.epochs as usize);
    let mut failure = None;
    let mut step = 0u64;

    'epochs: for epoch in 0..config.epochs {
        let mut loss_sum = 0.0;
        let mut lr_mult = 0.0;
        for _ in 0..spe {
            let idx = sampler.indices(step).to_vec();
            let x = data.train.features.gather_rows(&idx);
            let y: Vec<usize> = idx.iter().map(|&i| data.train.labels[i]).collect();
            let outcome = (|| -> Result<f64> {
                let mut tape = Tape::new();
                let fw = net.forward(&mut tape, x, true)?;
                let loss = tape.softmax_ce(fw.logits, &y, config.label_smoothing)?;
                let lv = tape.value(loss).item();
                let mut grads = tape.backward(loss)?;
                let g: Vec<Tensor> = fw.params.iter().map(|&v| grads.take(v)).collect();
                lr_mult = schedule.multiplier(step)?;
                opt.step(&mut net.params, &g, &groups, lr_mult)?;
                Ok(lv)
            })();
            match outcome {
                Ok(lv) => loss_sum += lv,
                Err(e) if is_divergence(&e) => {
                    failure = Some(format!("step {step}: {e}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            step += 1;
            let dev = ((net.tracked_norm() - initial_norm) / initial_norm).abs();
            max_dev = max_dev.max(dev);
        }
        let eval = match evaluate_epoch(&mut net, &train_probe, &data.val, config.mcbr_samples) {
            Ok(e) => e,
            Err(e) if is_divergence(&e) => {
                failure = Some(format!("evaluation after epoch {epoch}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        records.push(MetricsRecord {
            epoch,
            step,
            lr_mult,
            train_loss: loss_sum / spe as f64,
            val_top1: eval.val_top1,
            group_norm: net.tracked_norm(),
            head_gain: net.head_gain(),
            mcbr_train: eval.mcbr_train,
            mcbr_val: eval.mcbr_val,
        });
    }

    if let Some(p) = metrics_path {
        metrics::write_jsonl(p, &records)?;
    }
    let failed = failure.is_some();
    let final_top1 = if failed {
        0.0
    } else {
        records.last().map_or(0.0, |r| r.val_top1)
    };
    let best_top1 = if failed {
        0.0
    } else {
        records.iter().map(|r| r.val_top1).fold(0.0, f64::max)
    };
    Ok(RunResult {
        final_top1,
        best_top1,
        failed,
        failure,
        metrics_path: metrics_path.map(Path::to_path_buf),
        steps: step,
        initial_group_norm: initial_norm,
        initial_head_gain,
        max_norm_deviation: max_dev,
        records,
        config: config.clone(),
    })
}
