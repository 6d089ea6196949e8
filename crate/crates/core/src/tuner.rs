//! Budgeted two-phase search over the learning rate and the FixNorm cap α.
//!
//! Phase 1 runs `N` rounds of a `K`-point lr grid. Each round's best lr
//! becomes the upper bound of the next round's range, since the best lr
//! under a short budget tends to bound the best lr under a longer one.
//! Phase 2 fixes the best lr and sweeps the remaining α candidates at the
//! final budget.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Splits;
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::Mode;
use crate::train::{steps_per_epoch, train_run, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TunerConfig {
    pub lr_min: f64,
    pub lr_max: f64,
    /// Grid points per lr round (`K`).
    pub splits: usize,
    /// Budget of each lr round, in epochs. Fractions round up.
    pub budgets: Vec<f64>,
    /// α candidates; the first one is used throughout Phase 1.
    pub alphas: Vec<f64>,
    /// Trials allowed to run at once.
    pub parallelism: usize,
}

impl Default for TunerConfig {
    fn default() -> Self {
        TunerConfig {
            lr_min: 0.2,
            lr_max: 3.2,
            splits: 5,
            budgets: vec![6.0, 30.0],
            alphas: vec![0.5, 1.0, 2.0, 4.0, 8.0, 16.0],
            parallelism: 1,
        }
    }
}

impl TunerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min >= 0.0 && self.lr_max.is_finite()) {
            return Err(Error::config(
                "lr_min",
                "lr range must be finite with lr_min >= 0",
            ));
        }
        if self.lr_min >= self.lr_max {
            return Err(Error::config(
                "lr_min",
                format!(
                    "lr_min ({}) must be below lr_max ({})",
                    self.lr_min, self.lr_max
                ),
            ));
        }
        if self.splits < 2 {
            return Err(Error::config(
                "lr_splits",
                "need at least 2 grid points per round",
            ));
        }
        if self.budgets.is_empty() {
            return Err(Error::config("budgets", "need at least one lr round"));
        }
        if self.budgets.iter().any(|&b| !(b > 0.0 && b.is_finite())) {
            return Err(Error::config(
                "budgets",
                "every budget must be finite and > 0",
            ));
        }
        if self.budgets.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::config("budgets", "budgets must be non-decreasing"));
        }
        if self.alphas.is_empty() {
            return Err(Error::config("alphas", "need at least one alpha candidate"));
        }
        if self.alphas.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return Err(Error::config(
                "alphas",
                "every alpha must be finite and > 0",
            ));
        }
        if self.parallelism == 0 {
            return Err(Error::config("parallelism", "must be at least 1"));
        }
        Ok(())
    }

    pub fn rounds(&self) -> usize {
        self.budgets.len()
    }

    /// Whole-epoch budget of round `r`.
    pub fn round_epochs(&self, r: usize) -> u32 {
        self.budgets[r].ceil() as u32
    }

    pub fn final_epochs(&self) -> u32 {
        self.round_epochs(self.rounds() - 1)
    }
}

/// `K` points `lr_min + i (lr_max - lr_min) / K` for `i = 1..=K`.
pub fn uniform_split(lr_min: f64, lr_max: f64, k: usize) -> Result<Vec<f64>> {
    if !lr_min.is_finite() || !lr_max.is_finite() || lr_min >= lr_max {
        return Err(Error::config(
            "lr_min",
            format!("invalid lr range [{lr_min}, {lr_max}]"),
        ));
    }
    if k == 0 {
        return Err(Error::config("lr_splits", "must be at least 1"));
    }
    let step = (lr_max - lr_min) / k as f64;
    Ok((1..=k)
        .map(|i| {
            if i == k {
                lr_max
            } else {
                lr_min + i as f64 * step
            }
        })
        .collect())
}

/// Total epochs the search consumes: `K Σ T_r + (m - 1) T_{N-1}`.
pub fn budget_of(cfg: &TunerConfig) -> u64 {
    let k = cfg.splits as u64;
    let phase1: u64 = (0..cfg.rounds())
        .map(|r| u64::from(cfg.round_epochs(r)))
        .sum();
    k * phase1 + (cfg.alphas.len() as u64 - 1) * u64::from(cfg.final_epochs())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRequest {
    pub phase: u8,
    pub round: usize,
    /// Position within its round (or within Phase 2).
    pub index: usize,
    pub lr: f64,
    pub alpha: f64,
    pub budget_epochs: u32,
}

impl TrialRequest {
    /// Stable directory-friendly name.
    pub fn tag(&self) -> String {
        format!("p{}-r{}-i{}", self.phase, self.round, self.index)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub top1: f64,
    pub failed: bool,
    pub steps: u64,
    pub metrics_path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub phase: u8,
    pub round: usize,
    pub index: usize,
    pub lr: f64,
    pub alpha: f64,
    pub budget_epochs: u32,
    pub top1: f64,
    pub failed: bool,
    pub steps: u64,
    pub metrics_path: Option<PathBuf>,
}

impl TrialRecord {
    fn new(req: &TrialRequest, out: TrialOutcome) -> Self {
        let top1 = if out.failed { 0.0 } else { out.top1 };
        TrialRecord {
            phase: req.phase,
            round: req.round,
            index: req.index,
            lr: req.lr,
            alpha: req.alpha,
            budget_epochs: req.budget_epochs,
            top1,
            failed: out.failed,
            steps: out.steps,
            metrics_path: out.metrics_path,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TunerResult {
    pub lr_best: f64,
    pub alpha_best: f64,
    pub acc_best: f64,
    /// Upper bound of the lr range after each round.
    pub lr_max_trace: Vec<f64>,
    pub trials: Vec<TrialRecord>,
    pub total_steps: u64,
    pub total_epochs: u64,
    pub planned_epochs: u64,
}

/// Index of the first maximum.
fn first_argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Runs `reqs` with up to `width` threads and returns the records in
/// request order regardless of completion order.
fn run_batch<F>(reqs: &[TrialRequest], width: usize, objective: &F) -> Result<Vec<TrialRecord>>
where
    F: Fn(&TrialRequest) -> Result<TrialOutcome> + Sync,
{
    let slots: Vec<Mutex<Option<Result<TrialOutcome>>>> =
        reqs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = width.min(reqs.len()).max(1);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= reqs.len() {
                    break;
                }
                let out = objective(&reqs[i]);
                *slots[i].lock().expect("trial slot poisoned") = Some(out);
            });
        }
    });
    reqs.iter()
        .zip(slots)
        .map(|(req, slot)| {
            let out = slot
                .into_inner()
                .expect("trial slot poisoned")
                .expect("every slot is filled once the scope joins")?;
            Ok(TrialRecord::new(req, out))
        })
        .collect()
}

/// Runs the search, calling `objective` once per trial. When `ledger` is
/// given every record is appended to it as a JSON line, in trial order.
pub fn tune<F>(cfg: &TunerConfig, ledger: Option<&Path>, objective: F) -> Result<TunerResult>
where
    F: Fn(&TrialRequest) -> Result<TrialOutcome> + Sync,
{
    cfg.validate()?;
    if let Some(p) = ledger {
        metrics::write_jsonl::<TrialRecord>(p, &[])?;
    }
    let mut trials: Vec<TrialRecord> = Vec::new();
    let commit = |batch: Vec<TrialRecord>, trials: &mut Vec<TrialRecord>| -> Result<()> {
        if let Some(p) = ledger {
            for rec in &batch {
                metrics::append_jsonl(p, rec)?;
            }
        }
        trials.extend(batch);
        Ok(())
    };

    let mut alpha_best = cfg.alphas[0];
    let mut lr_best: Option<f64> = None;
    let mut acc_best = 0.0;
    let mut lr_max = cfg.lr_max;
    let mut lr_max_trace = Vec::with_capacity(cfg.rounds());

    for r in 0..cfg.rounds() {
        let grid = uniform_split(cfg.lr_min, lr_max, cfg.splits)?;
        let reqs: Vec<TrialRequest> = grid
            .iter()
            .enumerate()
            .map(|(k, &lr)| TrialRequest {
                phase: 1,
                round: r,
                index: k,
                lr,
                alpha: alpha_best,
                budget_epochs: cfg.round_epochs(r),
            })
            .collect();
        let batch = run_batch(&reqs, cfg.parallelism, &objective)?;
        let acc: Vec<f64> = batch.iter().map(|t| t.top1).collect();
        let idx = first_argmax(&acc);
        lr_max = grid[idx];
        lr_max_trace.push(lr_max);
        if acc[idx] > acc_best {
            acc_best = acc[idx];
            lr_best = Some(grid[idx]);
        }
        commit(batch, &mut trials)?;
    }
    let lr_best = lr_best.ok_or_else(|| {
        Error::Tuner("every Phase-1 trial failed or scored 0; no usable learning rate".into())
    })?;

    if cfg.alphas.len() > 1 {
        let reqs: Vec<TrialRequest> = cfg.alphas[1..]
            .iter()
            .enumerate()
            .map(|(i, &alpha)| TrialRequest {
                phase: 2,
                round: cfg.rounds(),
                index: i,
                lr: lr_best,
                alpha,
                budget_epochs: cfg.final_epochs(),
            })
            .collect();
        let batch = run_batch(&reqs, cfg.parallelism, &objective)?;
        let acc: Vec<f64> = batch.iter().map(|t| t.top1).collect();
        let idx = first_argmax(&acc);
        if acc[idx] > acc_best {
            acc_best = acc[idx];
            alpha_best = cfg.alphas[idx + 1];
        }
        commit(batch, &mut trials)?;
    }

    Ok(TunerResult {
        lr_best,
        alpha_best,
        acc_best,
        lr_max_trace,
        total_steps: trials.iter().map(|t| t.steps).sum(),
        total_epochs: trials.iter().map(|t| u64::from(t.budget_epochs)).sum(),
        planned_epochs: budget_of(cfg),
        trials,
    })
}

/// The FIXNORM_FC training config for one trial derived from `template`.
///
/// Warmup is clamped to leave at least one post-warmup epoch on short
/// budgets.
pub fn trial_config(
    template: &TrainConfig,
    lr: f64,
    alpha: f64,
    budget_epochs: u32,
) -> Result<TrainConfig> {
    if budget_epochs == 0 {
        return Err(Error::config(
            "budgets",
            "trial budget must be at least one epoch",
        ));
    }
    Ok(TrainConfig {
        mode: Mode::FixNormFc,
        lr,
        alpha,
        weight_decay: 0.0,
        fc_weight_decay: 0.0,
        epochs: budget_epochs,
        warmup_epochs: template.warmup_epochs.min(budget_epochs - 1),
        ..template.clone()
    })
}

/// One real training trial. A diverged run is a failed record, not an error.
pub fn run_trial(
    req: &TrialRequest,
    template: &TrainConfig,
    data: &Splits,
    metrics_path: Option<&Path>,
) -> Result<TrialOutcome> {
    let cfg = trial_config(template, req.lr, req.alpha, req.budget_epochs)?;
    let r = train_run(&cfg, data, metrics_path)?;
    Ok(TrialOutcome {
        top1: r.final_top1,
        failed: r.failed,
        steps: r.steps,
        metrics_path: r.metrics_path,
    })
}

/// Planned optimizer steps for a real search over `data`.
pub fn budget_steps(cfg: &TunerConfig, template: &TrainConfig, data: &Splits) -> Result<u64> {
    Ok(budget_of(cfg) * steps_per_epoch(data.train.len(), template.batch_size)?)
}

/// Synthetic accuracy surface used to exercise the tuner without training.
///
/// `top1 = A(b) · exp(-(ln lr - ln lr*(b))² / 2w²) · exp(-(ln α - ln α*)² / 2s²)`
/// with `lr*(b) = lr_peak (b / b_ref)^(-shift)` moving down as the budget grows
/// and `A(b) = 1 - 0.5 e^{-b / b_ref}` growing with it. A seeded uniform noise
/// term of amplitude `noise` may be added.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Surrogate {
    pub lr_peak: f64,
    pub shift: f64,
    pub lr_width: f64,
    pub alpha_peak: f64,
    pub alpha_width: f64,
    pub budget_ref: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Surrogate {
    /// A random noiseless instance with its peak inside `[0.3, 2.5]`.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Surrogate {
            lr_peak: (rng.random_range(0.3f64.ln()..2.5f64.ln())).exp(),
            shift: rng.random_range(0.1..0.6),
            lr_width: rng.random_range(0.6..1.5),
            alpha_peak: (rng.random_range(0.4f64.ln()..20f64.ln())).exp(),
            alpha_width: rng.random_range(0.5..1.5),
            budget_ref: 10.0,
            noise: 0.0,
            seed,
        }
    }

    pub fn peak_lr(&self, budget: f64) -> f64 {
        self.lr_peak * (budget / self.budget_ref).powf(-self.shift)
    }

    pub fn amplitude(&self, budget: f64) -> f64 {
        1.0 - 0.5 * (-budget / self.budget_ref).exp()
    }

    pub fn lr_factor(&self, lr: f64, budget: f64) -> f64 {
        if lr <= 0.0 {
            return 0.0;
        }
        let d = lr.ln() - self.peak_lr(budget).ln();
        (-d * d / (2.0 * self.lr_width * self.lr_width)).exp()
    }

    pub fn alpha_factor(&self, alpha: f64) -> f64 {
        let d = alpha.ln() - self.alpha_peak.ln();
        (-d * d / (2.0 * self.alpha_width * self.alpha_width)).exp()
    }

    pub fn eval(&self, lr: f64, alpha: f64, budget: f64) -> f64 {
        let clean = self.amplitude(budget) * self.lr_factor(lr, budget) * self.alpha_factor(alpha);
        if self.noise == 0.0 {
            return clean;
        }
        let mut h = self.seed
            ^ lr.to_bits().rotate_left(17)
            ^ alpha.to_bits().rotate_left(31)
            ^ budget.to_bits();
        h = h.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        (clean + self.noise * rng.random_range(-1.0..1.0)).clamp(0.0, 1.0)
    }

    /// Objective for [`tune`]: one step per budget epoch.
    pub fn objective(&self) -> impl Fn(&TrialRequest) -> Result<TrialOutcome> + Sync + '_ {
        move |req| {
            Ok(TrialOutcome {
                top1: self.eval(req.lr, req.alpha, f64::from(req.budget_epochs)),
                failed: false,
                steps: u64::from(req.budget_epochs),
                metrics_path: None,
            })
        }
    }
}
