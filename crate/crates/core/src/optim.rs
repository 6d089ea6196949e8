//! SGD with momentum, the warmup-cosine multiplier, per-group weight decay and
//! the norm-fix projection.
//!
//! The update follows the literal heavy-ball form in which the learning rate
//! is applied after accumulation:
//!
//! ```text
//! g~ = ∇L + λ W                (decay only for groups with λ > 0)
//! V  = μ V + g~
//! W  = W - lr · η_t · V        (heavy-ball)
//! W  = W - lr · η_t · (g~ + μ V)   (Nesterov)
//! ```
//!
//! after which every norm-fixed group is rescaled back onto the sphere of its
//! initial joint norm.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{joint_norm, Tensor};

/// A named set of parameters sharing decay and norm-fix behavior.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    /// Indices into the parameter list.
    pub members: Vec<usize>,
    pub norm_fixed: bool,
    pub decay: f64,
    pub initial_norm: Option<f64>,
}

impl ParamGroup {
    pub fn free(name: impl Into<String>, members: Vec<usize>) -> Self {
        ParamGroup {
            name: name.into(),
            members,
            norm_fixed: false,
            decay: 0.0,
            initial_norm: None,
        }
    }

    pub fn decayed(name: impl Into<String>, members: Vec<usize>, decay: f64) -> Self {
        ParamGroup {
            decay,
            ..Self::free(name, members)
        }
    }

    pub fn norm_fixed(name: impl Into<String>, members: Vec<usize>) -> Self {
        ParamGroup {
            norm_fixed: true,
            ..Self::free(name, members)
        }
    }

    pub fn joint_norm(&self, params: &[Tensor]) -> f64 {
        joint_norm(self.members.iter().map(|&i| &params[i]))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.decay >= 0.0 && self.decay.is_finite()) {
            return Err(Error::config(
                format!("{}.decay", self.name),
                format!("must be finite and >= 0, got {}", self.decay),
            ));
        }
        if self.norm_fixed && self.decay > 0.0 {
            return Err(Error::config(
                format!("{}.decay", self.name),
                "a norm-fixed group cannot also carry weight decay",
            ));
        }
        if self.norm_fixed && self.members.is_empty() {
            return Err(Error::config(
                format!("{}.members", self.name),
                "norm-fixed group has no members",
            ));
        }
        Ok(())
    }
}

/// Checks every group and that the groups partition `0..n_params`.
pub fn validate_groups(groups: &[ParamGroup], n_params: usize) -> Result<()> {
    let mut seen = vec![false; n_params];
    for g in groups {
        g.validate()?;
        for &m in &g.members {
            if m >= n_params || seen[m] {
                return Err(Error::config(
                    format!("{}.members", g.name),
                    format!("parameter {m} is out of range or already grouped"),
                ));
            }
            seen[m] = true;
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::config(
            "groups",
            format!("parameter {missing} belongs to no group"),
        ));
    }
    Ok(())
}

/// Records the joint norm of every norm-fixed group. Must run once, before
/// the first step.
pub fn capture_initial_norms(groups: &mut [ParamGroup], params: &[Tensor]) -> Result<()> {
    for g in groups.iter_mut().filter(|g| g.norm_fixed) {
        if g.initial_norm.is_some() {
            return Err(Error::State(format!(
                "initial norm of group `{}` already captured",
                g.name
            )));
        }
        if g.members.is_empty() {
            return Err(Error::config(
                format!("{}.members", g.name),
                "norm-fixed group has no members",
            ));
        }
        let n = g.joint_norm(params);
        if n == 0.0 {
            return Err(Error::DegenerateWeights(format!("group `{}`", g.name)));
        }
        g.initial_norm = Some(n);
    }
    Ok(())
}

/// Rescales every member so the group's joint norm equals its initial norm.
pub fn fix_group_norm(group: &ParamGroup, params: &mut [Tensor]) -> Result<()> {
    if !group.norm_fixed {
        return Err(Error::State(format!(
            "group `{}` is not norm-fixed",
            group.name
        )));
    }
    let target = group.initial_norm.ok_or_else(|| {
        Error::State(format!(
            "initial norm of group `{}` never captured",
            group.name
        ))
    })?;
    let current = group.joint_norm(params);
    if current == 0.0 {
        return Err(Error::DegenerateWeights(format!("group `{}`", group.name)));
    }
    let factor = target / current;
    for &m in &group.members {
        params[m].scale_in_place(factor);
    }
    Ok(())
}

/// Linear warmup followed by one half-cosine to zero, in steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Schedule {
    pub total_steps: u64,
    pub warmup_steps: u64,
}

impl Schedule {
    pub fn new(total_steps: u64, warmup_steps: u64) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::config("epochs", "schedule needs at least one step"));
        }
        if warmup_steps >= total_steps {
            return Err(Error::config(
                "warmup_epochs",
                format!("warmup ({warmup_steps} steps) must be shorter than training ({total_steps} steps)"),
            ));
        }
        Ok(Schedule {
            total_steps,
            warmup_steps,
        })
    }

    /// `(t+1)/T_w` during warmup, then `½(1 + cos(π (t - T_w) / (T - T_w)))`.
    pub fn multiplier(&self, t: u64) -> Result<f64> {
        if t >= self.total_steps {
            return Err(Error::State(format!(
                "step {t} beyond schedule of {} steps",
                self.total_steps
            )));
        }
        if t < self.warmup_steps {
            return Ok((t + 1) as f64 / self.warmup_steps as f64);
        }
        let progress =
            (t - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        Ok(0.5 * (1.0 + (PI * progress).cos()))
    }
}

/// Momentum SGD state for one run.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    velocity: Vec<Tensor>,
    steps: u64,
}

impl Sgd {
    /// Velocities start at zero.
    pub fn new(lr: f64, momentum: f64, nesterov: bool, params: &[Tensor]) -> Self {
        Sgd {
            lr,
            momentum,
            nesterov,
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            steps: 0,
        }
    }

    pub fn velocity(&self, i: usize) -> &Tensor {
        &self.velocity[i]
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps
    }

    /// One update of every parameter, then the norm-fix projection of every
    /// norm-fixed group. `lr_mult` is the schedule multiplier for this step.
    pub fn step(
        &mut self,
        params: &mut [Tensor],
        grads: &[Tensor],
        groups: &[ParamGroup],
        lr_mult: f64,
    ) -> Result<()> {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.velocity.len());
        if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
            return Err(Error::Divergence {
                step: self.steps,
                what: format!("non-finite gradient for parameter {i}"),
            });
        }
        let mut decay = vec![0.0; params.len()];
        for g in groups {
            for &m in &g.members {
                decay[m] = g.decay;
            }
        }
        let (mu, rate) = (self.momentum, self.lr * lr_mult);
        for (i, p) in params.iter_mut().enumerate() {
            let v = &mut self.velocity[i];
            let lam = decay[i];
            let pd = p.data_mut();
            for ((w, vel), &g) in pd.iter_mut().zip(v.data_mut()).zip(grads[i].data()) {
                let gt = g + lam * *w;
                *vel = mu * *vel + gt;
                let update = if self.nesterov { gt + mu * *vel } else { *vel };
                *w -= rate * update;
            }
        }
        for g in groups.iter().filter(|g| g.norm_fixed) {
            fix_group_norm(g, params)?;
        }
        self.steps += 1;
        Ok(())
    }
}
