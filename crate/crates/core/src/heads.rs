//! Weight-normalized classification heads and the cross-boundary risk metric.
//!
//! All heads normalize by the Frobenius norm of the *whole* weight tensor and
//! carry a single scalar gain. The capped variants clamp the gain at
//! `alpha * sqrt(n)`, where `n` is the class count (FC head) or the output
//! channel count (conv head).

use crate::autodiff::{kernels, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Weight-normalized FC head: `(x W / ‖W‖) · g`.
#[derive(Clone, Debug, PartialEq)]
pub struct WnFcParams {
    /// `[D×C]`, column `i` is the center of class `i`.
    pub weight: Tensor,
    pub gain: f64,
}

/// WN-FC head whose gain is capped at `alpha * sqrt(C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FixNormFcParams {
    pub weight: Tensor,
    pub gain: f64,
    pub alpha: f64,
}

impl FixNormFcParams {
    pub fn classes(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn effective_gain(&self) -> f64 {
        effective_gain(self.gain, self.alpha, self.classes())
    }
}

/// Convolutional analogue of [`FixNormFcParams`], capped at `alpha * sqrt(c_out)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FixNormConvParams {
    /// `[c_out×c_in×k_h×k_w]`
    pub kernel: Tensor,
    pub gain: f64,
    pub alpha: f64,
    pub stride: usize,
    pub pad: usize,
}

impl FixNormConvParams {
    pub fn effective_gain(&self) -> f64 {
        effective_gain(self.gain, self.alpha, self.kernel.shape()[0])
    }
}

/// `alpha * sqrt(n)`.
pub fn gain_cap(alpha: f64, n: usize) -> f64 {
    alpha * (n as f64).sqrt()
}

/// `min(g, alpha * sqrt(n))`, the value the capped heads actually multiply by.
pub fn effective_gain(gain: f64, alpha: f64, n: usize) -> f64 {
    let cap = gain_cap(alpha, n);
    if gain <= cap {
        gain
    } else {
        cap
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 {
        Ok(())
    } else {
        Err(Error::config(
            "alpha",
            format!("must be positive, got {alpha}"),
        ))
    }
}

/// Records the WN-FC head on `tape`.
pub fn wn_fc(tape: &mut Tape, x: Var, weight: Var, gain: Var) -> Result<Var> {
    let direction = tape.frob_normalize(weight)?;
    let proj = tape.linear(x, direction)?;
    tape.scale_by(proj, gain)
}

/// Records the FixNorm-FC head on `tape`. With the cap inactive this records
/// exactly the same arithmetic as [`wn_fc`], so the two agree bit for bit.
pub fn fixnorm_fc(tape: &mut Tape, x: Var, weight: Var, gain: Var, alpha: f64) -> Result<Var> {
    check_alpha(alpha)?;
    let classes = tape.value(weight).shape().get(1).copied().unwrap_or(0);
    let direction = tape.frob_normalize(weight)?;
    let proj = tape.linear(x, direction)?;
    let g = tape.capped_gain(gain, gain_cap(alpha, classes))?;
    tape.scale_by(proj, g)
}

/// Records the FixNorm-Conv head on `tape`.
pub fn fixnorm_conv(
    tape: &mut Tape,
    x: Var,
    kernel: Var,
    gain: Var,
    alpha: f64,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    check_alpha(alpha)?;
    let c_out = tape.value(kernel).shape()[0];
    let direction = tape.frob_normalize(kernel)?;
    let y = tape.conv2d(x, direction, stride, pad)?;
    let g = tape.capped_gain(gain, gain_cap(alpha, c_out))?;
    tape.scale_by(y, g)
}

pub fn wn_fc_forward(x: &Tensor, p: &WnFcParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (xv, wv, gv) = (
        tape.leaf(x.clone()),
        tape.leaf(p.weight.clone()),
        tape.leaf(Tensor::scalar(p.gain)),
    );
    let y = wn_fc(&mut tape, xv, wv, gv)?;
    Ok(tape.value(y).clone())
}

pub fn fixnorm_fc_forward(x: &Tensor, p: &FixNormFcParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (xv, wv, gv) = (
        tape.leaf(x.clone()),
        tape.leaf(p.weight.clone()),
        tape.leaf(Tensor::scalar(p.gain)),
    );
    let y = fixnorm_fc(&mut tape, xv, wv, gv, p.alpha)?;
    Ok(tape.value(y).clone())
}

pub fn fixnorm_conv_forward(x: &Tensor, p: &FixNormConvParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (xv, kv, gv) = (
        tape.leaf(x.clone()),
        tape.leaf(p.kernel.clone()),
        tape.leaf(Tensor::scalar(p.gain)),
    );
    let y = fixnorm_conv(&mut tape, xv, kv, gv, p.alpha, p.stride, p.pad)?;
    Ok(tape.value(y).clone())
}

/// Closed form of `-∂(-log p_k)/∂x` for one sample through a WN-FC head:
///
/// `(g / ‖W‖) Σ_{j≠k} p_j (W_k - W_j)` with `p = softmax(x W g / ‖W‖)`.
///
/// It points from the other class centers toward the label's center, with
/// weights that vanish as `p_k -> 1`. Computed without the tape so it can
/// serve as an independent check of it.
pub fn closed_form_input_grad(x: &[f64], label: usize, p: &WnFcParams) -> Result<Vec<f64>> {
    let ws = p.weight.shape();
    if ws.len() != 2 || ws[0] != x.len() {
        return Err(Error::Dimension(format!(
            "closed_form_input_grad: x has {} features, W is {ws:?}",
            x.len()
        )));
    }
    let (d, c) = (ws[0], ws[1]);
    if label >= c {
        return Err(Error::Index { label, classes: c });
    }
    let norm = p.weight.norm();
    if norm == 0.0 {
        return Err(Error::DegenerateWeights("class weight matrix".into()));
    }
    let w = p.weight.data();
    let col = |i: usize, r: usize| w[r * c + i];
    let scale = p.gain / norm;
    let logits: Vec<f64> = (0..c)
        .map(|i| (0..d).map(|r| x[r] * col(i, r)).sum::<f64>() * scale)
        .collect();
    let probs: Vec<f64> = kernels::log_softmax(&logits)
        .iter()
        .map(|v| v.exp())
        .collect();
    let mut out = vec![0.0; d];
    for (j, pj) in probs.iter().enumerate() {
        if j == label {
            continue;
        }
        for (r, o) in out.iter_mut().enumerate() {
            *o += pj * (col(label, r) - col(j, r));
        }
    }
    out.iter_mut().for_each(|o| *o *= scale);
    Ok(out)
}

/// Per-sample and batch-mean cross-boundary risk.
#[derive(Clone, Debug, PartialEq)]
pub struct Mcbr {
    pub per_sample: Vec<f64>,
    pub mean: f64,
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (
        a.iter().map(|v| v * v).sum::<f64>().sqrt(),
        b.iter().map(|v| v * v).sum::<f64>().sqrt(),
    );
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Mean cross-boundary risk of features `x[B×D]` under class weights `W[D×C]`:
/// for each sample with label `k`, `(1/(C-1)) Σ_{j≠k} cos(x, W_j - W_k)`.
///
/// A term whose feature vector is zero or whose `W_j - W_k` is zero adds 0,
/// and the divisor stays `C - 1`.
pub fn mcbr(x: &Tensor, labels: &[usize], weight: &Tensor) -> Result<Mcbr> {
    let (xs, ws) = (x.shape(), weight.shape());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || xs[0] != labels.len() {
        return Err(Error::Dimension(format!(
            "mcbr: features {xs:?}, weights {ws:?}, {} labels",
            labels.len()
        )));
    }
    let (d, c) = (ws[0], ws[1]);
    if c < 2 {
        return Err(Error::Dimension("mcbr needs at least 2 classes".into()));
    }
    let w = weight.data();
    let mut diff = vec![0.0; d];
    let mut per_sample = Vec::with_capacity(labels.len());
    for (b, &k) in labels.iter().enumerate() {
        if k >= c {
            return Err(Error::Index {
                label: k,
                classes: c,
            });
        }
        let row = x.row(b);
        let mut acc = 0.0;
        for j in (0..c).filter(|&j| j != k) {
            for (r, dv) in diff.iter_mut().enumerate() {
                *dv = w[r * c + j] - w[r * c + k];
            }
            acc += cosine(row, &diff).unwrap_or(0.0);
        }
        per_sample.push(acc / (c - 1) as f64);
    }
    let mean = per_sample.iter().sum::<f64>() / per_sample.len().max(1) as f64;
    Ok(Mcbr { per_sample, mean })
}
