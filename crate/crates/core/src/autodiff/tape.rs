//! Wengert-list reverse-mode differentiation.
//!
//! Each op appends one node holding its output value and whatever the
//! vector-Jacobian product needs. Nodes only reference earlier nodes, so
//! walking the list backwards is a reverse topological order.

use crate::autodiff::kernels::{self, ChannelLayout, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm buffers that live outside the tape.
///
/// The affine scale and shift are ordinary parameters and enter the tape as
/// leaves; only the running statistics are kept here.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNormState {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.9;

    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: Self::EPS,
            momentum: Self::MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Conv2d {
        x: Var,
        k: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        layout: ChannelLayout,
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    Relu {
        x: Var,
    },
    GlobalAvgPool {
        x: Var,
        spatial: usize,
    },
    SoftmaxCe {
        logits: Var,
        /// `(p - target) / B`, the whole VJP up to the upstream scalar.
        dlogits: Vec<f64>,
    },
    FrobNormalize {
        w: Var,
        norm: f64,
    },
    CappedGain {
        g: Var,
        active: bool,
    },
    ScaleBy {
        x: Var,
        s: Var,
    },
    DotConst {
        x: Var,
        weights: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// A single-use recording of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// `None` when the output does not depend on `v`.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// The gradient for `v`, zeros when the output does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, what: &str) -> Result<Var> {
        ensure_finite(&value, what)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// `x[B×D] · w[D×C]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::Dimension(format!(
                "linear: cannot multiply {xs:?} by {ws:?}"
            )));
        }
        let (b, d, c) = (xs[0], xs[1], ws[1]);
        let y = kernels::matmul(self.value(x).data(), self.value(w).data(), b, d, c);
        self.push(Tensor::from_vec(&[b, c], y), Op::Linear { x, w }, "linear")
    }

    /// Adds a per-column bias `[C]` to `[B×C]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.value(x).shape(), self.value(bias).shape());
        if xs.len() != 2 || bs != [xs[1]] {
            return Err(Error::Dimension(format!(
                "add_bias: bias {bs:?} does not match {xs:?}"
            )));
        }
        let c = xs[1];
        let mut y = self.value(x).clone();
        let bd = self.value(bias).data().to_vec();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v += bd[i % c];
        }
        self.push(y, Op::AddBias { x, bias }, "add_bias")
    }

    /// Direct 2-d cross-correlation of `x[B×Cin×H×W]` with `k[Cout×Cin×kh×kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ks) = (self.value(x).shape(), self.value(k).shape());
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return Err(Error::Dimension(format!(
                "conv2d: input {xs:?} incompatible with kernel {ks:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::Dimension("conv2d: stride must be positive".into()));
        }
        let (ph, pw) = (xs[2] + 2 * pad, xs[3] + 2 * pad);
        if ks[2] > ph || ks[3] > pw {
            return Err(Error::Dimension(format!(
                "conv2d: kernel {}x{} larger than padded input {ph}x{pw}, zero-size output",
                ks[2], ks[3]
            )));
        }
        let geom = ConvGeom {
            batch: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ks[0],
            kh: ks[2],
            kw: ks[3],
            stride,
            pad,
            oh: (ph - ks[2]) / stride + 1,
            ow: (pw - ks[3]) / stride + 1,
        };
        let y = kernels::conv2d(self.value(x).data(), self.value(k).data(), &geom);
        let out = Tensor::from_vec(&[geom.batch, geom.c_out, geom.oh, geom.ow], y);
        self.push(out, Op::Conv2d { x, k, geom }, "conv2d")
    }

    /// Batch normalization over axis 1 of a `[B×C]` or `[B×C×H×W]` input.
    ///
    /// Training mode standardizes with batch statistics and folds them into
    /// the running averages; eval mode uses the running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState,
        training: bool,
    ) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 && xs.len() != 4 {
            return Err(Error::Dimension(format!(
                "batch_norm: expected [B,C] or [B,C,H,W], got {xs:?}"
            )));
        }
        let channels = xs[1];
        if state.channels() != channels
            || self.value(gamma).shape() != [channels]
            || self.value(beta).shape() != [channels]
        {
            return Err(Error::Dimension(format!(
                "batch_norm: parameters do not match {channels} channels"
            )));
        }
        let layout = ChannelLayout {
            batch: xs[0],
            channels,
            spatial: xs[2..].iter().product(),
        };
        let m = layout.per_channel();
        let xd = self.value(x).data();
        let (mean, var) = if training {
            if m < 2 {
                return Err(Error::DegenerateBatch {
                    channel: 0,
                    count: m,
                });
            }
            kernels::channel_moments(xd, &layout)
        } else {
            (state.running_mean.clone(), state.running_var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut x_hat = vec![0.0; xd.len()];
        let mut y = vec![0.0; xd.len()];
        for c in 0..channels {
            layout.for_each(c, |i| {
                let h = (xd[i] - mean[c]) * inv_std[c];
                x_hat[i] = h;
                y[i] = g[c] * h + b[c];
            });
        }
        if training {
            let mom = state.momentum;
            let unbias = m as f64 / (m as f64 - 1.0);
            for c in 0..channels {
                state.running_mean[c] = mom * state.running_mean[c] + (1.0 - mom) * mean[c];
                state.running_var[c] = mom * state.running_var[c] + (1.0 - mom) * var[c] * unbias;
            }
        }
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            layout,
            x_hat,
            inv_std,
            training,
        };
        self.push(Tensor::from_vec(&xs, y), op, "batch_norm")
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(y, Op::Relu { x }, "relu")
    }

    /// Global average pool `[B×C×H×W] -> [B×C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape();
        if xs.len() != 4 {
            return Err(Error::Dimension(format!(
                "global_avg_pool: expected [B,C,H,W], got {xs:?}"
            )));
        }
        let (b, c, spatial) = (xs[0], xs[1], xs[2] * xs[3]);
        let y: Vec<f64> = self
            .value(x)
            .data()
            .chunks(spatial)
            .map(|ch| ch.iter().sum::<f64>() / spatial as f64)
            .collect();
        self.push(
            Tensor::from_vec(&[b, c], y),
            Op::GlobalAvgPool { x, spatial },
            "gap",
        )
    }

    /// Mean softmax cross-entropy of `logits[B×C]` against label-smoothed
    /// targets: `1 - eps` on the label, `eps / (C - 1)` on every other class.
    pub fn softmax_ce(&mut self, logits: Var, labels: &[usize], eps: f64) -> Result<Var> {
        let ls = self.value(logits).shape();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(Error::Dimension(format!(
                "softmax_ce: logits {ls:?} with {} labels",
                labels.len()
            )));
        }
        let (b, c) = (ls[0], ls[1]);
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::config("label_smoothing", "must lie in [0, 1)"));
        }
        if eps > 0.0 && c < 2 {
            return Err(Error::Dimension(
                "softmax_ce: smoothing needs at least 2 classes".into(),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index { label, classes: c });
        }
        let off = if c > 1 { eps / (c as f64 - 1.0) } else { 0.0 };
        let on = 1.0 - eps;
        let mut loss = 0.0;
        let mut dlogits = vec![0.0; b * c];
        let data = self.value(logits).data();
        for (i, &k) in labels.iter().enumerate() {
            let logp = kernels::log_softmax(&data[i * c..(i + 1) * c]);
            if eps == 0.0 {
                loss -= logp[k];
            } else {
                loss -= logp
                    .iter()
                    .enumerate()
                    .map(|(j, lp)| if j == k { on * lp } else { off * lp })
                    .sum::<f64>();
            }
            for (j, lp) in logp.iter().enumerate() {
                let target = if j == k { on } else { off };
                dlogits[i * c + j] = (lp.exp() - target) / b as f64;
            }
        }
        self.push(
            Tensor::scalar(loss / b as f64),
            Op::SoftmaxCe { logits, dlogits },
            "softmax_ce",
        )
    }

    /// `w / ‖w‖_F` over the whole tensor.
    pub fn frob_normalize(&mut self, w: Var) -> Result<Var> {
        let norm = self.value(w).norm();
        if norm == 0.0 {
            return Err(Error::DegenerateWeights("frob_normalize input".into()));
        }
        let y = self.value(w).scaled(1.0 / norm);
        self.push(y, Op::FrobNormalize { w, norm }, "frob_normalize")
    }

    /// `min(g, cap)` for a scalar `g`. At `g == cap` the `g` branch is taken,
    /// so the gradient there is 1.
    pub fn capped_gain(&mut self, g: Var, cap: f64) -> Result<Var> {
        if self.value(g).len() != 1 {
            return Err(Error::Dimension(
                "capped_gain: gain must be a scalar".into(),
            ));
        }
        let gv = self.value(g).item();
        let active = gv <= cap;
        let y = if active { gv } else { cap };
        self.push(
            Tensor::scalar(y),
            Op::CappedGain { g, active },
            "capped_gain",
        )
    }

    /// `x · s` for a scalar var `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::Dimension("scale_by: scale must be a scalar".into()));
        }
        let y = self.value(x).scaled(self.value(s).item());
        self.push(y, Op::ScaleBy { x, s }, "scale_by")
    }

    /// `Σ x ⊙ weights` for a fixed tensor; turns any output into a scalar
    /// whose gradient is a random projection of the output's Jacobian.
    pub fn dot_const(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        if self.value(x).shape() != weights.shape() {
            return Err(Error::Dimension(format!(
                "dot_const: {:?} vs {:?}",
                self.value(x).shape(),
                weights.shape()
            )));
        }
        let y = self.value(x).dot(&weights);
        self.push(Tensor::scalar(y), Op::DotConst { x, weights }, "dot_const")
    }

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::Dimension(format!(
                "backward: output must be a scalar, got {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Linear { x, w } => {
                    let (xt, wt) = (self.value(*x), self.value(*w));
                    let (b, d, c) = (xt.shape()[0], xt.shape()[1], wt.shape()[1]);
                    let (dx, dw) =
                        kernels::matmul_backward(xt.data(), wt.data(), dy.data(), b, d, c);
                    accumulate(&mut grads, *x, xt.shape(), dx);
                    accumulate(&mut grads, *w, wt.shape(), dw);
                }
                Op::AddBias { x, bias } => {
                    let c = self.value(*bias).len();
                    let mut db = vec![0.0; c];
                    for (i, v) in dy.data().iter().enumerate() {
                        db[i % c] += v;
                    }
                    accumulate(&mut grads, *bias, &[c], db);
                    accumulate(&mut grads, *x, dy.shape(), dy.data().to_vec());
                }
                Op::Conv2d { x, k, geom } => {
                    let (xt, kt) = (self.value(*x), self.value(*k));
                    let (dx, dk) = kernels::conv2d_backward(xt.data(), kt.data(), dy.data(), geom);
                    accumulate(&mut grads, *x, xt.shape(), dx);
                    accumulate(&mut grads, *k, kt.shape(), dk);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    layout,
                    x_hat,
                    inv_std,
                    training,
                } => {
                    let g = self.value(*gamma).data();
                    let dyd = dy.data();
                    let m = layout.per_channel() as f64;
                    let mut dgamma = vec![0.0; layout.channels];
                    let mut dbeta = vec![0.0; layout.channels];
                    let mut dx = vec![0.0; dyd.len()];
                    for c in 0..layout.channels {
                        let (mut sg, mut sb) = (0.0, 0.0);
                        layout.for_each(c, |i| {
                            sg += dyd[i] * x_hat[i];
                            sb += dyd[i];
                        });
                        dgamma[c] = sg;
                        dbeta[c] = sb;
                        let scale = g[c] * inv_std[c];
                        if *training {
                            layout.for_each(c, |i| {
                                dx[i] = scale / m * (m * dyd[i] - sb - x_hat[i] * sg);
                            });
                        } else {
                            layout.for_each(c, |i| dx[i] = scale * dyd[i]);
                        }
                    }
                    accumulate(&mut grads, *x, dy.shape(), dx);
                    accumulate(&mut grads, *gamma, &[layout.channels], dgamma);
                    accumulate(&mut grads, *beta, &[layout.channels], dbeta);
                }
                Op::Relu { x } => {
                    let xd = self.value(*x).data();
                    let dx = dy
                        .data()
                        .iter()
                        .zip(xd)
                        .map(|(d, &v)| if v > 0.0 { *d } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, dy.shape(), dx);
                }
                Op::GlobalAvgPool { x, spatial } => {
                    let inv = 1.0 / *spatial as f64;
                    let dx = dy
                        .data()
                        .iter()
                        .flat_map(|d| std::iter::repeat_n(d * inv, *spatial))
                        .collect();
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads, *x, &shape, dx);
                }
                Op::SoftmaxCe { logits, dlogits } => {
                    let up = dy.item();
                    let dl = dlogits.iter().map(|v| v * up).collect();
                    let shape = self.value(*logits).shape().to_vec();
                    accumulate(&mut grads, *logits, &shape, dl);
                }
                Op::FrobNormalize { w, norm } => {
                    let y = &node.value;
                    let proj = y.dot(&dy);
                    let dw = dy
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(d, yv)| (d - yv * proj) / norm)
                        .collect();
                    accumulate(&mut grads, *w, y.shape(), dw);
                }
                Op::CappedGain { g, active } => {
                    let d = if *active { dy.item() } else { 0.0 };
                    accumulate(&mut grads, *g, &[1], vec![d]);
                }
                Op::ScaleBy { x, s } => {
                    let sv = self.value(*s).item();
                    let xt = self.value(*x);
                    let ds = xt.dot(&dy);
                    let dx = dy.data().iter().map(|d| d * sv).collect();
                    accumulate(&mut grads, *x, xt.shape(), dx);
                    accumulate(&mut grads, *s, &[1], vec![ds]);
                }
                Op::DotConst { x, weights } => {
                    let up = dy.item();
                    let dx = weights.data().iter().map(|w| w * up).collect();
                    accumulate(&mut grads, *x, weights.shape(), dx);
                }
            }
            grads[idx] = Some(dy);
        }

        for g in grads.iter().flatten() {
            ensure_finite(g, "gradient")?;
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], delta: Vec<f64>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(delta) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(Tensor::from_vec(shape, delta)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn eye2() -> Tensor {
        Tensor::from_vec(&[2, 2], vec![1., 0., 0., 1.])
    }

    #[test]
    fn linear_identity_and_sum() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(&[1, 2], vec![1., 0.]));
        let w = t.leaf(eye2());
        let y = t.linear(x, w).unwrap();
        assert_eq!(t.value(y).data(), &[1., 0.]);

        let x = t.leaf(Tensor::from_vec(&[1, 2], vec![1., 2.]));
        let w = t.leaf(Tensor::from_vec(&[2, 1], vec![1., 1.]));
        let y = t.linear(x, w).unwrap();
        assert_eq!(t.value(y).data(), &[3.]);
    }

    #[test]
    fn linear_shape_mismatch() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[1, 3]));
        let w = t.leaf(eye2());
        assert!(matches!(t.linear(x, w), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv_identity_kernel() {
        let mut t = Tape::new();
        let xv = Tensor::from_vec(&[1, 1, 2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let x = t.leaf(xv.clone());
        let k = t.leaf(Tensor::full(&[1, 1, 1, 1], 1.0));
        let y = t.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(t.value(y), &xv);
    }

    #[test]
    fn conv_all_ones_sums() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::full(&[1, 1, 2, 2], 1.0));
        let k = t.leaf(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = t.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(t.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(t.value(y).item(), 4.0);
    }

    #[test]
    fn conv_zero_size_output_is_dimension_error() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::full(&[1, 1, 2, 2], 1.0));
        let k = t.leaf(Tensor::full(&[1, 1, 3, 3], 1.0));
        assert!(matches!(t.conv2d(x, k, 1, 0), Err(Error::Dimension(_))));
        // Padding makes it valid.
        assert!(t.conv2d(x, k, 1, 1).is_ok());
    }

    #[test]
    fn batch_norm_degenerate_batch() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(&[1, 2], vec![1., 2.]));
        let g = t.leaf(Tensor::full(&[2], 1.0));
        let b = t.leaf(Tensor::zeros(&[2]));
        let mut st = BatchNormState::new(2);
        assert!(matches!(
            t.batch_norm(x, g, b, &mut st, true),
            Err(Error::DegenerateBatch { .. })
        ));
        // Eval mode with a single sample is fine.
        assert!(t.batch_norm(x, g, b, &mut st, false).is_ok());
    }

    #[test]
    fn batch_norm_running_stats() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(&[2, 1], vec![1., 3.]));
        let g = t.leaf(Tensor::full(&[1], 1.0));
        let b = t.leaf(Tensor::zeros(&[1]));
        let mut st = BatchNormState::new(1);
        t.batch_norm(x, g, b, &mut st, true).unwrap();
        // mean 2, unbiased var 2
        assert!((st.running_mean[0] - 0.2).abs() < 1e-15);
        assert!((st.running_var[0] - (0.9 + 0.2)).abs() < 1e-15);
        assert!(st.running_var.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn relu_and_gap() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(&[2], vec![-1., 2.]));
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y).data(), &[0., 2.]);

        let m = t.leaf(Tensor::full(&[2, 3, 4, 4], 3.0));
        let p = t.global_avg_pool(m).unwrap();
        assert_eq!(t.value(p).shape(), &[2, 3]);
        assert!(t.value(p).data().iter().all(|v| *v == 3.0));
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(&[3], vec![0., 1., -1.]));
        let y = t.relu(x).unwrap();
        let s = t.dot_const(y, Tensor::full(&[3], 1.0)).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[0., 1., 0.]);
    }

    #[test]
    fn softmax_ce_values() {
        let mut t = Tape::new();
        let l = t.leaf(Tensor::from_vec(&[1, 2], vec![0., 0.]));
        let loss = t.softmax_ce(l, &[0], 0.0).unwrap();
        assert!((t.value(loss).item() - LN_2).abs() < 1e-15);

        let l = t.leaf(Tensor::from_vec(&[1, 2], vec![800., 0.]));
        let loss = t.softmax_ce(l, &[0], 0.0).unwrap();
        assert!(t.value(loss).item().abs() < 1e-300);
    }

    #[test]
    fn softmax_ce_label_out_of_range() {
        let mut t = Tape::new();
        let l = t.leaf(Tensor::zeros(&[1, 3]));
        assert!(matches!(
            t.softmax_ce(l, &[3], 0.0),
            Err(Error::Index {
                label: 3,
                classes: 3
            })
        ));
    }

    #[test]
    fn smoothing_splits_off_mass_over_other_classes() {
        // Uniform logits: loss is -log(1/C) whatever the targets are.
        let mut t = Tape::new();
        let l = t.leaf(Tensor::zeros(&[1, 4]));
        let loss = t.softmax_ce(l, &[2], 0.1).unwrap();
        assert!((t.value(loss).item() - 4f64.ln()).abs() < 1e-14);
        let g = t.backward(loss).unwrap().wrt(l);
        let expect = [
            0.25 - 0.1 / 3.0,
            0.25 - 0.1 / 3.0,
            0.25 - 0.9,
            0.25 - 0.1 / 3.0,
        ];
        for (a, b) in g.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn capped_gain_branches() {
        let mut t = Tape::new();
        for (g, cap, val, grad) in [
            (5.0, 4.0, 4.0, 0.0),
            (3.0, 4.0, 3.0, 1.0),
            (4.0, 4.0, 4.0, 1.0),
        ] {
            let gv = t.leaf(Tensor::scalar(g));
            let y = t.capped_gain(gv, cap).unwrap();
            assert_eq!(t.value(y).item(), val);
            assert_eq!(t.backward(y).unwrap().wrt(gv).item(), grad);
        }
    }

    #[test]
    fn frob_normalize_zero_is_degenerate() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(
            t.frob_normalize(w),
            Err(Error::DegenerateWeights(_))
        ));
    }

    #[test]
    fn non_finite_forward_is_error() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(&[1, 1], vec![f64::NAN]));
        let w = t.leaf(Tensor::from_vec(&[1, 1], vec![1.0]));
        assert!(matches!(t.linear(x, w), Err(Error::NonFinite(_))));
    }

    #[test]
    fn shared_input_accumulates() {
        // y = x*x via linear with itself transposed-free: use scale_by(x, x) on scalar.
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.scale_by(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(x).item(), 6.0);
    }
}
