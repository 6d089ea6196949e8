//! Desk-scale reference networks and their parameter groups.
//!
//! Every hidden layer is bias-free and followed by batch norm, so its weight
//! is scale invariant. The head is chosen by the training mode.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchNormState, Tape, Var};
use crate::error::{Error, Result};
use crate::heads;
use crate::optim::ParamGroup;
use crate::tensor::{joint_norm, Tensor};

/// How a run treats weight decay and the head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Plain FC head, weight decay on every weight.
    #[serde(rename = "WD")]
    Wd,
    /// Plain FC head, hidden weights norm-fixed, decay on the head only.
    #[serde(rename = "ALGO1")]
    Algo1,
    /// WN-FC head, hidden and head weights norm-fixed jointly, no decay.
    #[serde(rename = "WN_FC")]
    WnFc,
    /// FixNorm-FC head, otherwise as `WnFc`.
    #[serde(rename = "FIXNORM_FC")]
    FixNormFc,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Wd => "WD",
            Mode::Algo1 => "ALGO1",
            Mode::WnFc => "WN_FC",
            Mode::FixNormFc => "FIXNORM_FC",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "WD" => Ok(Mode::Wd),
            "ALGO1" => Ok(Mode::Algo1),
            "WN_FC" => Ok(Mode::WnFc),
            "FIXNORM_FC" => Ok(Mode::FixNormFc),
            other => Err(Error::config("mode", format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    /// Two linear-BN-ReLU layers of width 32 on flat features.
    #[serde(rename = "mlp-blobs")]
    MlpBlobs,
    /// Three conv3x3-BN-ReLU blocks (16/32/64 channels, strides 1/2/2), GAP.
    #[serde(rename = "cnn-small")]
    CnnSmall,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp-blobs" => Ok(Preset::MlpBlobs),
            "cnn-small" => Ok(Preset::CnnSmall),
            other => Err(Error::config("model", format!("unknown preset `{other}`"))),
        }
    }
}

const MLP_WIDTH: usize = 32;
const CNN_CHANNELS: [usize; 3] = [16, 32, 64];
const CNN_STRIDES: [usize; 3] = [1, 2, 2];

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Head {
    Fc,
    WnFc,
    FixNormFc { alpha: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Weight of a BN-preceded linear or conv layer.
    HiddenWeight,
    HeadWeight,
    HeadBias,
    HeadGain,
    BnGamma,
    BnBeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub kind: ParamKind,
}

#[derive(Clone, Debug)]
enum Layer {
    Linear {
        w: usize,
        gamma: usize,
        beta: usize,
    },
    Conv {
        k: usize,
        gamma: usize,
        beta: usize,
        stride: usize,
    },
}

/// Parameters, BN buffers and topology of one network.
#[derive(Clone, Debug)]
pub struct Network {
    pub preset: Preset,
    pub head: Head,
    pub classes: usize,
    pub params: Vec<Tensor>,
    pub info: Vec<ParamInfo>,
    bn: Vec<BatchNormState>,
    layers: Vec<Layer>,
    /// Per-sample shape the network consumes.
    input_shape: Vec<usize>,
    head_weight: usize,
    head_extra: Option<usize>,
}

/// Vars produced by one forward pass.
#[derive(Debug)]
pub struct Forward {
    pub logits: Var,
    /// Penultimate features, the head's input.
    pub features: Var,
    /// One leaf per parameter, in parameter order.
    pub params: Vec<Var>,
}

impl Network {
    pub fn head_weight(&self) -> &Tensor {
        &self.params[self.head_weight]
    }

    /// Learnable gain, for weight-normalized heads.
    pub fn raw_gain(&self) -> Option<f64> {
        match self.head {
            Head::Fc => None,
            _ => self.head_extra.map(|i| self.params[i].item()),
        }
    }

    /// `‖W^FC‖` for a plain head, `g` for WN-FC and `min(g, α√C)` for FixNorm-FC.
    pub fn head_gain(&self) -> f64 {
        match self.head {
            Head::Fc => self.head_weight().norm(),
            Head::WnFc => self.raw_gain().unwrap_or(0.0),
            Head::FixNormFc { alpha } => {
                heads::effective_gain(self.raw_gain().unwrap_or(0.0), alpha, self.classes)
            }
        }
    }

    pub fn indices_of(&self, kind: ParamKind) -> Vec<usize> {
        self.info
            .iter()
            .enumerate()
            .filter(|(_, p)| p.kind == kind)
            .map(|(i, _)| i)
            .collect()
    }

    /// Weights whose joint norm the mode fixes, or would fix: hidden weights,
    /// plus the head weight for weight-normalized heads.
    pub fn tracked_norm_members(&self) -> Vec<usize> {
        let mut m = self.indices_of(ParamKind::HiddenWeight);
        if self.head != Head::Fc {
            m.push(self.head_weight);
        }
        m
    }

    pub fn tracked_norm(&self) -> f64 {
        joint_norm(self.tracked_norm_members().iter().map(|&i| &self.params[i]))
    }

    fn view_batch(&self, x: Tensor) -> Result<Tensor> {
        let b = x.shape()[0];
        let per: usize = x.shape()[1..].iter().product();
        if per != self.input_shape.iter().product::<usize>() {
            return Err(Error::Dimension(format!(
                "input samples of shape {:?} do not fit network input {:?}",
                &x.shape()[1..],
                self.input_shape
            )));
        }
        let mut shape = vec![b];
        shape.extend(&self.input_shape);
        x.reshape(&shape)
    }

    /// Records a forward pass of a batch `[B, ...]` on `tape`. Training mode
    /// uses batch statistics and updates the BN running averages.
    pub fn forward(&mut self, tape: &mut Tape, x: Tensor, training: bool) -> Result<Forward> {
        let x = self.view_batch(x)?;
        let params: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.clone())).collect();
        let mut h = tape.leaf(x);
        for (li, layer) in self.layers.iter().enumerate() {
            let (pre, gamma, beta) = match *layer {
                Layer::Linear { w, gamma, beta } => (tape.linear(h, params[w])?, gamma, beta),
                Layer::Conv {
                    k,
                    gamma,
                    beta,
                    stride,
                } => (tape.conv2d(h, params[k], stride, 1)?, gamma, beta),
            };
            let normed =
                tape.batch_norm(pre, params[gamma], params[beta], &mut self.bn[li], training)?;
            h = tape.relu(normed)?;
        }
        if self.preset == Preset::CnnSmall {
            h = tape.global_avg_pool(h)?;
        }
        let features = h;
        let w = params[self.head_weight];
        let logits = match self.head {
            Head::Fc => {
                let y = tape.linear(features, w)?;
                match self.head_extra {
                    Some(b) => tape.add_bias(y, params[b])?,
                    None => y,
                }
            }
            Head::WnFc => heads::wn_fc(tape, features, w, params[self.head_extra.expect("gain")])?,
            Head::FixNormFc { alpha } => heads::fixnorm_fc(
                tape,
                features,
                w,
                params[self.head_extra.expect("gain")],
                alpha,
            )?,
        };
        Ok(Forward {
            logits,
            features,
            params,
        })
    }

    /// Eval-mode logits and penultimate features, in chunks.
    pub fn predict(&mut self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        const CHUNK: usize = 256;
        let n = x.shape()[0];
        let mut logits = Vec::new();
        let mut feats = Vec::new();
        let mut feat_dim = 0;
        for start in (0..n).step_by(CHUNK) {
            let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
            let mut tape = Tape::new();
            let fw = self.forward(&mut tape, x.gather_rows(&idx), false)?;
            logits.extend_from_slice(tape.value(fw.logits).data());
            let f = tape.value(fw.features);
            feat_dim = f.shape()[1];
            feats.extend_from_slice(f.data());
        }
        Ok((
            Tensor::new(vec![n, self.classes], logits)?,
            Tensor::new(vec![n, feat_dim], feats)?,
        ))
    }
}

fn kaiming<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

/// Builds the network for `preset` and the parameter groups `mode` prescribes.
///
/// * `WD`: hidden and head weights decay with `weight_decay`.
/// * `ALGO1`: hidden weights norm-fixed, head weight decays with `fc_weight_decay`.
/// * `WN_FC` / `FIXNORM_FC`: hidden and head weights norm-fixed as one group.
///
/// Biases, BN affines and the gain are always in an undecayed, unfixed group.
#[allow(clippy::too_many_arguments)]
pub fn build_model<R: Rng + ?Sized>(
    preset: Preset,
    mode: Mode,
    alpha: f64,
    weight_decay: f64,
    fc_weight_decay: f64,
    sample_shape: &[usize],
    classes: usize,
    rng: &mut R,
) -> Result<(Network, Vec<ParamGroup>)> {
    if classes < 2 {
        return Err(Error::config("classes", "need at least 2 classes"));
    }
    let mut params = Vec::new();
    let mut info = Vec::new();
    let mut push = |name: String, kind: ParamKind, t: Tensor| {
        params.push(t);
        info.push(ParamInfo { name, kind });
        params.len() - 1
    };
    let mut layers = Vec::new();
    let mut bn = Vec::new();

    let (input_shape, feat_dim) = match preset {
        Preset::MlpBlobs => {
            if sample_shape.len() != 1 {
                return Err(Error::config(
                    "model",
                    format!("mlp-blobs needs flat samples, got shape {sample_shape:?}"),
                ));
            }
            let mut width = sample_shape[0];
            for l in 0..2 {
                let w = push(
                    format!("fc{l}.weight"),
                    ParamKind::HiddenWeight,
                    kaiming(&[width, MLP_WIDTH], width, rng),
                );
                let gamma = push(
                    format!("bn{l}.gamma"),
                    ParamKind::BnGamma,
                    Tensor::full(&[MLP_WIDTH], 1.0),
                );
                let beta = push(
                    format!("bn{l}.beta"),
                    ParamKind::BnBeta,
                    Tensor::zeros(&[MLP_WIDTH]),
                );
                layers.push(Layer::Linear { w, gamma, beta });
                bn.push(BatchNormState::new(MLP_WIDTH));
                width = MLP_WIDTH;
            }
            (sample_shape.to_vec(), MLP_WIDTH)
        }
        Preset::CnnSmall => {
            let input_shape = match sample_shape {
                [c, h, w] => vec![*c, *h, *w],
                [d] => {
                    let side = (*d as f64).sqrt().round() as usize;
                    if side * side != *d {
                        return Err(Error::config(
                            "model",
                            format!(
                                "cnn-small needs image samples or a square feature count, got {d}"
                            ),
                        ));
                    }
                    vec![1, side, side]
                }
                other => {
                    return Err(Error::config(
                        "model",
                        format!("cnn-small cannot consume samples of shape {other:?}"),
                    ))
                }
            };
            let mut c_in = input_shape[0];
            for (l, (&c_out, &stride)) in CNN_CHANNELS.iter().zip(&CNN_STRIDES).enumerate() {
                let k = push(
                    format!("conv{l}.weight"),
                    ParamKind::HiddenWeight,
                    kaiming(&[c_out, c_in, 3, 3], c_in * 9, rng),
                );
                let gamma = push(
                    format!("bn{l}.gamma"),
                    ParamKind::BnGamma,
                    Tensor::full(&[c_out], 1.0),
                );
                let beta = push(
                    format!("bn{l}.beta"),
                    ParamKind::BnBeta,
                    Tensor::zeros(&[c_out]),
                );
                layers.push(Layer::Conv {
                    k,
                    gamma,
                    beta,
                    stride,
                });
                bn.push(BatchNormState::new(c_out));
                c_in = c_out;
            }
            (input_shape, c_in)
        }
    };

    let head = match mode {
        Mode::Wd | Mode::Algo1 => Head::Fc,
        Mode::WnFc => Head::WnFc,
        Mode::FixNormFc => {
            if alpha.is_nan() || alpha <= 0.0 {
                return Err(Error::config(
                    "alpha",
                    format!("must be positive, got {alpha}"),
                ));
            }
            Head::FixNormFc { alpha }
        }
    };
    let head_weight = push(
        "head.weight".into(),
        ParamKind::HeadWeight,
        Tensor::randn(&[feat_dim, classes], (1.0 / feat_dim as f64).sqrt(), rng),
    );
    let head_extra = Some(match head {
        Head::Fc => push(
            "head.bias".into(),
            ParamKind::HeadBias,
            Tensor::zeros(&[classes]),
        ),
        _ => push(
            "head.gain".into(),
            ParamKind::HeadGain,
            Tensor::scalar((classes as f64).sqrt()),
        ),
    });

    let net = Network {
        preset,
        head,
        classes,
        params,
        info,
        bn,
        layers,
        input_shape,
        head_weight,
        head_extra,
    };

    let hidden = net.indices_of(ParamKind::HiddenWeight);
    let free: Vec<usize> = net
        .info
        .iter()
        .enumerate()
        .filter(|(_, p)| !matches!(p.kind, ParamKind::HiddenWeight | ParamKind::HeadWeight))
        .map(|(i, _)| i)
        .collect();
    let groups = match mode {
        Mode::Wd => vec![
            ParamGroup::decayed("conv", hidden, weight_decay),
            ParamGroup::decayed("fc", vec![head_weight], weight_decay),
            ParamGroup::free("free", free),
        ],
        Mode::Algo1 => vec![
            ParamGroup::norm_fixed("conv", hidden),
            ParamGroup::decayed("fc", vec![head_weight], fc_weight_decay),
            ParamGroup::free("free", free),
        ],
        Mode::WnFc | Mode::FixNormFc => {
            let mut joint = hidden;
            joint.push(head_weight);
            vec![
                ParamGroup::norm_fixed("conv+fc", joint),
                ParamGroup::free("free", free),
            ]
        }
    };
    crate::optim::validate_groups(&groups, net.params.len())?;
    Ok((net, groups))
}
