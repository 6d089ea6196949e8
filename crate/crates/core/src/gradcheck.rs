//! Finite-difference check of every differentiable operation on the tape.
//!
//! Each case builds a scalar `Σ R ⊙ op(inputs)` with a fixed random `R`,
//! differentiates it on the tape and compares every input gradient against
//! central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{finite_diff_grad, max_rel_error, BatchNormState, Tape, Var};
use crate::error::Result;
use crate::heads;
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-5;
pub const STEP: f64 = 1e-5;
pub const DEFAULT_INSTANCES: usize = 20;

type Builder = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<Tensor>,
    build: Builder,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpReport {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub tolerance: f64,
    pub ops: Vec<OpReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(OpReport::passed)
    }

    pub fn worst(&self) -> f64 {
        self.ops.iter().map(|o| o.max_rel_error).fold(0.0, f64::max)
    }
}

/// Names of the checked operations, in report order.
pub const OPS: [&str; 15] = [
    "linear",
    "linear+bias",
    "conv2d",
    "conv2d/stride2",
    "batchnorm/train-2d",
    "batchnorm/train-4d",
    "batchnorm/eval",
    "relu",
    "global_avg_pool",
    "softmax_ce",
    "softmax_ce/smoothing",
    "wn_fc",
    "fixnorm_fc/below-cap",
    "fixnorm_fc/above-cap",
    "fixnorm_conv",
];

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Standard normal entries pushed at least `gap` away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    randn(rng, shape).map(|v| {
        if v.abs() < gap {
            v.signum() * gap + v
        } else {
            v
        }
    })
}

fn labels(rng: &mut ChaCha8Rng, b: usize, c: usize) -> Vec<usize> {
    (0..b).map(|_| rng.random_range(0..c)).collect()
}

/// Wraps `op` in a weighted sum against a fixed random tensor.
fn weighted(rng: &mut ChaCha8Rng, out_shape: &[usize], op: Builder) -> Builder {
    let r = randn(rng, out_shape);
    Box::new(move |tape, v| {
        let y = op(tape, v)?;
        tape.dot_const(y, r.clone())
    })
}

fn make_case(name: &str, rng: &mut ChaCha8Rng) -> Case {
    let b = rng.random_range(2..5);
    let d = rng.random_range(2..6);
    let c = rng.random_range(2..5);
    match name {
        "linear" => Case {
            inputs: vec![randn(rng, &[b, d]), randn(rng, &[d, c])],
            build: weighted(rng, &[b, c], Box::new(|t, v| t.linear(v[0], v[1]))),
        },
        "linear+bias" => Case {
            inputs: vec![randn(rng, &[b, d]), randn(rng, &[d, c]), randn(rng, &[c])],
            build: weighted(
                rng,
                &[b, c],
                Box::new(|t, v| {
                    let y = t.linear(v[0], v[1])?;
                    t.add_bias(y, v[2])
                }),
            ),
        },
        "conv2d" | "conv2d/stride2" => {
            let (stride, pad) = if name == "conv2d" { (1, 1) } else { (2, 0) };
            let (ci, co, h, w) = (
                rng.random_range(1..3),
                rng.random_range(1..4),
                rng.random_range(3..6),
                rng.random_range(3..6),
            );
            let oh = (h + 2 * pad - 3) / stride + 1;
            let ow = (w + 2 * pad - 3) / stride + 1;
            Case {
                inputs: vec![randn(rng, &[2, ci, h, w]), randn(rng, &[co, ci, 3, 3])],
                build: weighted(
                    rng,
                    &[2, co, oh, ow],
                    Box::new(move |t, v| t.conv2d(v[0], v[1], stride, pad)),
                ),
            }
        }
        "batchnorm/train-2d" | "batchnorm/train-4d" | "batchnorm/eval" => {
            let four_d = name == "batchnorm/train-4d";
            let training = name != "batchnorm/eval";
            let shape: Vec<usize> = if four_d {
                vec![b, c, 2, 3]
            } else {
                vec![b.max(3), c]
            };
            let mut state = BatchNormState::new(c);
            state.running_mean = randn(rng, &[c]).data().to_vec();
            state.running_var = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
            Case {
                inputs: vec![
                    randn(rng, &shape).scaled(2.0),
                    randn(rng, &[c]),
                    randn(rng, &[c]),
                ],
                build: weighted(
                    rng,
                    &shape,
                    Box::new(move |t, v| {
                        let mut s = state.clone();
                        t.batch_norm(v[0], v[1], v[2], &mut s, training)
                    }),
                ),
            }
        }
        "relu" => Case {
            inputs: vec![away_from_zero(rng, &[b, d], 1e-2)],
            build: weighted(rng, &[b, d], Box::new(|t, v| t.relu(v[0]))),
        },
        "global_avg_pool" => Case {
            inputs: vec![randn(rng, &[b, c, 3, 2])],
            build: weighted(rng, &[b, c], Box::new(|t, v| t.global_avg_pool(v[0]))),
        },
        "softmax_ce" | "softmax_ce/smoothing" => {
            let eps = if name == "softmax_ce" { 0.0 } else { 0.1 };
            let y = labels(rng, b, c);
            Case {
                inputs: vec![randn(rng, &[b, c]).scaled(2.0)],
                build: Box::new(move |t, v| t.softmax_ce(v[0], &y, eps)),
            }
        }
        "wn_fc" => Case {
            inputs: vec![
                randn(rng, &[b, d]),
                randn(rng, &[d, c]),
                Tensor::scalar(rng.random_range(0.5..3.0)),
            ],
            build: weighted(
                rng,
                &[b, c],
                Box::new(|t, v| heads::wn_fc(t, v[0], v[1], v[2])),
            ),
        },
        "fixnorm_fc/below-cap" | "fixnorm_fc/above-cap" => {
            let alpha = rng.random_range(0.3..2.0);
            let cap = heads::gain_cap(alpha, c);
            let g = if name.ends_with("below-cap") {
                cap * rng.random_range(0.2..0.9)
            } else {
                cap * rng.random_range(1.1..3.0)
            };
            Case {
                inputs: vec![randn(rng, &[b, d]), randn(rng, &[d, c]), Tensor::scalar(g)],
                build: weighted(
                    rng,
                    &[b, c],
                    Box::new(move |t, v| heads::fixnorm_fc(t, v[0], v[1], v[2], alpha)),
                ),
            }
        }
        "fixnorm_conv" => {
            let (ci, co) = (rng.random_range(1..3), rng.random_range(2..4));
            let alpha = rng.random_range(0.3..2.0);
            let cap = heads::gain_cap(alpha, co);
            let g = cap
                * if rng.random_bool(0.5) {
                    rng.random_range(0.2..0.9)
                } else {
                    rng.random_range(1.1..3.0)
                };
            Case {
                inputs: vec![
                    randn(rng, &[2, ci, 4, 4]),
                    randn(rng, &[co, ci, 3, 3]),
                    Tensor::scalar(g),
                ],
                build: weighted(
                    rng,
                    &[2, co, 4, 4],
                    Box::new(move |t, v| heads::fixnorm_conv(t, v[0], v[1], v[2], alpha, 1, 1)),
                ),
            }
        }
        other => unreachable!("unknown gradcheck op {other}"),
    }
}

fn eval_case(case: &Case, inputs: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = (case.build)(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Max relative error over every input of one case.
fn check_case(case: &Case) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = (case.build)(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let mut worst = 0.0f64;
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.wrt(v);
        let numeric = finite_diff_grad(
            |probe| {
                let mut xs = case.inputs.clone();
                xs[i] = probe.clone();
                eval_case(case, &xs)
            },
            &case.inputs[i],
            STEP,
        )?;
        worst = worst.max(max_rel_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Checks one operation over `instances` seeded random cases.
pub fn check_op(name: &str, seed: u64, instances: usize) -> Result<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tag = OPS.iter().position(|&o| o == name).unwrap_or(OPS.len()) as u64;
    rng.set_stream(tag + 1);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let case = make_case(name, &mut rng);
        worst = worst.max(check_case(&case)?);
    }
    Ok(OpReport {
        name: name.to_string(),
        instances,
        max_rel_error: worst,
    })
}

/// Runs the whole suite.
pub fn run_suite(seed: u64, instances: usize) -> Result<GradcheckReport> {
    let ops = OPS
        .iter()
        .map(|name| check_op(name, seed, instances))
        .collect::<Result<_>>()?;
    Ok(GradcheckReport {
        seed,
        tolerance: TOLERANCE,
        ops,
    })
}
