//! The gradient-check suite: every tape operation on random inputs, and the
//! full model loss on a small batch, all at 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::embedding::{generate_synthetic, SynthConfig};
use crate::error::Result;
use crate::loss::{combined_loss, LossConfig, Negatives};
use crate::model::{ModelConfig, Pass, TiedRetrievalModel};
use crate::tensor::gradcheck::GradCheck;
use crate::tensor::{OpKind, Params, Tape, Tensor, Var};

/// Threshold for per-op checks.
pub const OP_TOLERANCE: f64 = 1e-6;
/// Threshold for the full-model check.
pub const MODEL_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupResult {
    pub group: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GroupResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("consistent shape")
}

/// Values bounded away from zero, for ops with a kink or pole at the origin.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(0.1..1.5);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).expect("consistent shape")
}

fn some_mask(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    let mut m: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
    let k = rng.random_range(0..n);
    m[k] = true;
    m
}

/// `Σ y ⊙ w` for a fixed random `w`, so that no output coordinate has a zero or
/// structurally constant weight. Built from ops other than `avoid`, so that a
/// sign flip injected into `avoid` cannot cancel itself out.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, w: &Tensor<f64>, avoid: OpKind) -> Result<Var> {
    if w.is_scalar() {
        return Ok(tape.scale(y, w.item()));
    }
    if avoid == OpKind::Mul && w.shape().len() == 2 {
        // trace(yᵀ w) / cols
        let c = tape.constant(w.clone());
        let yt = tape.transpose(y)?;
        let p = tape.matmul(yt, c)?;
        let d = tape.diag(p)?;
        return Ok(tape.mean(d));
    }
    let c = tape.constant(w.clone());
    let p = tape.mul(y, c)?;
    Ok(tape.sum(p))
}

/// Max relative error of `kind` on random inputs drawn from `seed`; every input
/// of the op is checked.
pub fn check_op(kind: OpKind, seed: u64, gc: &GradCheck) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0000 ^ (kind as u64) << 32);
    let m = rng.random_range(1..=4usize);
    let n = rng.random_range(2..=5usize);
    let k = rng.random_range(1..=4usize);
    let mut p = Params::new();
    let mut reg = |name: &str, t: Tensor<f64>| p.register(name, t);

    // inputs, and the op applied to them
    type Body = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;
    let (ids, body, out_shape): (Vec<_>, Body, Vec<usize>) = match kind {
        OpKind::Leaf => (
            vec![reg("x", random(&mut rng, vec![m, n], -1.0, 1.0))],
            Box::new(|_, v| Ok(v[0])),
            vec![m, n],
        ),
        OpKind::Matmul => (
            vec![
                reg("a", random(&mut rng, vec![m, k], -1.0, 1.0)),
                reg("b", random(&mut rng, vec![k, n], -1.0, 1.0)),
            ],
            Box::new(|t, v| t.matmul(v[0], v[1])),
            vec![m, n],
        ),
        OpKind::Transpose => (
            vec![reg("x", random(&mut rng, vec![m, n], -1.0, 1.0))],
            Box::new(|t, v| t.transpose(v[0])),
            vec![n, m],
        ),
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let scalar_rhs = rng.random_bool(0.3);
            let rhs = if scalar_rhs {
                random(&mut rng, vec![], -1.0, 1.0)
            } else {
                random(&mut rng, vec![m, n], -1.0, 1.0)
            };
            (
                vec![reg("a", random(&mut rng, vec![m, n], -1.0, 1.0)), reg("b", rhs)],
                Box::new(move |t, v| match kind {
                    OpKind::Add => t.add(v[0], v[1]),
                    OpKind::Sub => t.sub(v[0], v[1]),
                    _ => t.mul(v[0], v[1]),
                }),
                vec![m, n],
            )
        }
        OpKind::Relu => (
            vec![reg("x", away_from_zero(&mut rng, vec![m, n]))],
            Box::new(|t, v| Ok(t.relu(v[0]))),
            vec![m, n],
        ),
        OpKind::Gelu | OpKind::Exp => (
            vec![reg("x", random(&mut rng, vec![m, n], -2.0, 2.0))],
            Box::new(move |t, v| Ok(if kind == OpKind::Gelu { t.gelu(v[0]) } else { t.exp(v[0]) })),
            vec![m, n],
        ),
        OpKind::Log => (
            vec![reg("x", random(&mut rng, vec![m, n], 0.5, 2.0))],
            Box::new(|t, v| Ok(t.log(v[0]))),
            vec![m, n],
        ),
        OpKind::Scale | OpKind::Shift => {
            let c = rng.random_range(-2.0..2.0);
            (
                vec![reg("x", random(&mut rng, vec![m, n], -1.0, 1.0))],
                Box::new(move |t, v| Ok(if kind == OpKind::Scale { t.scale(v[0], c) } else { t.shift(v[0], c) })),
                vec![m, n],
            )
        }
        OpKind::Sum | OpKind::Mean => (
            vec![reg("x", random(&mut rng, vec![m, n], -1.0, 1.0))],
            Box::new(move |t, v| Ok(if kind == OpKind::Sum { t.sum(v[0]) } else { t.mean(v[0]) })),
            vec![],
        ),
        OpKind::Softmax | OpKind::LogSoftmax => {
            let axis = rng.random_range(0..2usize);
            (
                vec![reg("x", random(&mut rng, vec![m, n], -2.0, 2.0))],
                Box::new(move |t, v| {
                    if kind == OpKind::Softmax {
                        t.softmax(v[0], axis)
                    } else {
                        t.log_softmax(v[0], axis)
                    }
                }),
                vec![m, n],
            )
        }
        OpKind::MaskedSoftmax => {
            let keep = some_mask(&mut rng, n);
            (
                vec![reg("x", random(&mut rng, vec![m, n], -2.0, 2.0))],
                Box::new(move |t, v| t.masked_softmax_rows(v[0], &keep)),
                vec![m, n],
            )
        }
        OpKind::LayerNorm => {
            // with two features the normalised output is ±1 whatever the input,
            // leaving only an O(eps) gradient that differences cannot resolve
            let n = n + 1;
            (
                vec![
                    reg("x", random(&mut rng, vec![m, n], -2.0, 2.0)),
                    reg("gamma", random(&mut rng, vec![n], 0.5, 1.5)),
                    reg("beta", random(&mut rng, vec![n], -0.5, 0.5)),
                ],
                Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
                vec![m, n],
            )
        }
        OpKind::MaskedMeanPool => {
            let mask = some_mask(&mut rng, m);
            (
                vec![reg("x", random(&mut rng, vec![m, n], -1.0, 1.0))],
                Box::new(move |t, v| t.masked_mean_pool(v[0], &mask)),
                vec![n],
            )
        }
        OpKind::L2Normalize => (
            vec![reg("x", away_from_zero(&mut rng, vec![m, n]))],
            Box::new(|t, v| t.l2_normalize_rows(v[0])),
            vec![m, n],
        ),
        OpKind::AddRow => (
            vec![
                reg("x", random(&mut rng, vec![m, n], -1.0, 1.0)),
                reg("v", random(&mut rng, vec![n], -1.0, 1.0)),
            ],
            Box::new(|t, v| t.add_row(v[0], v[1])),
            vec![m, n],
        ),
        OpKind::AddCol => (
            vec![
                reg("x", random(&mut rng, vec![m, n], -1.0, 1.0)),
                reg("v", random(&mut rng, vec![m], -1.0, 1.0)),
            ],
            Box::new(|t, v| t.add_col(v[0], v[1])),
            vec![m, n],
        ),
        OpKind::Diag => (
            vec![reg("x", random(&mut rng, vec![n, n], -1.0, 1.0))],
            Box::new(|t, v| t.diag(v[0])),
            vec![n],
        ),
        OpKind::SliceCols => {
            let start = rng.random_range(0..n - 1);
            let len = rng.random_range(1..=n - start);
            (
                vec![reg("x", random(&mut rng, vec![m, n], -1.0, 1.0))],
                Box::new(move |t, v| t.slice_cols(v[0], start, len)),
                vec![m, len],
            )
        }
        OpKind::ConcatCols => (
            vec![
                reg("a", random(&mut rng, vec![m, n], -1.0, 1.0)),
                reg("b", random(&mut rng, vec![m, k], -1.0, 1.0)),
            ],
            Box::new(|t, v| t.concat_cols(&[v[0], v[1]])),
            vec![m, n + k],
        ),
        OpKind::StackRows => (
            vec![
                reg("r0", random(&mut rng, vec![n], -1.0, 1.0)),
                reg("r1", random(&mut rng, vec![n], -1.0, 1.0)),
                reg("r2", random(&mut rng, vec![n], -1.0, 1.0)),
            ],
            Box::new(|t, v| t.stack_rows(&[v[0], v[1], v[2]])),
            vec![3, n],
        ),
    };
    let w = random(&mut rng, out_shape, -1.0, 1.0);
    let f = |tape: &mut Tape<f64>, params: &Params<f64>| -> Result<Var> {
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(params, id)).collect();
        let y = body(tape, &vars)?;
        weighted_sum(tape, y, &w, kind)
    };
    let report = gc.params(f, &p)?;
    Ok(report.into_iter().map(|(_, e)| e).fold(0.0, f64::max))
}

/// Worst error per op over `seeds`.
pub fn check_ops(kinds: &[OpKind], seeds: u64, gc: &GradCheck) -> Result<Vec<GroupResult>> {
    kinds
        .iter()
        .map(|&kind| {
            let mut worst = 0.0f64;
            for s in 0..seeds {
                worst = worst.max(check_op(kind, s, gc)?);
            }
            Ok(GroupResult {
                group: kind.name().to_string(),
                max_rel_error: worst,
                tolerance: OP_TOLERANCE,
            })
        })
        .collect()
}

/// A small model configuration for the full-model check.
pub fn small_model_config(d_audio_in: usize, d_text_in: usize) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_audio_in,
        d_text_in,
        ffn_mult: 2,
        contrastive_dim: 6,
        ..ModelConfig::default()
    }
}

/// Parameter groups whose gradient vanishes identically: a bias added to every
/// attention key shifts all scores of a query equally, which softmax ignores.
pub fn structurally_zero(group: &str) -> bool {
    group.ends_with(".key.bias")
}

/// Finite-difference check of the combined loss on a `batch`-pair batch, per
/// parameter group. Groups with an identically zero gradient are checked for an
/// analytic gradient of exactly zero magnitude (below 1e-12) instead.
pub fn check_full_model(config: &ModelConfig, loss: &LossConfig, batch: usize, seed: u64, gc: &GradCheck) -> Result<Vec<GroupResult>> {
    let ds = generate_synthetic(&SynthConfig {
        n_audio: batch,
        captions_per_audio: 1,
        d_audio: config.d_audio_in,
        d_text: config.d_text_in,
        seed,
        ..SynthConfig::default()
    })?;
    let model = TiedRetrievalModel::<f64>::init(config.clone(), seed)?;
    let audio: Vec<_> = ds.pairing().iter().map(|&a| &ds.audio()[a]).collect();
    let caps: Vec<_> = ds.captions().iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let negatives = match loss.negative_strategy {
        crate::loss::NegativeStrategy::AllInBatch => Negatives::All,
        crate::loss::NegativeStrategy::RandomOne => Negatives::sample(batch, &mut rng),
    };
    let f = |tape: &mut Tape<f64>, params: &Params<f64>| -> Result<Var> {
        let mut m = model.clone();
        *m.params_mut() = params.clone();
        let out = m.forward_batch(tape, &audio, &caps, &mut Pass::default())?;
        Ok(combined_loss(tape, &out, loss, &negatives)?.total)
    };

    let mut tape = Tape::new();
    let l = f(&mut tape, model.params())?;
    let mut analytic = model.params().clone();
    analytic.zero_grad();
    tape.backward_into(l, &mut analytic)?;

    let report = gc.params(f, model.params())?;
    Ok(report
        .into_iter()
        .zip(analytic.groups())
        .map(|((group, err), g)| {
            if structurally_zero(&group) {
                let mag = g.grad.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
                GroupResult {
                    group: format!("{group} (zero)"),
                    max_rel_error: mag,
                    tolerance: 1e-12,
                }
            } else {
                GroupResult {
                    group,
                    max_rel_error: err,
                    tolerance: MODEL_TOLERANCE,
                }
            }
        })
        .collect())
}
