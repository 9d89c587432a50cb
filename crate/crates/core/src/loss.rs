//! Training objectives: bidirectional triplet ranking hinge on dot products, CLIP-style
//! symmetric cross-entropy, and their unweighted sum.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::BatchOutputs;
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeStrategy {
    /// Average the hinge over every other pair in the batch.
    AllInBatch,
    /// One uniformly drawn in-batch negative per anchor.
    RandomOne,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub margin: f64,
    pub use_contrastive: bool,
    pub use_ranking: bool,
    pub negative_strategy: NegativeStrategy,
    /// Also use audio anchors in the ranking loss (captions are always anchors).
    pub ranking_bidirectional: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            use_contrastive: true,
            use_ranking: true,
            negative_strategy: NegativeStrategy::AllInBatch,
            ranking_bidirectional: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::Config(format!("margin must be positive, got {}", self.margin)));
        }
        if !self.use_contrastive && !self.use_ranking {
            return Err(Error::Config("at least one loss must be enabled".into()));
        }
        Ok(())
    }
}

/// Which in-batch negatives enter the ranking hinge.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Negatives {
    All,
    /// `caption[i]` is the negative audio for caption anchor `i`, `audio[i]` the
    /// negative caption for audio anchor `i`; never equal to `i`.
    Chosen { caption: Vec<usize>, audio: Vec<usize> },
}

impl Negatives {
    pub fn sample(batch: usize, rng: &mut impl Rng) -> Self {
        let mut draw = |i: usize| {
            let j = rng.random_range(0..batch - 1);
            if j >= i {
                j + 1
            } else {
                j
            }
        };
        let caption = (0..batch).map(&mut draw).collect();
        let audio = (0..batch).map(&mut draw).collect();
        Negatives::Chosen { caption, audio }
    }

    fn weights<F: Scalar>(&self, b: usize, audio_anchor: bool) -> Tensor<F> {
        let mut w = Tensor::zeros(vec![b, b]);
        match self {
            Negatives::All => {
                let v = F::of(1.0 / (b - 1) as f64);
                for i in 0..b {
                    for j in 0..b {
                        if i != j {
                            w.data_mut()[i * b + j] = v;
                        }
                    }
                }
            }
            Negatives::Chosen { caption, audio } => {
                let pick = if audio_anchor { audio } else { caption };
                for (i, &j) in pick.iter().enumerate() {
                    w.data_mut()[i * b + j] = F::one();
                }
            }
        }
        w
    }
}

fn batch_dims<F: Scalar>(tape: &Tape<F>, a: Var, t: Var, what: &str) -> Result<usize> {
    let (sa, st) = (tape.shape(a), tape.shape(t));
    if sa.len() != 2 || sa != st {
        return Err(Error::dim("loss", sa, st));
    }
    if sa[0] < 2 {
        return Err(Error::Contract(format!("{what} needs a batch of at least 2, got {}", sa[0])));
    }
    Ok(sa[0])
}

/// Mean over anchors of the weighted hinge `max(0, margin − s(anchor, pos) + s(anchor, neg))`.
fn hinge_direction<F: Scalar>(tape: &mut Tape<F>, sims: Var, margin: f64, weights: Tensor<F>) -> Result<Var> {
    let b = weights.rows();
    let pos = tape.diag(sims)?;
    let neg_pos = tape.scale(pos, -F::one());
    let shifted = tape.shift(sims, F::of(margin));
    let h = tape.add_col(shifted, neg_pos)?;
    let h = tape.relu(h);
    let w = tape.constant(weights);
    let h = tape.mul(h, w)?;
    let total = tape.sum(h);
    Ok(tape.scale(total, F::of(1.0 / b as f64)))
}

/// Triplet ranking loss over dot-product similarities; row `i` of `audio` pairs with row `i` of `text`.
pub fn triplet_ranking_loss<F: Scalar>(
    tape: &mut Tape<F>,
    audio: Var,
    text: Var,
    margin: f64,
    negatives: &Negatives,
    bidirectional: bool,
) -> Result<Var> {
    let b = batch_dims(tape, audio, text, "triplet ranking loss")?;
    if let Negatives::Chosen { caption, audio: a } = negatives {
        let ok = |v: &Vec<usize>| v.len() == b && v.iter().enumerate().all(|(i, &j)| j < b && j != i);
        if !ok(caption) || !ok(a) {
            return Err(Error::Contract("chosen negatives must index another row of the batch".into()));
        }
    }
    let at = tape.transpose(audio)?;
    // sims[i][j] = s(T_i, A_j)
    let sims = tape.matmul(text, at)?;
    let by_caption = hinge_direction(tape, sims, margin, negatives.weights(b, false))?;
    if !bidirectional {
        return Ok(by_caption);
    }
    let sims_t = tape.transpose(sims)?;
    let by_audio = hinge_direction(tape, sims_t, margin, negatives.weights(b, true))?;
    let sum = tape.add(by_caption, by_audio)?;
    Ok(tape.scale(sum, F::of(0.5)))
}

/// Symmetric cross-entropy over `exp(logit_scale) · C_T · C_Aᵀ` with labels on the diagonal.
pub fn contrastive_loss<F: Scalar>(tape: &mut Tape<F>, audio: Var, text: Var, logit_scale: Var) -> Result<Var> {
    let b = batch_dims(tape, audio, text, "contrastive loss")?;
    for v in [audio, text] {
        let t = tape.value(v);
        for r in 0..b {
            let n = t.row(r).iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-3 {
                return Err(Error::Contract(format!(
                    "contrastive inputs must be unit rows, row {r} has norm {n}"
                )));
            }
        }
    }
    if !tape.value(logit_scale).is_scalar() {
        return Err(Error::Contract("logit scale must be a scalar".into()));
    }
    let at = tape.transpose(audio)?;
    let cos = tape.matmul(text, at)?;
    let scale = tape.exp(logit_scale);
    let logits = tape.mul(cos, scale)?;
    let by_text = tape.log_softmax(logits, 1)?;
    let by_audio = tape.log_softmax(logits, 0)?;
    let d1 = tape.diag(by_text)?;
    let d2 = tape.diag(by_audio)?;
    let both = tape.add(d1, d2)?;
    // average of the two directional cross-entropies
    let m = tape.mean(both);
    Ok(tape.scale(m, F::of(-0.5)))
}

/// Scalar handles of a combined loss and its enabled parts.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub ranking: Option<Var>,
    pub contrastive: Option<Var>,
}

/// Unweighted sum of the enabled objectives.
pub fn combined_loss<F: Scalar>(
    tape: &mut Tape<F>,
    out: &BatchOutputs,
    cfg: &LossConfig,
    negatives: &Negatives,
) -> Result<LossParts> {
    cfg.validate()?;
    let ranking = cfg
        .use_ranking
        .then(|| triplet_ranking_loss(tape, out.audio, out.text, cfg.margin, negatives, cfg.ranking_bidirectional))
        .transpose()?;
    let contrastive = cfg
        .use_contrastive
        .then(|| contrastive_loss(tape, out.audio_contrastive, out.text_contrastive, out.logit_scale))
        .transpose()?;
    let total = match (ranking, contrastive) {
        (Some(r), Some(c)) => tape.add(r, c)?,
        (Some(r), None) => r,
        (None, Some(c)) => c,
        (None, None) => unreachable!("validated"),
    };
    Ok(LossParts {
        total,
        ranking,
        contrastive,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn equal_rows_give_margin() {
        for b in [2, 3, 7] {
            let rows: Vec<Vec<f64>> = vec![vec![0.3, -0.2, 0.9]; b];
            let mut tape = Tape::new();
            let a = tape.constant(Tensor::from_rows(&rows).unwrap());
            let t = tape.constant(Tensor::from_rows(&rows).unwrap());
            let l = triplet_ranking_loss(&mut tape, a, t, 1.0, &Negatives::All, true).unwrap();
            assert!((tape.value(l).item() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn separated_pairs_give_zero() {
        let e = mat(&[&[3.0, 0.0], &[0.0, 3.0]]);
        let mut tape = Tape::new();
        let a = tape.constant(e.clone());
        let t = tape.constant(e);
        let l = triplet_ranking_loss(&mut tape, a, t, 1.0, &Negatives::All, true).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.constant(mat(&[&[1.0, 0.0]]));
        assert!(matches!(
            triplet_ranking_loss(&mut tape, a, a, 1.0, &Negatives::All, true),
            Err(Error::Contract(_))
        ));
        let ls = tape.constant(Tensor::scalar(1.0));
        assert!(matches!(contrastive_loss(&mut tape, a, a, ls), Err(Error::Contract(_))));
    }

    #[test]
    fn uniform_logits_give_ln_b() {
        let b = 5;
        let rows = vec![vec![0.6, 0.8]; b];
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&rows).unwrap());
        let ls = tape.constant(Tensor::scalar((1.0f64 / 0.07).ln()));
        let l = contrastive_loss(&mut tape, a, a, ls).unwrap();
        let v = tape.value(l).item();
        assert!((v - (b as f64).ln()).abs() < 1e-12, "{v}");
    }

    #[test]
    fn contrastive_rejects_unnormalized_rows() {
        let mut tape = Tape::new();
        let a = tape.constant(mat(&[&[1.0, 0.0], &[0.0, 2.0]]));
        let ls = tape.constant(Tensor::scalar(0.0));
        assert!(matches!(contrastive_loss(&mut tape, a, a, ls), Err(Error::Contract(_))));
    }

    #[test]
    fn sampled_negatives_never_hit_the_anchor() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            if let Negatives::Chosen { caption, audio } = Negatives::sample(4, &mut rng) {
                for (i, (&c, &a)) in caption.iter().zip(&audio).enumerate() {
                    assert!(c != i && a != i && c < 4 && a < 4);
                }
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig { margin: 0.0, ..LossConfig::default() }.validate().is_err());
        assert!(LossConfig {
            use_contrastive: false,
            use_ranking: false,
            ..LossConfig::default()
        }
        .validate()
        .is_err());
    }
}
