//! Text-to-audio retrieval scoring.
//!
//! Every audio item is encoded once, every caption is encoded and scored against all
//! audio representations by dot product, and the rank of the paired item feeds
//! mAP@10 and R@{1,5,10}. Each caption has exactly one relevant item, so AP@10 is
//! `1/rank` when `rank <= 10` and 0 otherwise.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingSequence, PairedDataset};
use crate::error::{Error, Result};
use crate::model::TiedRetrievalModel;
use crate::tensor::{Scalar, Tensor};

/// Anything that maps a sequence to a fixed-width vector for retrieval.
pub trait RetrievalEncoder: Sync {
    fn encode(&self, seq: &EmbeddingSequence) -> Result<Vec<f64>>;
}

impl<F: Scalar> RetrievalEncoder for TiedRetrievalModel<F> {
    fn encode(&self, seq: &EmbeddingSequence) -> Result<Vec<f64>> {
        Ok(self.embed(seq)?.into_iter().map(Scalar::as_f64).collect())
    }
}

/// Masked mean of the raw frames; retrieval straight on the input embeddings.
#[derive(Clone, Copy, Debug, Default)]
pub struct MeanPoolEncoder;

impl RetrievalEncoder for MeanPoolEncoder {
    fn encode(&self, seq: &EmbeddingSequence) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; seq.dim()];
        for t in (0..seq.len()).filter(|&t| seq.mask[t]) {
            for (a, &v) in acc.iter_mut().zip(seq.frames.row(t)) {
                *a += v as f64;
            }
        }
        let n = seq.valid_len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(acc)
    }
}

/// `S[q][n] = text_q · audio_n`, unnormalised.
pub fn similarity_matrix(text: &Tensor<f64>, audio: &Tensor<f64>) -> Result<Tensor<f64>> {
    if text.shape().len() != 2 || audio.shape().len() != 2 || text.cols() != audio.cols() {
        return Err(Error::dim("similarity_matrix", text.shape(), audio.shape()));
    }
    let (q, n) = (text.rows(), audio.rows());
    let mut out = vec![0.0; q * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let t = text.row(i);
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot(t, audio.row(j));
        }
    });
    Tensor::new(vec![q, n], out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// 1-based rank of `target`: one plus the items scoring strictly higher plus the
/// tied items with a lower index.
pub fn rank_of_target(scores: &[f64], target: usize) -> Result<usize> {
    let Some(&s) = scores.get(target) else {
        return Err(Error::Contract(format!(
            "target {target} out of range for {} scores",
            scores.len()
        )));
    };
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite retrieval score".into()));
    }
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v > s || (v == s && i < target))
        .count();
    Ok(1 + ahead)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRank {
    pub id: String,
    pub rank: usize,
}

/// Field order is the canonical JSON order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub map10: f64,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub n_queries: usize,
    pub n_audio: usize,
    pub per_query: Vec<QueryRank>,
}

impl RetrievalReport {
    pub fn from_ranks(per_query: Vec<QueryRank>, n_audio: usize) -> Result<Self> {
        if per_query.is_empty() {
            return Err(Error::Contract("no queries to score".into()));
        }
        if let Some(q) = per_query.iter().find(|q| q.rank == 0 || q.rank > n_audio) {
            return Err(Error::Contract(format!(
                "rank {} of `{}` outside 1..={n_audio}",
                q.rank, q.id
            )));
        }
        let n = per_query.len() as f64;
        let recall = |k: usize| per_query.iter().filter(|q| q.rank <= k).count() as f64 / n;
        let map10 = per_query
            .iter()
            .map(|q| if q.rank <= 10 { 1.0 / q.rank as f64 } else { 0.0 })
            .sum::<f64>()
            / n;
        Ok(Self {
            map10,
            r1: recall(1),
            r5: recall(5),
            r10: recall(10),
            n_queries: per_query.len(),
            n_audio,
            per_query,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn ranks(&self) -> impl Iterator<Item = usize> + '_ {
        self.per_query.iter().map(|q| q.rank)
    }
}

impl fmt::Display for RetrievalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>8} {:>8} {:>8} {:>8} {:>9} {:>7}", "mAP@10", "R@1", "R@5", "R@10", "queries", "audio")?;
        write!(
            f,
            "{:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>9} {:>7}",
            self.map10, self.r1, self.r5, self.r10, self.n_queries, self.n_audio
        )
    }
}

/// Metrics for bare ranks; queries are named by position.
pub fn metrics_from_ranks(ranks: &[usize], n_audio: usize) -> Result<RetrievalReport> {
    let per_query = ranks
        .iter()
        .enumerate()
        .map(|(i, &rank)| QueryRank {
            id: format!("q{i}"),
            rank,
        })
        .collect();
    RetrievalReport::from_ranks(per_query, n_audio)
}

fn encode_all(encoder: &impl RetrievalEncoder, items: &[EmbeddingSequence]) -> Result<Tensor<f64>> {
    let rows = items
        .par_iter()
        .map(|s| encoder.encode(s))
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

/// Full text-to-audio evaluation; deterministic regardless of thread count.
pub fn evaluate(encoder: &impl RetrievalEncoder, dataset: &PairedDataset) -> Result<RetrievalReport> {
    let audio = encode_all(encoder, dataset.audio())?;
    let text = encode_all(encoder, dataset.captions())?;
    if text.cols() != audio.cols() {
        return Err(Error::dim("evaluate", text.shape(), audio.shape()));
    }
    let per_query = dataset
        .captions()
        .par_iter()
        .zip(dataset.pairing().par_iter())
        .enumerate()
        .map(|(q, (cap, &target))| {
            let t = text.row(q);
            let scores: Vec<f64> = (0..audio.rows()).map(|n| dot(t, audio.row(n))).collect();
            Ok(QueryRank {
                id: cap.id.clone(),
                rank: rank_of_target(&scores, target)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    RetrievalReport::from_ranks(per_query, dataset.audio().len())
}

/// `E[mAP@10]` when the true item's rank is uniform over `1..=n_audio`.
pub fn random_map10(n_audio: usize) -> f64 {
    (1..=n_audio.min(10)).map(|r| 1.0 / r as f64).sum::<f64>() / n_audio as f64
}
