//! Frozen embedding sequences: the inputs the tied model consumes.
//!
//! Sequences come from a dataset file ([`load_dataset`]), from the shared-latent
//! generator ([`generate_synthetic`]), or, for raw PCM, through [`logmel_spectrogram`].

pub(crate) mod batch;
mod io;
mod logmel;
mod synth;

use std::collections::HashMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use batch::{batch_iter, Batch, BatchIter};
pub use io::{load_dataset, write_dataset, FORMAT_NAME, FORMAT_VERSION};
pub use logmel::{hz_to_mel, logmel_spectrogram, mel_to_hz, LogMel, LogMelConfig, MelFilterbank};
pub use synth::{generate_synthetic, SynthConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Text,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Audio => "audio",
            Modality::Text => "text",
        })
    }
}

/// A `T×d_in` run of frame or token vectors with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSequence {
    pub id: String,
    pub modality: Modality,
    pub frames: Tensor<f32>,
    pub mask: Vec<bool>,
}

impl EmbeddingSequence {
    /// Sequence with every position valid.
    pub fn new(id: impl Into<String>, modality: Modality, frames: Tensor<f32>) -> Result<Self> {
        let t = frames.shape().first().copied().unwrap_or(0);
        Self::with_mask(id, modality, frames, vec![true; t])
    }

    pub fn with_mask(
        id: impl Into<String>,
        modality: Modality,
        frames: Tensor<f32>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        let id = id.into();
        if frames.shape().len() != 2 {
            return Err(Error::Schema(format!(
                "sequence `{id}`: frames must be T×d, got shape {:?}",
                frames.shape()
            )));
        }
        if mask.len() != frames.rows() {
            return Err(Error::Schema(format!(
                "sequence `{id}`: mask length {} for {} frames",
                mask.len(),
                frames.rows()
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::EmptySequence);
        }
        Ok(Self {
            id,
            modality,
            frames,
            mask,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn valid_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Audio items and captions with a many-to-one caption → audio pairing.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    audio: Vec<EmbeddingSequence>,
    captions: Vec<EmbeddingSequence>,
    pairing: Vec<usize>,
}

impl PairedDataset {
    pub fn new(
        audio: Vec<EmbeddingSequence>,
        captions: Vec<EmbeddingSequence>,
        pairing: Vec<usize>,
    ) -> Result<Self> {
        if audio.is_empty() {
            return Err(Error::Schema("dataset has no audio items".into()));
        }
        if captions.is_empty() {
            return Err(Error::Schema("dataset has no captions".into()));
        }
        if pairing.len() != captions.len() {
            return Err(Error::Integrity(format!(
                "{} captions but {} pairing entries",
                captions.len(),
                pairing.len()
            )));
        }
        for (items, modality) in [(&audio, Modality::Audio), (&captions, Modality::Text)] {
            let d = items[0].dim();
            for s in items {
                if s.modality != modality {
                    return Err(Error::Schema(format!(
                        "`{}` is {} but listed as {modality}",
                        s.id, s.modality
                    )));
                }
                if s.dim() != d {
                    return Err(Error::Schema(format!(
                        "{modality} `{}` has dim {}, expected {d}",
                        s.id,
                        s.dim()
                    )));
                }
            }
        }
        let mut seen = HashMap::new();
        for s in audio.iter().chain(&captions) {
            if seen.insert(s.id.as_str(), ()).is_some() {
                return Err(Error::Integrity(format!("duplicate id `{}`", s.id)));
            }
        }
        if let Some((c, &a)) = pairing.iter().enumerate().find(|(_, &a)| a >= audio.len()) {
            return Err(Error::Integrity(format!(
                "caption `{}` pairs with audio index {a}, only {} audio items",
                captions[c].id,
                audio.len()
            )));
        }
        Ok(Self {
            audio,
            captions,
            pairing,
        })
    }

    pub fn audio(&self) -> &[EmbeddingSequence] {
        &self.audio
    }

    pub fn captions(&self) -> &[EmbeddingSequence] {
        &self.captions
    }

    /// Audio index paired with each caption.
    pub fn pairing(&self) -> &[usize] {
        &self.pairing
    }

    pub fn d_audio(&self) -> usize {
        self.audio[0].dim()
    }

    pub fn d_text(&self) -> usize {
        self.captions[0].dim()
    }

    /// Number of captions pointing at each audio item.
    pub fn pairing_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.audio.len()];
        for &a in &self.pairing {
            deg[a] += 1;
        }
        deg
    }

    /// Keeps the listed audio items (in the given order) and every caption paired with them.
    pub fn subset(&self, audio_indices: &[usize]) -> Result<Self> {
        let mut remap = vec![None; self.audio.len()];
        for (new, &old) in audio_indices.iter().enumerate() {
            remap[old] = Some(new);
        }
        let audio = audio_indices.iter().map(|&i| self.audio[i].clone()).collect();
        let mut captions = Vec::new();
        let mut pairing = Vec::new();
        for (c, &a) in self.captions.iter().zip(&self.pairing) {
            if let Some(n) = remap[a] {
                captions.push(c.clone());
                pairing.push(n);
            }
        }
        Self::new(audio, captions, pairing)
    }

    /// Splits by audio id: a shuffled `train_fraction` of the audio items (with their
    /// captions) go to the first set, the rest to the second.
    pub fn split_by_audio(&self, train_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        let n = self.audio.len();
        if n < 2 {
            return Err(Error::Config("need at least two audio items to split".into()));
        }
        let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (tr, va) = order.split_at(n_train);
        let (mut tr, mut va) = (tr.to_vec(), va.to_vec());
        tr.sort_unstable();
        va.sort_unstable();
        Ok((self.subset(&tr)?, self.subset(&va)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(id: &str, m: Modality, d: usize) -> EmbeddingSequence {
        EmbeddingSequence::new(id, m, Tensor::zeros(vec![2, d])).unwrap()
    }

    #[test]
    fn rejects_dangling_pairing() {
        let err = PairedDataset::new(
            vec![seq("a", Modality::Audio, 3)],
            vec![seq("t", Modality::Text, 2)],
            vec![1],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Integrity(_)));
    }

    #[test]
    fn rejects_mixed_widths_and_empty_captions() {
        let err = PairedDataset::new(
            vec![seq("a", Modality::Audio, 3), seq("b", Modality::Audio, 4)],
            vec![seq("t", Modality::Text, 2)],
            vec![0],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
        let err = PairedDataset::new(vec![seq("a", Modality::Audio, 3)], vec![], vec![]).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }

    #[test]
    fn all_masked_sequence_is_rejected() {
        let err = EmbeddingSequence::with_mask("x", Modality::Text, Tensor::zeros(vec![2, 2]), vec![false; 2]);
        assert!(matches!(err, Err(Error::EmptySequence)));
    }

    #[test]
    fn split_keeps_captions_with_their_audio() {
        let cfg = SynthConfig {
            n_audio: 10,
            captions_per_audio: 3,
            ..SynthConfig::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let (tr, va) = ds.split_by_audio(0.8, 1).unwrap();
        assert_eq!(tr.audio().len(), 8);
        assert_eq!(va.audio().len(), 2);
        assert_eq!(tr.captions().len(), 24);
        assert_eq!(va.captions().len(), 6);
        for d in [&tr, &va] {
            for (c, &a) in d.captions().iter().zip(d.pairing()) {
                let cap_audio = c.id.split('#').next().unwrap();
                assert_eq!(cap_audio, d.audio()[a].id);
            }
        }
    }
}
