use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{EmbeddingSequence, Modality, PairedDataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Shared-latent generator settings.
///
/// Every audio item owns a unit-norm latent `z`. Its frames are `A·z + σ·ε` and each
/// of its captions' tokens are `B·z + σ·ε`, for fixed random maps `A`, `B`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_audio: usize,
    pub captions_per_audio: usize,
    pub d_audio: usize,
    pub d_text: usize,
    /// Inclusive range of sequence lengths.
    pub min_len: usize,
    pub max_len: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Use `A = B = I` (requires `d_audio == d_text`).
    #[serde(default)]
    pub identity_maps: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_audio: 64,
            captions_per_audio: 5,
            d_audio: 16,
            d_text: 24,
            min_len: 2,
            max_len: 6,
            noise_sigma: 0.1,
            seed: 0,
            identity_maps: false,
        }
    }
}

impl SynthConfig {
    pub fn latent_dim(&self) -> usize {
        self.d_audio.min(self.d_text)
    }

    fn validate(&self) -> Result<()> {
        if self.n_audio == 0 || self.captions_per_audio == 0 || self.d_audio == 0 || self.d_text == 0 {
            return Err(Error::Config("synthetic counts and widths must be positive".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "bad length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        if self.identity_maps && self.d_audio != self.d_text {
            return Err(Error::Config("identity maps need d_audio == d_text".into()));
        }
        Ok(())
    }
}

fn gaussian_map(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let s = 1.0 / (cols as f64).sqrt();
    (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal) * s).collect()
}

fn identity_map(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    (0..n).for_each(|i| m[i * n + i] = 1.0);
    m
}

fn apply(map: &[f64], rows: usize, z: &[f64]) -> Vec<f64> {
    let k = z.len();
    (0..rows)
        .map(|r| map[r * k..(r + 1) * k].iter().zip(z).map(|(a, b)| a * b).sum())
        .collect()
}

fn sequence(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    id: String,
    modality: Modality,
    clean: &[f64],
) -> Result<EmbeddingSequence> {
    let t = rng.random_range(cfg.min_len..=cfg.max_len);
    let d = clean.len();
    let mut data = Vec::with_capacity(t * d);
    for _ in 0..t {
        for &c in clean {
            let eps: f64 = rng.sample(StandardNormal);
            data.push((c + cfg.noise_sigma * eps) as f32);
        }
    }
    EmbeddingSequence::new(id, modality, Tensor::new(vec![t, d], data)?)
}

/// Deterministic in `cfg`; caption ids are `<audio id>#<k>`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<PairedDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.latent_dim();
    let (map_a, map_b) = if cfg.identity_maps {
        (identity_map(k), identity_map(k))
    } else {
        (
            gaussian_map(&mut rng, cfg.d_audio, k),
            gaussian_map(&mut rng, cfg.d_text, k),
        )
    };

    let mut audio = Vec::with_capacity(cfg.n_audio);
    let mut captions = Vec::with_capacity(cfg.n_audio * cfg.captions_per_audio);
    let mut pairing = Vec::with_capacity(captions.capacity());
    for a in 0..cfg.n_audio {
        let mut z: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        z.iter_mut().for_each(|v| *v /= norm);

        let id = format!("audio_{a:05}");
        let clean_a = apply(&map_a, cfg.d_audio, &z);
        let clean_t = apply(&map_b, cfg.d_text, &z);
        for c in 0..cfg.captions_per_audio {
            captions.push(sequence(&mut rng, cfg, format!("{id}#{c}"), Modality::Text, &clean_t)?);
            pairing.push(a);
        }
        audio.push(sequence(&mut rng, cfg, id, Modality::Audio, &clean_a)?);
    }
    PairedDataset::new(audio, captions, pairing)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts() {
        let ds = generate_synthetic(&SynthConfig::default()).unwrap();
        assert_eq!(ds.audio().len(), 64);
        assert_eq!(ds.captions().len(), 320);
        assert!(ds.pairing_degrees().iter().all(|&d| d == 5));
        assert_eq!(ds.d_audio(), 16);
        assert_eq!(ds.d_text(), 24);
    }

    #[test]
    fn same_seed_same_bits() {
        let cfg = SynthConfig {
            seed: 42,
            ..SynthConfig::default()
        };
        assert_eq!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&cfg).unwrap());
        let other = SynthConfig { seed: 43, ..cfg.clone() };
        assert_ne!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&other).unwrap());
    }

    #[test]
    fn noiseless_identity_shares_latent() {
        let cfg = SynthConfig {
            d_audio: 8,
            d_text: 8,
            noise_sigma: 0.0,
            identity_maps: true,
            ..SynthConfig::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        for (c, &a) in ds.captions().iter().zip(ds.pairing()) {
            assert_eq!(c.frames.row(0), ds.audio()[a].frames.row(0));
        }
    }

    #[test]
    fn rejects_bad_config() {
        for cfg in [
            SynthConfig { captions_per_audio: 0, ..SynthConfig::default() },
            SynthConfig { n_audio: 0, ..SynthConfig::default() },
            SynthConfig { min_len: 4, max_len: 2, ..SynthConfig::default() },
            SynthConfig { identity_maps: true, ..SynthConfig::default() },
        ] {
            assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
        }
    }
}
