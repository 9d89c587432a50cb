//! Log-mel spectrogram of in-memory PCM.
//!
//! Hann-windowed frames of `win` samples every `hop` samples, `|FFT|²` power, an HTK-scale
//! triangular mel filterbank, then `max(10·log10(E), floor_db)`.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogMelConfig {
    pub sample_rate: u32,
    pub n_mels: usize,
    pub hop: usize,
    /// Window length; also the FFT size.
    pub win: usize,
    pub floor_db: f64,
    pub f_min: f64,
    /// Upper filterbank edge; `None` means Nyquist.
    pub f_max: Option<f64>,
}

impl Default for LogMelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 44_100,
            n_mels: 64,
            hop: 441,
            win: 1764,
            floor_db: -100.0,
            f_min: 0.0,
            f_max: None,
        }
    }
}

impl LogMelConfig {
    pub fn n_frames(&self, n_samples: usize) -> usize {
        if n_samples < self.win {
            0
        } else {
            1 + (n_samples - self.win) / self.hop
        }
    }

    pub fn n_bins(&self) -> usize {
        self.win / 2 + 1
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters with unit peaks, `n_mels × n_bins`, row-major.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    n_mels: usize,
    n_bins: usize,
    weights: Vec<f64>,
}

impl MelFilterbank {
    pub fn htk(n_mels: usize, n_fft: usize, sample_rate: f64, f_min: f64, f_max: f64) -> Self {
        let n_bins = n_fft / 2 + 1;
        let (lo, hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let mut weights = vec![0.0; n_mels * n_bins];
        for m in 0..n_mels {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..n_bins {
                let f = k as f64 * sample_rate / n_fft as f64;
                let w = if f > left && f <= center {
                    (f - left) / (center - left)
                } else if f > center && f < right {
                    (right - f) / (right - center)
                } else {
                    0.0
                };
                weights[m * n_bins + k] = w;
            }
        }
        Self {
            n_mels,
            n_bins,
            weights,
        }
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn filter(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate().take(self.n_mels) {
            *o = self.filter(m).iter().zip(power).map(|(w, p)| w * p).sum();
        }
    }
}

/// Reusable transform: FFT plan, window and filterbank built once.
pub struct LogMel {
    cfg: LogMelConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    bank: MelFilterbank,
}

impl LogMel {
    pub fn new(cfg: LogMelConfig) -> Result<Self> {
        if cfg.win < 2 || cfg.hop == 0 || cfg.n_mels == 0 || cfg.sample_rate == 0 {
            return Err(Error::Config(format!("invalid log-mel settings {cfg:?}")));
        }
        let sr = cfg.sample_rate as f64;
        let f_max = cfg.f_max.unwrap_or(sr / 2.0);
        if !(cfg.f_min >= 0.0 && f_max > cfg.f_min && f_max <= sr / 2.0) {
            return Err(Error::Config(format!("bad filterbank edges {}..{f_max}", cfg.f_min)));
        }
        let fft = FftPlanner::new().plan_fft_forward(cfg.win);
        // periodic Hann
        let window = (0..cfg.win)
            .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / cfg.win as f64).cos())
            .collect();
        let bank = MelFilterbank::htk(cfg.n_mels, cfg.win, sr, cfg.f_min, f_max);
        Ok(Self {
            cfg,
            fft,
            window,
            bank,
        })
    }

    pub fn config(&self) -> &LogMelConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.bank
    }

    pub fn compute(&self, pcm: &[f64]) -> Result<Tensor<f64>> {
        let cfg = &self.cfg;
        if pcm.len() < cfg.win {
            return Err(Error::TooShort {
                len: pcm.len(),
                win: cfg.win,
            });
        }
        let n_frames = cfg.n_frames(pcm.len());
        let n_bins = cfg.n_bins();
        let mut out = vec![0.0; n_frames * cfg.n_mels];
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.win];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; n_bins];
        for t in 0..n_frames {
            let frame = &pcm[t * cfg.hop..t * cfg.hop + cfg.win];
            for ((b, &s), &w) in buf.iter_mut().zip(frame).zip(&self.window) {
                *b = Complex::new(s * w, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            let row = &mut out[t * cfg.n_mels..(t + 1) * cfg.n_mels];
            self.bank.apply(&power, row);
            for v in row.iter_mut() {
                *v = (10.0 * v.log10()).max(cfg.floor_db);
            }
        }
        Tensor::new(vec![n_frames, cfg.n_mels], out)
    }
}

/// `T × n_mels` log-mel energies in dB, `T = 1 + ⌊(S − win)/hop⌋`.
pub fn logmel_spectrogram(pcm: &[f64], cfg: &LogMelConfig) -> Result<Tensor<f64>> {
    LogMel::new(cfg.clone())?.compute(pcm)
}
