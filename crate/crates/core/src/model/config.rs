use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TiedKind {
    Transformer,
    Linear,
}

impl fmt::Display for TiedKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TiedKind::Transformer => "transformer",
            TiedKind::Linear => "linear",
        })
    }
}

impl FromStr for TiedKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "transformer" | "t" => Ok(TiedKind::Transformer),
            "linear" | "l" => Ok(TiedKind::Linear),
            _ => Err(Error::Config(format!("unknown tied kind `{s}`"))),
        }
    }
}

/// Architecture of a [`TiedRetrievalModel`](super::TiedRetrievalModel).
///
/// Field order is the canonical JSON order written into checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub tied_kind: TiedKind,
    /// One stack shared by both modalities; `false` builds two disjoint copies.
    pub tied: bool,
    pub d_audio_in: usize,
    pub d_text_in: usize,
    pub ffn_mult: usize,
    pub contrastive_dim: usize,
    /// Affine layers in each per-modality projection (GELU between layers).
    pub proj_layers: usize,
    pub learned_positions: bool,
    pub max_positions: usize,
    pub dropout: f64,
    /// Trainable identity-initialised maps in front of the projections, standing in
    /// for finetuning the frozen encoders.
    pub embedding_adapters: bool,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 192,
            n_layers: 2,
            n_heads: 4,
            tied_kind: TiedKind::Transformer,
            tied: true,
            d_audio_in: 512,
            d_text_in: 768,
            ffn_mult: 4,
            contrastive_dim: 192,
            proj_layers: 1,
            learned_positions: false,
            max_positions: 64,
            dropout: 0.0,
            embedding_adapters: false,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Parses presets like `2L192T`, `4L96T`, `2L192L` or the long form
    /// `"4L 96dim Transformer"`. Contrastive width follows `d_model`.
    pub fn preset(name: &str, d_audio_in: usize, d_text_in: usize) -> Result<Self> {
        let bad = || Error::Config(format!("unknown preset `{name}`"));
        let compact: String = name
            .chars()
            .filter(|c| !c.is_whitespace())
            .collect::<String>()
            .to_ascii_lowercase()
            .replace("dim", "");
        let (layers, rest) = compact.split_once('l').ok_or_else(bad)?;
        let n_layers: usize = layers.parse().map_err(|_| bad())?;
        let digits: String = rest.chars().take_while(char::is_ascii_digit).collect();
        let d_model: usize = digits.parse().map_err(|_| bad())?;
        let tied_kind: TiedKind = rest[digits.len()..].parse().map_err(|_| bad())?;
        let cfg = Self {
            d_model,
            n_layers,
            tied_kind,
            d_audio_in,
            d_text_in,
            contrastive_dim: d_model,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn preset_name(&self) -> String {
        let k = match self.tied_kind {
            TiedKind::Transformer => 'T',
            TiedKind::Linear => 'L',
        };
        format!("{}L{}{}", self.n_layers, self.d_model, k)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("d_audio_in", self.d_audio_in),
            ("d_text_in", self.d_text_in),
            ("ffn_mult", self.ffn_mult),
            ("contrastive_dim", self.contrastive_dim),
            ("proj_layers", self.proj_layers),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.tied_kind == TiedKind::Transformer && (self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads)) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.learned_positions && self.max_positions == 0 {
            return Err(Error::Config("max_positions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }

    /// Scalars in one copy of the shared stack, by closed form.
    pub fn stack_param_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = match self.tied_kind {
            TiedKind::Transformer => {
                let f = self.ffn_mult * d;
                4 * (d * d + d) + (d * f + f) + (f * d + d) + 4 * d
            }
            TiedKind::Linear => d * d + d,
        };
        self.n_layers * per_layer
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_presets() {
        let c = ModelConfig::preset("4L96T", 512, 768).unwrap();
        assert_eq!((c.n_layers, c.d_model, c.tied_kind), (4, 96, TiedKind::Transformer));
        let c = ModelConfig::preset("2L 192dim Linear", 512, 768).unwrap();
        assert_eq!((c.n_layers, c.d_model, c.tied_kind), (2, 192, TiedKind::Linear));
        let c = ModelConfig::preset("2L 192dim Transformer", 512, 768).unwrap();
        assert_eq!(c.preset_name(), "2L192T");
        assert_eq!(c.n_heads, 4);
        assert!(ModelConfig::preset("2X192T", 1, 1).is_err());
        assert!(ModelConfig::preset("2L190T", 1, 1).is_err(), "190 is not divisible by 4 heads");
    }

    #[test]
    fn validation() {
        let ok = ModelConfig::default();
        ok.validate().unwrap();
        for bad in [
            ModelConfig { n_heads: 5, ..ok.clone() },
            ModelConfig { d_model: 0, ..ok.clone() },
            ModelConfig { dropout: 1.0, ..ok.clone() },
            ModelConfig { n_layers: 0, ..ok.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
        // heads are irrelevant to linear stacks
        ModelConfig {
            n_heads: 5,
            tied_kind: TiedKind::Linear,
            ..ok
        }
        .validate()
        .unwrap();
    }
}
