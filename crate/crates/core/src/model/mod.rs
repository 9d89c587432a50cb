//! Converging tied layers.
//!
//! Each modality has its own affine projection into `d_model`; both projected sequences
//! then run through the same encoder stack and are mean-pooled over valid positions:
//!
//! ```text
//! R_A = pool(stack(FFN_A(Emb_A)))      R_T = pool(stack(FFN_T(Emb_T)))
//! ```
//!
//! With `tied = true` both paths resolve to one [`EncoderStack`] value, so they bind the
//! same [`ParamId`]s. Contrastive heads map the pooled vectors to unit-norm embeddings.

pub mod checkpoint;
mod config;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embedding::{EmbeddingSequence, Modality};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, Params, Scalar, Tape, Tensor, Var};

pub use config::{ModelConfig, TiedKind};

/// Upper bound on `exp(logit_scale)`.
pub const MAX_LOGIT_SCALE: f64 = 100.0;

pub fn initial_logit_scale() -> f64 {
    (1.0f64 / 0.07).ln()
}

/// Affine map `y = x·W + b` with `W` stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

/// Pre-norm encoder layer: `x + MHA(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerLayer {
    pub ln1: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl TransformerLayer {
    fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.ln1.gamma, self.ln1.beta];
        for l in [&self.query, &self.key, &self.value, &self.out] {
            v.extend(l.params());
        }
        v.extend([self.ln2.gamma, self.ln2.beta]);
        v.extend(self.ff1.params());
        v.extend(self.ff2.params());
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum StackLayer {
    Transformer(TransformerLayer),
    /// Per-frame `GELU(x·W + b)`.
    Linear(Linear),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStack {
    pub layers: Vec<StackLayer>,
}

impl EncoderStack {
    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| match l {
                StackLayer::Transformer(t) => t.params(),
                StackLayer::Linear(l) => l.params().to_vec(),
            })
            .collect()
    }
}

/// How stack parameters are bound on a tape.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Binding {
    /// One leaf per parameter; both paths accumulate into it.
    #[default]
    Joint,
    /// Separate leaves for the audio path and the text path, so each path's
    /// contribution can be read on its own.
    Split,
}

/// Per-pass options.
#[derive(Clone, Debug, Default)]
pub struct Pass {
    pub binding: Binding,
    /// Source of dropout masks; dropout is off when `None`.
    pub dropout_rng: Option<ChaCha8Rng>,
}

impl Pass {
    pub fn train(seed: u64) -> Self {
        Self {
            binding: Binding::Joint,
            dropout_rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }
}

/// Outputs of [`TiedRetrievalModel::forward_batch`].
#[derive(Clone, Copy, Debug)]
pub struct BatchOutputs {
    /// `B × d_model` pooled audio representations.
    pub audio: Var,
    /// `B × d_model` pooled caption representations.
    pub text: Var,
    /// `B × contrastive_dim`, unit rows.
    pub audio_contrastive: Var,
    pub text_contrastive: Var,
    pub logit_scale: Var,
}

#[derive(Clone, Debug)]
pub struct TiedRetrievalModel<F = f32> {
    config: ModelConfig,
    params: Params<F>,
    adapter_audio: Option<Linear>,
    adapter_text: Option<Linear>,
    ffn_audio: Vec<Linear>,
    ffn_text: Vec<Linear>,
    positions: Option<ParamId>,
    /// One entry when tied, `[audio, text]` otherwise.
    stacks: Vec<EncoderStack>,
    proj_audio: Linear,
    proj_text: Linear,
    logit_scale: ParamId,
}

struct Init<'a, F> {
    params: &'a mut Params<F>,
    rng: ChaCha8Rng,
}

impl<F: Scalar> Init<'_, F> {
    fn uniform(&mut self, shape: Vec<usize>, bound: f64) -> Tensor<F> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| F::of(self.rng.random_range(-bound..bound)))
            .collect();
        Tensor::new(shape, data).expect("shape is consistent")
    }

    fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Linear {
        let bound = 1.0 / (d_in as f64).sqrt();
        let w = self.uniform(vec![d_in, d_out], bound);
        let b = self.uniform(vec![d_out], bound);
        Linear {
            weight: self.params.register(format!("{name}.weight"), w),
            bias: self.params.register(format!("{name}.bias"), b),
        }
    }

    fn identity(&mut self, name: &str, d: usize) -> Linear {
        Linear {
            weight: self.params.register(format!("{name}.weight"), Tensor::identity(d)),
            bias: self.params.register(format!("{name}.bias"), Tensor::zeros(vec![d])),
        }
    }

    fn layer_norm(&mut self, name: &str, d: usize) -> LayerNorm {
        LayerNorm {
            gamma: self.params.register(format!("{name}.gamma"), Tensor::full(vec![d], F::one())),
            beta: self.params.register(format!("{name}.beta"), Tensor::zeros(vec![d])),
        }
    }

    fn projection(&mut self, name: &str, d_in: usize, cfg: &ModelConfig) -> Vec<Linear> {
        (0..cfg.proj_layers)
            .map(|i| {
                let input = if i == 0 { d_in } else { cfg.d_model };
                self.linear(&format!("{name}.{i}"), input, cfg.d_model)
            })
            .collect()
    }

    fn stack(&mut self, name: &str, cfg: &ModelConfig) -> EncoderStack {
        let d = cfg.d_model;
        let layers = (0..cfg.n_layers)
            .map(|i| {
                let p = format!("{name}.layer{i}");
                match cfg.tied_kind {
                    TiedKind::Transformer => StackLayer::Transformer(TransformerLayer {
                        ln1: self.layer_norm(&format!("{p}.ln1"), d),
                        query: self.linear(&format!("{p}.query"), d, d),
                        key: self.linear(&format!("{p}.key"), d, d),
                        value: self.linear(&format!("{p}.value"), d, d),
                        out: self.linear(&format!("{p}.out"), d, d),
                        ln2: self.layer_norm(&format!("{p}.ln2"), d),
                        ff1: self.linear(&format!("{p}.ff1"), d, cfg.ffn_mult * d),
                        ff2: self.linear(&format!("{p}.ff2"), cfg.ffn_mult * d, d),
                    }),
                    TiedKind::Linear => StackLayer::Linear(self.linear(&format!("{p}.linear"), d, d)),
                }
            })
            .collect();
        EncoderStack { layers }
    }
}

fn tag(binding: Binding, modality: Modality) -> u8 {
    match (binding, modality) {
        (Binding::Joint, _) => 0,
        (Binding::Split, Modality::Audio) => 1,
        (Binding::Split, Modality::Text) => 2,
    }
}

impl<F: Scalar> TiedRetrievalModel<F> {
    /// Deterministic in `(config, seed)`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = Params::new();
        let mut init = Init {
            params: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let cfg = &config;
        let adapter_audio = cfg
            .embedding_adapters
            .then(|| init.identity("adapter_audio", cfg.d_audio_in));
        let adapter_text = cfg
            .embedding_adapters
            .then(|| init.identity("adapter_text", cfg.d_text_in));
        let ffn_audio = init.projection("ffn_audio", cfg.d_audio_in, cfg);
        let ffn_text = init.projection("ffn_text", cfg.d_text_in, cfg);
        let positions = cfg.learned_positions.then(|| {
            let t = init.uniform(vec![cfg.max_positions, cfg.d_model], 0.02);
            init.params.register("positions", t)
        });
        let stacks = if cfg.tied {
            vec![init.stack("stack", cfg)]
        } else {
            vec![init.stack("stack_audio", cfg), init.stack("stack_text", cfg)]
        };
        let proj_audio = init.linear("proj_audio", cfg.d_model, cfg.contrastive_dim);
        let proj_text = init.linear("proj_text", cfg.d_model, cfg.contrastive_dim);
        let logit_scale = init
            .params
            .register("logit_scale", Tensor::scalar(F::of(initial_logit_scale())));
        Ok(Self {
            config,
            params,
            adapter_audio,
            adapter_text,
            ffn_audio,
            ffn_text,
            positions,
            stacks,
            proj_audio,
            proj_text,
            logit_scale,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<F> {
        &mut self.params
    }

    /// The stack the given modality runs through. Tied models return the same value for both.
    pub fn stack_for(&self, modality: Modality) -> &EncoderStack {
        match modality {
            Modality::Audio => &self.stacks[0],
            Modality::Text => self.stacks.last().expect("at least one stack"),
        }
    }

    pub fn projection_for(&self, modality: Modality) -> &[Linear] {
        match modality {
            Modality::Audio => &self.ffn_audio,
            Modality::Text => &self.ffn_text,
        }
    }

    pub fn adapter_for(&self, modality: Modality) -> Option<&Linear> {
        match modality {
            Modality::Audio => self.adapter_audio.as_ref(),
            Modality::Text => self.adapter_text.as_ref(),
        }
    }

    pub fn logit_scale_id(&self) -> ParamId {
        self.logit_scale
    }

    /// Parameter ids of every distinct stack, in declaration order.
    pub fn stack_param_ids(&self) -> Vec<ParamId> {
        self.stacks.iter().flat_map(EncoderStack::param_ids).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Switches parameter values to another float width (same layout, same ids).
    pub fn cast<G: Scalar>(&self) -> TiedRetrievalModel<G> {
        TiedRetrievalModel {
            config: self.config.clone(),
            params: self.params.cast(),
            adapter_audio: self.adapter_audio.clone(),
            adapter_text: self.adapter_text.clone(),
            ffn_audio: self.ffn_audio.clone(),
            ffn_text: self.ffn_text.clone(),
            positions: self.positions,
            stacks: self.stacks.clone(),
            proj_audio: self.proj_audio.clone(),
            proj_text: self.proj_text.clone(),
            logit_scale: self.logit_scale,
        }
    }

    /// Keeps `exp(logit_scale) <= 100`.
    pub fn clamp_logit_scale(&mut self) {
        let cap = F::of(MAX_LOGIT_SCALE.ln());
        let v = self.params.value_mut(self.logit_scale);
        if v.data()[0] > cap {
            v.data_mut()[0] = cap;
        }
    }

    fn linear(&self, tape: &mut Tape<F>, l: &Linear, x: Var, tag: u8) -> Result<Var> {
        let w = tape.param_tagged(&self.params, l.weight, tag);
        let b = tape.param_tagged(&self.params, l.bias, tag);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }

    fn dropout(&self, tape: &mut Tape<F>, x: Var, pass: &mut Pass) -> Result<Var> {
        let p = self.config.dropout;
        let Some(rng) = pass.dropout_rng.as_mut().filter(|_| p > 0.0) else {
            return Ok(x);
        };
        let keep = F::of(1.0 / (1.0 - p));
        let shape = tape.shape(x).to_vec();
        let n = shape.iter().product();
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < p { F::zero() } else { keep })
            .collect();
        let m = tape.constant(Tensor::new(shape, mask)?);
        tape.mul(x, m)
    }

    /// Per-frame projection of `seq` into `T × d_model` (`FFN_A` or `FFN_T` by modality).
    pub fn project(&self, tape: &mut Tape<F>, seq: &EmbeddingSequence) -> Result<Var> {
        let expected = match seq.modality {
            Modality::Audio => self.config.d_audio_in,
            Modality::Text => self.config.d_text_in,
        };
        if seq.dim() != expected {
            return Err(Error::Schema(format!(
                "{} sequence `{}` has width {}, model expects {expected}",
                seq.modality,
                seq.id,
                seq.dim()
            )));
        }
        let mut x = tape.constant(seq.frames.cast());
        if let Some(a) = self.adapter_for(seq.modality) {
            x = self.linear(tape, a, x, 0)?;
        }
        let proj = self.projection_for(seq.modality);
        for (i, l) in proj.iter().enumerate() {
            if i > 0 {
                x = tape.gelu(x);
            }
            x = self.linear(tape, l, x, 0)?;
        }
        Ok(x)
    }

    pub fn project_audio(&self, tape: &mut Tape<F>, seq: &EmbeddingSequence) -> Result<Var> {
        if seq.modality != Modality::Audio {
            return Err(Error::Schema(format!("`{}` is not an audio sequence", seq.id)));
        }
        self.project(tape, seq)
    }

    pub fn project_text(&self, tape: &mut Tape<F>, seq: &EmbeddingSequence) -> Result<Var> {
        if seq.modality != Modality::Text {
            return Err(Error::Schema(format!("`{}` is not a text sequence", seq.id)));
        }
        self.project(tape, seq)
    }

    /// Runs the stack for `modality` over `projected[T×d_model]` and pools valid positions.
    pub fn encode(
        &self,
        tape: &mut Tape<F>,
        modality: Modality,
        projected: Var,
        mask: &[bool],
        pass: &mut Pass,
    ) -> Result<Var> {
        let shape = tape.shape(projected).to_vec();
        if shape.len() != 2 || shape[1] != self.config.d_model || shape[0] != mask.len() {
            return Err(Error::dim("encode", &shape, &[mask.len(), self.config.d_model]));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::EmptySequence);
        }
        let t_len = shape[0];
        let tag = tag(pass.binding, modality);
        let mut x = projected;
        if let Some(pos) = self.positions {
            if t_len > self.config.max_positions {
                return Err(Error::Contract(format!(
                    "sequence of {t_len} exceeds {} learned positions",
                    self.config.max_positions
                )));
            }
            let mut sel = Tensor::zeros(vec![t_len, self.config.max_positions]);
            for t in 0..t_len {
                sel.data_mut()[t * self.config.max_positions + t] = F::one();
            }
            let sel = tape.constant(sel);
            let table = tape.param(&self.params, pos);
            let p = tape.matmul(sel, table)?;
            x = tape.add(x, p)?;
        }
        for layer in &self.stack_for(modality).layers {
            x = match layer {
                StackLayer::Transformer(l) => self.transformer_layer(tape, l, x, mask, tag, pass)?,
                StackLayer::Linear(l) => {
                    let y = self.linear(tape, l, x, tag)?;
                    let y = tape.gelu(y);
                    self.dropout(tape, y, pass)?
                }
            };
        }
        tape.masked_mean_pool(x, mask)
    }

    fn transformer_layer(
        &self,
        tape: &mut Tape<F>,
        l: &TransformerLayer,
        x: Var,
        mask: &[bool],
        tag: u8,
        pass: &mut Pass,
    ) -> Result<Var> {
        let eps = self.config.ln_eps;
        let heads = self.config.n_heads;
        let dh = self.config.head_dim();

        let g = tape.param_tagged(&self.params, l.ln1.gamma, tag);
        let b = tape.param_tagged(&self.params, l.ln1.beta, tag);
        let h = tape.layer_norm(x, g, b, eps)?;
        let q = self.linear(tape, &l.query, h, tag)?;
        let k = self.linear(tape, &l.key, h, tag)?;
        let v = self.linear(tape, &l.value, h, tag)?;
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        for head in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, head * dh, dh)?,
                    tape.slice_cols(k, head * dh, dh)?,
                    tape.slice_cols(v, head * dh, dh)?,
                )
            };
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.masked_softmax_rows(scores, mask)?;
            let attn = self.dropout(tape, attn, pass)?;
            outs.push(tape.matmul(attn, vh)?);
        }
        let merged = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        let o = self.linear(tape, &l.out, merged, tag)?;
        let o = self.dropout(tape, o, pass)?;
        let x = tape.add(x, o)?;

        let g = tape.param_tagged(&self.params, l.ln2.gamma, tag);
        let b = tape.param_tagged(&self.params, l.ln2.beta, tag);
        let h = tape.layer_norm(x, g, b, eps)?;
        let f = self.linear(tape, &l.ff1, h, tag)?;
        let f = tape.gelu(f);
        let f = self.linear(tape, &l.ff2, f, tag)?;
        let f = self.dropout(tape, f, pass)?;
        tape.add(x, f)
    }

    /// Projection then encoding: the pooled `d_model` representation of one sequence.
    pub fn represent(&self, tape: &mut Tape<F>, seq: &EmbeddingSequence, pass: &mut Pass) -> Result<Var> {
        let x = self.project(tape, seq)?;
        self.encode(tape, seq.modality, x, &seq.mask, pass)
    }

    /// Pooled representation as plain values, on a throwaway tape.
    pub fn embed(&self, seq: &EmbeddingSequence) -> Result<Vec<F>> {
        let mut tape = Tape::new();
        let v = self.represent(&mut tape, seq, &mut Pass::default())?;
        Ok(tape.value(v).data().to_vec())
    }

    /// Row `i` of `audio` pairs with row `i` of `captions`.
    pub fn forward_batch(
        &self,
        tape: &mut Tape<F>,
        audio: &[&EmbeddingSequence],
        captions: &[&EmbeddingSequence],
        pass: &mut Pass,
    ) -> Result<BatchOutputs> {
        if audio.len() != captions.len() {
            return Err(Error::Contract(format!(
                "{} audio items vs {} captions in a batch",
                audio.len(),
                captions.len()
            )));
        }
        if audio.len() < 2 {
            return Err(Error::Contract("a batch needs at least two pairs".into()));
        }
        let mut ra = Vec::with_capacity(audio.len());
        for s in audio {
            if s.modality != Modality::Audio {
                return Err(Error::Schema(format!("`{}` is not an audio sequence", s.id)));
            }
            ra.push(self.represent(tape, s, pass)?);
        }
        let mut rt = Vec::with_capacity(captions.len());
        for s in captions {
            if s.modality != Modality::Text {
                return Err(Error::Schema(format!("`{}` is not a text sequence", s.id)));
            }
            rt.push(self.represent(tape, s, pass)?);
        }
        let ra = tape.stack_rows(&ra)?;
        let rt = tape.stack_rows(&rt)?;
        let ca = self.linear(tape, &self.proj_audio, ra, 0)?;
        let ca = tape.l2_normalize_rows(ca)?;
        let ct = self.linear(tape, &self.proj_text, rt, 0)?;
        let ct = tape.l2_normalize_rows(ct)?;
        let ls = tape.param(&self.params, self.logit_scale);
        Ok(BatchOutputs {
            audio: ra,
            text: rt,
            audio_contrastive: ca,
            text_contrastive: ct,
            logit_scale: ls,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(tied: bool, kind: TiedKind) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            tied_kind: kind,
            tied,
            d_audio_in: 5,
            d_text_in: 6,
            ffn_mult: 2,
            contrastive_dim: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = TiedRetrievalModel::<f32>::init(small(true, TiedKind::Transformer), 3).unwrap();
        let b = TiedRetrievalModel::<f32>::init(small(true, TiedKind::Transformer), 3).unwrap();
        for (x, y) in a.params().groups().iter().zip(b.params().groups()) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.value, y.value);
        }
        let c = TiedRetrievalModel::<f32>::init(small(true, TiedKind::Transformer), 4).unwrap();
        assert_ne!(a.params().groups()[0].value, c.params().groups()[0].value);
    }

    #[test]
    fn init_rejects_bad_config() {
        let cfg = ModelConfig {
            n_heads: 3,
            ..small(true, TiedKind::Transformer)
        };
        assert!(matches!(TiedRetrievalModel::<f32>::init(cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn untied_counts_stack_twice() {
        for kind in [TiedKind::Transformer, TiedKind::Linear] {
            let t = TiedRetrievalModel::<f32>::init(small(true, kind), 0).unwrap();
            let u = TiedRetrievalModel::<f32>::init(small(false, kind), 0).unwrap();
            let stack = t.config().stack_param_count();
            assert_eq!(u.num_params() - t.num_params(), stack);
            let counted: usize = t.stack_param_ids().iter().map(|&id| t.params().value(id).numel()).sum();
            assert_eq!(counted, stack);
        }
    }

    #[test]
    fn tied_paths_share_one_stack() {
        let m = TiedRetrievalModel::<f32>::init(small(true, TiedKind::Transformer), 0).unwrap();
        assert!(std::ptr::eq(m.stack_for(Modality::Audio), m.stack_for(Modality::Text)));
        let u = TiedRetrievalModel::<f32>::init(small(false, TiedKind::Transformer), 0).unwrap();
        assert!(!std::ptr::eq(u.stack_for(Modality::Audio), u.stack_for(Modality::Text)));
        let (a, t) = (u.stack_for(Modality::Audio).param_ids(), u.stack_for(Modality::Text).param_ids());
        assert!(a.iter().all(|id| !t.contains(id)));
    }

    #[test]
    fn layer_norms_start_at_identity_affine() {
        let m = TiedRetrievalModel::<f32>::init(small(true, TiedKind::Transformer), 0).unwrap();
        let g = m.params().find("stack.layer0.ln1.gamma").unwrap();
        assert!(m.params().value(g).data().iter().all(|&v| v == 1.0));
        let b = m.params().find("stack.layer1.ln2.beta").unwrap();
        assert!(m.params().value(b).data().iter().all(|&v| v == 0.0));
        let ls = m.params().value(m.logit_scale_id()).item();
        assert!((ls as f64 - initial_logit_scale()).abs() < 1e-6);
    }

    #[test]
    fn logit_scale_clamp() {
        let mut m = TiedRetrievalModel::<f64>::init(small(true, TiedKind::Linear), 0).unwrap();
        let id = m.logit_scale_id();
        m.params_mut().value_mut(id).data_mut()[0] = 9.0;
        m.clamp_logit_scale();
        assert!((m.params().value(id).item().exp() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn width_mismatch_is_schema_error() {
        let m = TiedRetrievalModel::<f32>::init(small(true, TiedKind::Linear), 0).unwrap();
        let seq = EmbeddingSequence::new("x", Modality::Audio, Tensor::zeros(vec![2, 6])).unwrap();
        let mut tape = Tape::new();
        assert!(matches!(m.project(&mut tape, &seq), Err(Error::Schema(_))));
        assert!(matches!(m.project_text(&mut tape, &seq), Err(Error::Schema(_))));
    }
}
