//! Deterministic training: Adam, reduce-on-plateau, early stopping on validation
//! mAP@10, and keeping the best model seen.

mod ablation;
mod adam;
mod schedule;

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use ablation::{ablation_grid, grid_cells, AblationRow, AblationTable, Axis, GridCell};
pub use adam::{adam_step, AdamConfig, AdamState};
pub use schedule::{scheduler_step, Schedule, ScheduleEvent, IMPROVEMENT_THRESHOLD};

use crate::embedding::batch::epoch_rng;
use crate::embedding::{batch_iter, EmbeddingSequence, PairedDataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, RetrievalReport};
use crate::loss::{combined_loss, LossConfig, NegativeStrategy, Negatives};
use crate::model::{ModelConfig, Pass, TiedRetrievalModel};
use crate::tensor::Tape;

const NEGATIVES_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub model: ModelConfig,
    /// Train per-modality embedding maps too; overrides `model.embedding_adapters`.
    pub trainable_embeddings: bool,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_epochs: 150,
            lr: 1e-3,
            weight_decay: 0.0,
            plateau_factor: 0.1,
            plateau_patience: 5,
            early_stop_patience: 15,
            seed: 0,
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            trainable_embeddings: false,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size {} leaves no in-batch negatives", self.batch_size));
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad(format!("plateau_factor {} outside (0, 1)", self.plateau_factor));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return bad("patience must be at least 1".into());
        }
        self.loss.validate()?;
        self.resolved_model().validate()
    }

    /// The model config actually trained.
    pub fn resolved_model(&self) -> ModelConfig {
        ModelConfig {
            embedding_adapters: self.trainable_embeddings,
            ..self.model.clone()
        }
    }
}

/// Optimizer and schedule state carried across epochs.
#[derive(Clone, Debug)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub schedule: Schedule,
    pub adam: AdamState<f32>,
}

impl TrainState {
    pub fn new(config: &TrainConfig, model: &TiedRetrievalModel<f32>) -> Self {
        Self {
            epoch: 0,
            schedule: Schedule::new(
                config.lr,
                config.plateau_factor,
                config.plateau_patience,
                config.early_stop_patience,
            ),
            adam: AdamState::new(model.params()),
        }
    }

    pub fn lr_current(&self) -> f64 {
        self.schedule.lr_current
    }

    pub fn best_metric(&self) -> f64 {
        self.schedule.best_metric
    }

    pub fn epochs_since_improvement(&self) -> usize {
        self.schedule.epochs_since_improvement
    }
}

/// One history row; `lr` is the rate used during the epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_map10: f64,
    pub val_r1: f64,
    pub val_r5: f64,
    pub val_r10: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_map10,val_r1,val_r5,val_r10,lr";

impl History {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn best_map10(&self) -> Option<f64> {
        self.epochs.iter().map(|e| e.val_map10).reduce(f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(HISTORY_HEADER);
        s.push('\n');
        for e in &self.epochs {
            // `{:?}` prints the shortest round-tripping form
            writeln!(
                s,
                "{},{:?},{:?},{:?},{:?},{:?},{:?}",
                e.epoch, e.train_loss, e.val_map10, e.val_r1, e.val_r5, e.val_r10, e.lr
            )
            .expect("writing to a String");
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation mAP@10, or the initial
    /// model when no epoch ran.
    pub model: TiedRetrievalModel<f32>,
    pub history: History,
    /// 1-based epoch of `model`.
    pub best_epoch: Option<usize>,
    pub best_report: Option<RetrievalReport>,
    pub stopped_early: bool,
    pub state: TrainState,
}

fn check_dims(model: &ModelConfig, ds: &PairedDataset, what: &str) -> Result<()> {
    if ds.d_audio() != model.d_audio_in || ds.d_text() != model.d_text_in {
        return Err(Error::Config(format!(
            "{what} set has widths audio {} / text {}, model expects {} / {}",
            ds.d_audio(),
            ds.d_text(),
            model.d_audio_in,
            model.d_text_in
        )));
    }
    Ok(())
}

/// Runs one epoch of updates; returns the mean batch loss.
fn run_epoch(
    config: &TrainConfig,
    model: &mut TiedRetrievalModel<f32>,
    state: &mut TrainState,
    train: &PairedDataset,
) -> Result<f64> {
    let epoch = state.epoch as u64;
    let batches = batch_iter(train, config.batch_size, config.seed, epoch)?;
    let mut neg_rng = epoch_rng(config.seed, epoch, NEGATIVES_STREAM);
    let mut drop_rng = epoch_rng(config.seed, epoch, DROPOUT_STREAM);
    let lr = state.lr_current();
    let (mut total, mut n) = (0.0, 0usize);
    for (k, batch) in batches.enumerate() {
        let audio: Vec<&EmbeddingSequence> = batch.audio.iter().map(|&i| &train.audio()[i]).collect();
        let caps: Vec<&EmbeddingSequence> = batch.captions.iter().map(|&i| &train.captions()[i]).collect();
        let mut tape = Tape::new();
        let mut pass = Pass::train(drop_rng.random());
        let out = model.forward_batch(&mut tape, &audio, &caps, &mut pass)?;
        let ids = || caps.iter().map(|s| s.id.as_str()).collect::<Vec<_>>();
        for v in [out.audio, out.text, out.audio_contrastive, out.text_contrastive] {
            if tape.value(v).data().iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite representations at epoch {} batch {k}; captions {:?}",
                    state.epoch + 1,
                    ids()
                )));
            }
        }
        let negatives = match config.loss.negative_strategy {
            NegativeStrategy::AllInBatch => Negatives::All,
            NegativeStrategy::RandomOne => Negatives::sample(batch.len(), &mut neg_rng),
        };
        let parts = combined_loss(&mut tape, &out, &config.loss, &negatives)?;
        let loss = tape.value(parts.total).item() as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "loss is {loss} at epoch {} batch {k}; captions {:?}",
                state.epoch + 1,
                ids()
            )));
        }
        model.params_mut().zero_grad();
        tape.backward_into(parts.total, model.params_mut())?;
        adam_step(model.params_mut(), &mut state.adam, lr, config.weight_decay, &config.adam)?;
        model.clamp_logit_scale();
        total += loss;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Config(format!(
            "training set has {} captions, fewer than one batch of {}",
            train.captions().len(),
            config.batch_size
        )));
    }
    Ok(total / n as f64)
}

/// Trains from a fresh initialisation seeded by `config.seed`.
pub fn train(config: &TrainConfig, train: &PairedDataset, val: &PairedDataset) -> Result<TrainOutcome> {
    train_with(config, train, val, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    config: &TrainConfig,
    train: &PairedDataset,
    val: &PairedDataset,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    let model_cfg = config.resolved_model();
    check_dims(&model_cfg, train, "training")?;
    check_dims(&model_cfg, val, "validation")?;

    let mut model = TiedRetrievalModel::<f32>::init(model_cfg, config.seed)?;
    let mut state = TrainState::new(config, &model);
    let mut best = model.clone();
    let mut history = History::default();
    let (mut best_epoch, mut best_report, mut stopped_early) = (None, None, false);

    while state.epoch < config.max_epochs {
        let lr = state.lr_current();
        let train_loss = run_epoch(config, &mut model, &mut state, train)?;
        state.epoch += 1;
        let report = evaluate(&model, val)?;
        let ev = scheduler_step(&mut state.schedule, report.map10)?;
        let record = EpochRecord {
            epoch: state.epoch,
            train_loss,
            val_map10: report.map10,
            val_r1: report.r1,
            val_r5: report.r5,
            val_r10: report.r10,
            lr,
        };
        on_epoch(&record);
        history.epochs.push(record);
        if ev.improved {
            best = model.clone();
            best_epoch = Some(state.epoch);
            best_report = Some(report);
        }
        if ev.stop {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome {
        model: best,
        history,
        best_epoch,
        best_report,
        stopped_early,
        state,
    })
}
