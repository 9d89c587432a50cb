use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{train, TrainConfig};
use crate::embedding::PairedDataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate, RetrievalReport};
use crate::model::TiedKind;

/// A configuration switch varied by [`ablation_grid`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    UseContrastive,
    TrainableEmbeddings,
    TiedKind,
    Tied,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::UseContrastive, Axis::TrainableEmbeddings, Axis::TiedKind, Axis::Tied];

    pub fn name(self) -> &'static str {
        match self {
            Axis::UseContrastive => "use_contrastive",
            Axis::TrainableEmbeddings => "trainable_embeddings",
            Axis::TiedKind => "tied_kind",
            Axis::Tied => "tied",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "use_contrastive" | "contrastive" => Ok(Axis::UseContrastive),
            "trainable_embeddings" | "trainable" => Ok(Axis::TrainableEmbeddings),
            "tied_kind" | "kind" => Ok(Axis::TiedKind),
            "tied" => Ok(Axis::Tied),
            _ => Err(Error::Config(format!("unknown ablation axis `{s}`"))),
        }
    }
}

/// The four switchable settings of one grid cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridCell {
    pub use_contrastive: bool,
    pub trainable_embeddings: bool,
    pub tied_kind: TiedKind,
    pub tied: bool,
}

impl GridCell {
    fn of(cfg: &TrainConfig) -> Self {
        Self {
            use_contrastive: cfg.loss.use_contrastive,
            trainable_embeddings: cfg.trainable_embeddings,
            tied_kind: cfg.model.tied_kind,
            tied: cfg.model.tied,
        }
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.loss.use_contrastive = self.use_contrastive;
        cfg.trainable_embeddings = self.trainable_embeddings;
        cfg.model.tied_kind = self.tied_kind;
        cfg.model.tied = self.tied;
        cfg
    }

    fn set(&mut self, axis: Axis, first: bool) {
        match axis {
            Axis::UseContrastive => self.use_contrastive = first,
            Axis::TrainableEmbeddings => self.trainable_embeddings = !first,
            Axis::TiedKind => {
                self.tied_kind = if first {
                    TiedKind::Transformer
                } else {
                    TiedKind::Linear
                }
            }
            Axis::Tied => self.tied = first,
        }
    }
}

/// Cartesian product over `axes` (duplicates ignored), first axis varying slowest.
/// Each axis takes its reference value first: contrastive on, frozen embeddings,
/// transformer, tied. Axes not listed keep the base value.
pub fn grid_cells(base: &TrainConfig, axes: &[Axis]) -> Vec<GridCell> {
    let mut uniq: Vec<Axis> = Vec::new();
    for &a in axes {
        if !uniq.contains(&a) {
            uniq.push(a);
        }
    }
    let mut cells = vec![GridCell::of(base)];
    for &axis in &uniq {
        cells = cells
            .into_iter()
            .flat_map(|c| {
                [true, false].map(|first| {
                    let mut c = c;
                    c.set(axis, first);
                    c
                })
            })
            .collect();
    }
    cells
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: GridCell,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub report: RetrievalReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

pub const ABLATION_HEADER: &str =
    "use_contrastive,trainable_embeddings,tied_kind,tied,epochs,best_epoch,map10,r1,r5,r10";

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(ABLATION_HEADER);
        s.push('\n');
        for r in &self.rows {
            let c = &r.cell;
            writeln!(
                s,
                "{},{},{},{},{},{},{:?},{:?},{:?},{:?}",
                c.use_contrastive,
                c.trainable_embeddings,
                c.tied_kind,
                c.tied,
                r.epochs_run,
                r.best_epoch.map_or_else(String::new, |e| e.to_string()),
                r.report.map10,
                r.report.r1,
                r.report.r5,
                r.report.r10
            )
            .expect("writing to a String");
        }
        s
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<12} {:<10} {:<12} {:<6} {:>7} {:>8} {:>8} {:>8} {:>8}",
            "contrastive", "trainable", "kind", "tied", "epochs", "mAP@10", "R@1", "R@5", "R@10"
        )?;
        for r in &self.rows {
            let c = &r.cell;
            writeln!(
                f,
                "{:<12} {:<10} {:<12} {:<6} {:>7} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                c.use_contrastive,
                c.trainable_embeddings,
                c.tied_kind.to_string(),
                c.tied,
                r.epochs_run,
                r.report.map10,
                r.report.r1,
                r.report.r5,
                r.report.r10
            )?;
        }
        Ok(())
    }
}

/// Trains one run per cell (in parallel on the current rayon pool) and scores each
/// run's best model on `val`. Every cell uses the same data and seed.
pub fn ablation_grid(
    base: &TrainConfig,
    axes: &[Axis],
    train_set: &PairedDataset,
    val: &PairedDataset,
) -> Result<AblationTable> {
    let rows = grid_cells(base, axes)
        .into_par_iter()
        .map(|cell| {
            let out = train(&cell.apply(base), train_set, val)?;
            let report = match out.best_report {
                Some(r) => r,
                None => evaluate(&out.model, val)?,
            };
            Ok(AblationRow {
                cell,
                epochs_run: out.history.len(),
                best_epoch: out.best_epoch,
                report,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable { rows })
}
