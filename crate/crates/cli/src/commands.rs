use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use tiedrank::checks::{check_full_model, check_ops, small_model_config, GroupResult};
use tiedrank::embedding::{generate_synthetic, load_dataset, write_dataset, PairedDataset, SynthConfig};
use tiedrank::eval::{evaluate, RetrievalReport};
use tiedrank::loss::{LossConfig, NegativeStrategy};
use tiedrank::model::{checkpoint, ModelConfig, TiedKind, TiedRetrievalModel};
use tiedrank::tensor::gradcheck::GradCheck;
use tiedrank::train::{ablation_grid, train_with, Axis, TrainConfig};
use tiedrank::OpKind;

use crate::exit::{self, usage, Fail};
use crate::manifest::{absolute_dir, RunManifest};
use crate::{AblateArgs, EvalArgs, GradcheckArgs, Hyper, KindArg, NegativesArg, SynthArgs, TrainArgs};

#[derive(Serialize, Deserialize)]
struct SynthRun {
    synth: SynthConfig,
    val_fraction: f64,
}

#[derive(Serialize, Deserialize)]
struct EvalRun {
    expect: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct AblateRun {
    axes: Vec<Axis>,
    base: TrainConfig,
}

fn out_dir(flag: &Option<PathBuf>, manifest: Option<&RunManifest>) -> Result<PathBuf> {
    match (flag, manifest) {
        (Some(d), _) => absolute_dir(d),
        (None, Some(m)) => Ok(m.out_dir.clone()),
        (None, None) => Err(usage("--out is required").into()),
    }
}

fn required<'a>(flag: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
    flag.as_deref().ok_or_else(|| usage(format!("--{name} is required")).into())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

// ---- synth -----------------------------------------------------------------

pub fn synth(a: SynthArgs) -> Result<i32> {
    let from = a.from_manifest.as_deref().map(|p| RunManifest::read(p, "synth")).transpose()?;
    let run = match &from {
        Some(m) => m.config_as::<SynthRun>()?,
        None => SynthRun {
            synth: SynthConfig {
                n_audio: a.n_audio as usize,
                captions_per_audio: a.captions as usize,
                d_audio: a.d_audio as usize,
                d_text: a.d_text as usize,
                min_len: a.min_len,
                max_len: a.max_len,
                noise_sigma: a.noise,
                seed: a.seed,
                identity_maps: a.identity_maps,
            },
            val_fraction: a.val_fraction,
        },
    };
    if !(run.val_fraction > 0.0 && run.val_fraction < 1.0) {
        return Err(usage(format!("--val-fraction must be in (0, 1), got {}", run.val_fraction)).into());
    }
    let out = out_dir(&a.out, from.as_ref())?;
    RunManifest::new("synth", run.synth.seed, &out, &run)?.write()?;

    let ds = generate_synthetic(&run.synth)?;
    let (train, val) = ds.split_by_audio(1.0 - run.val_fraction, run.synth.seed)?;
    write_dataset(&ds, out.join("data.jsonl"))?;
    write_dataset(&train, out.join("train.jsonl"))?;
    write_dataset(&val, out.join("val.jsonl"))?;
    println!(
        "{} audio + {} text records (train {}/{}, val {}/{}) -> {}",
        ds.audio().len(),
        ds.captions().len(),
        train.audio().len(),
        train.captions().len(),
        val.audio().len(),
        val.captions().len(),
        out.display()
    );
    Ok(exit::OK)
}

// ---- train -----------------------------------------------------------------

fn build_config(h: &Hyper, d_audio: usize, d_text: usize) -> Result<TrainConfig> {
    let mut model = ModelConfig::preset(&h.preset, d_audio, d_text)?;
    if let Some(k) = h.tied_kind {
        model.tied_kind = match k {
            KindArg::Transformer => TiedKind::Transformer,
            KindArg::Linear => TiedKind::Linear,
        };
    }
    model.tied = !h.untied;
    if let Some(d) = h.d_model {
        model.d_model = d;
        if h.contrastive_dim.is_none() {
            model.contrastive_dim = d;
        }
    }
    if let Some(n) = h.layers {
        model.n_layers = n;
    }
    if let Some(n) = h.heads {
        model.n_heads = n;
    }
    if let Some(c) = h.contrastive_dim {
        model.contrastive_dim = c;
    }
    if let Some(p) = h.dropout {
        model.dropout = p;
    }
    model.learned_positions = h.learned_positions;
    let cfg = TrainConfig {
        batch_size: h.batch_size,
        max_epochs: h.max_epochs,
        lr: h.lr,
        weight_decay: h.weight_decay,
        plateau_factor: h.plateau_factor,
        plateau_patience: h.plateau_patience,
        early_stop_patience: h.early_stop_patience,
        seed: h.seed,
        loss: LossConfig {
            margin: h.margin,
            use_contrastive: !h.no_contrastive,
            use_ranking: !h.no_ranking,
            negative_strategy: match h.negatives {
                NegativesArg::All => NegativeStrategy::AllInBatch,
                NegativesArg::Random => NegativeStrategy::RandomOne,
            },
            ranking_bidirectional: !h.unidirectional,
        },
        model,
        trainable_embeddings: h.trainable_embeddings,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

struct Inputs {
    train_path: PathBuf,
    val_path: PathBuf,
    train: PairedDataset,
    val: PairedDataset,
}

fn load_pair(train: &Path, val: &Path) -> Result<Inputs> {
    Ok(Inputs {
        train_path: train.to_path_buf(),
        val_path: val.to_path_buf(),
        train: load_dataset(train)?,
        val: load_dataset(val)?,
    })
}

pub fn train(a: TrainArgs) -> Result<i32> {
    let from = a.from_manifest.as_deref().map(|p| RunManifest::read(p, "train")).transpose()?;
    let (cfg, inputs) = match &from {
        Some(m) => {
            let inputs = load_pair(m.input_path("train")?, m.input_path("val")?)?;
            (m.config_as::<TrainConfig>()?, inputs)
        }
        None => {
            let inputs = load_pair(required(&a.train, "train")?, required(&a.val, "val")?)?;
            let cfg = build_config(&a.hyper, inputs.train.d_audio(), inputs.train.d_text())?;
            (cfg, inputs)
        }
    };
    let out = out_dir(&a.out, from.as_ref())?;
    RunManifest::new("train", cfg.seed, &out, &cfg)?
        .input("train", &inputs.train_path)?
        .input("val", &inputs.val_path)?
        .write()?;

    let quiet = a.quiet;
    let outcome = train_with(&cfg, &inputs.train, &inputs.val, |r| {
        if !quiet {
            println!(
                "epoch {:>3}  loss {:.5}  mAP@10 {:.4}  R@1 {:.4}  R@5 {:.4}  R@10 {:.4}  lr {:.1e}",
                r.epoch, r.train_loss, r.val_map10, r.val_r1, r.val_r5, r.val_r10, r.lr
            );
        }
    })?;

    let bytes = checkpoint::to_bytes(&outcome.model);
    fs::write(out.join("best.ckpt"), &bytes).context("writing checkpoint")?;
    outcome.history.write_csv(out.join("history.csv"))?;
    let report = match outcome.best_report {
        Some(r) => r,
        None => evaluate(&outcome.model, &inputs.val)?,
    };
    write_text(&out.join("report.json"), &report.to_json())?;

    let best = outcome.best_epoch.map_or("none".to_string(), |e| e.to_string());
    println!(
        "{} epochs{}, best epoch {best}, val mAP@10 {:.4}",
        outcome.history.len(),
        if outcome.stopped_early { " (early stop)" } else { "" },
        report.map10
    );
    println!("checkpoint sha256 {}", sha256_hex(&bytes));
    Ok(exit::OK)
}

// ---- eval ------------------------------------------------------------------

fn differing_fields(a: &ModelConfig, b: &ModelConfig) -> Vec<String> {
    let (va, vb) = (serde_json::to_value(a).unwrap_or_default(), serde_json::to_value(b).unwrap_or_default());
    match (va.as_object(), vb.as_object()) {
        (Some(x), Some(y)) => x
            .iter()
            .filter(|(k, v)| y.get(*k) != Some(*v))
            .map(|(k, v)| format!("{k}: expected {v}, checkpoint has {}", y.get(k).cloned().unwrap_or_default()))
            .collect(),
        _ => vec![],
    }
}

pub fn eval(a: EvalArgs) -> Result<i32> {
    let from = a.from_manifest.as_deref().map(|p| RunManifest::read(p, "eval")).transpose()?;
    let (ckpt, data, run) = match &from {
        Some(m) => (
            m.input_path("checkpoint")?.to_path_buf(),
            m.input_path("data")?.to_path_buf(),
            m.config_as::<EvalRun>()?,
        ),
        None => (
            required(&a.checkpoint, "checkpoint")?.to_path_buf(),
            required(&a.data, "data")?.to_path_buf(),
            EvalRun { expect: a.expect.clone() },
        ),
    };
    for p in [&ckpt, &data] {
        if !p.is_file() {
            return Err(usage(format!("{}: no such file", p.display())).into());
        }
    }
    let out = match (&a.out, &from) {
        (None, None) => None,
        _ => Some(out_dir(&a.out, from.as_ref())?),
    };
    if let Some(out) = &out {
        let mut m = RunManifest::new("eval", 0, out, &run)?.input("checkpoint", &ckpt)?.input("data", &data)?;
        if let Some(e) = &run.expect {
            m = m.input("expect", e)?;
        }
        m.write()?;
    }

    let model: TiedRetrievalModel<f32> = checkpoint::load(&ckpt)?;
    if let Some(e) = &run.expect {
        let expected = RunManifest::read(e, "train")?.config_as::<TrainConfig>()?.resolved_model();
        let diff = differing_fields(&expected, model.config());
        if !diff.is_empty() {
            return Err(Fail::mismatch(format!("checkpoint does not match {}: {}", e.display(), diff.join("; "))).into());
        }
    }
    let ds = load_dataset(&data)?;
    let mc = model.config();
    if ds.d_audio() != mc.d_audio_in || ds.d_text() != mc.d_text_in {
        return Err(Fail::mismatch(format!(
            "dataset widths audio {} / text {} but checkpoint expects {} / {}",
            ds.d_audio(),
            ds.d_text(),
            mc.d_audio_in,
            mc.d_text_in
        ))
        .into());
    }
    let report: RetrievalReport = evaluate(&model, &ds)?;
    println!("{report}");
    match &out {
        Some(out) => write_text(&out.join("report.json"), &report.to_json())?,
        None => println!("{}", report.to_json()),
    }
    Ok(exit::OK)
}

// ---- gradcheck ---------------------------------------------------------------

pub fn gradcheck(a: GradcheckArgs) -> Result<i32> {
    let kinds: Vec<OpKind> = if a.only.is_empty() {
        OpKind::ALL.to_vec()
    } else {
        a.only.iter().map(|s| OpKind::from_str(s)).collect::<Result<_, _>>()?
    };
    let mut gc = GradCheck::new(a.eps);
    if let Some(name) = &a.inject_wrong_sign {
        gc = gc.with_flip(OpKind::from_str(name)?);
    }
    let relative = |r: GroupResult| GroupResult {
        tolerance: if r.group.ends_with("(zero)") { r.tolerance } else { a.tolerance },
        ..r
    };
    let mut results: Vec<GroupResult> = check_ops(&kinds, a.seeds, &gc)?.into_iter().map(relative).collect();
    if a.only.is_empty() {
        let d = (5, 7);
        let tied = small_model_config(d.0, d.1);
        let linear = ModelConfig {
            tied: false,
            tied_kind: TiedKind::Linear,
            ..tied.clone()
        };
        let random = LossConfig {
            negative_strategy: NegativeStrategy::RandomOne,
            ..LossConfig::default()
        };
        for (tag, cfg, loss) in [("model", &tied, LossConfig::default()), ("model-untied-linear", &linear, random)] {
            for r in check_full_model(cfg, &loss, 4, 0, &gc)? {
                results.push(relative(GroupResult {
                    group: format!("{tag}/{}", r.group),
                    ..r
                }));
            }
        }
    }
    let width = results.iter().map(|r| r.group.len()).max().unwrap_or(0);
    let mut failed = 0;
    for r in &results {
        let ok = r.passed();
        failed += usize::from(!ok);
        println!(
            "{:<width$}  {:>10.3e}  tol {:.0e}  {}",
            r.group,
            r.max_rel_error,
            r.tolerance,
            if ok { "ok" } else { "FAIL" }
        );
    }
    println!("{} groups, {failed} failed", results.len());
    if let Some(p) = &a.report {
        write_text(p, &serde_json::to_string_pretty(&results)?)?;
    }
    Ok(if failed == 0 { exit::OK } else { exit::GRADCHECK })
}

// ---- ablate ----------------------------------------------------------------

pub fn ablate(a: AblateArgs) -> Result<i32> {
    let from = a.from_manifest.as_deref().map(|p| RunManifest::read(p, "ablate")).transpose()?;
    let (run, inputs) = match &from {
        Some(m) => {
            let inputs = load_pair(m.input_path("train")?, m.input_path("val")?)?;
            (m.config_as::<AblateRun>()?, inputs)
        }
        None => {
            let inputs = load_pair(required(&a.train, "train")?, required(&a.val, "val")?)?;
            let base = build_config(&a.hyper, inputs.train.d_audio(), inputs.train.d_text())?;
            let axes = if a.axes.is_empty() {
                Axis::ALL.to_vec()
            } else {
                a.axes.iter().map(|s| Axis::from_str(s)).collect::<Result<_, _>>()?
            };
            (AblateRun { axes, base }, inputs)
        }
    };
    let out = out_dir(&a.out, from.as_ref())?;
    RunManifest::new("ablate", run.base.seed, &out, &run)?
        .input("train", &inputs.train_path)?
        .input("val", &inputs.val_path)?
        .write()?;

    let table = ablation_grid(&run.base, &run.axes, &inputs.train, &inputs.val)?;
    write_text(&out.join("ablation.csv"), &table.to_csv())?;
    print!("{table}");
    Ok(exit::OK)
}
