//! Line-delimited JSON dataset files.
//!
//! ```text
//! {"format":"tiedrank-emb","version":1}
//! {"id":"a0","modality":"audio","dim":3,"frames":[[0.1,0.2,0.3]],"pair":null}
//! {"id":"a0#0","modality":"text","dim":2,"frames":[[1.0,0.0],[0.5,0.5]],"pair":"a0"}
//! ```
//!
//! Only valid (unmasked) frames are written; loaded sequences are fully valid.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EmbeddingSequence, Modality, PairedDataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_NAME: &str = "tiedrank-emb";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    modality: Modality,
    dim: usize,
    frames: Vec<Vec<f32>>,
    #[serde(default)]
    pair: Option<String>,
}

#[derive(Serialize)]
struct RecordOut<'a> {
    id: &'a str,
    modality: Modality,
    dim: usize,
    frames: Vec<&'a [f32]>,
    pair: Option<&'a str>,
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<PairedDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let lines = BufReader::new(file).lines().enumerate();

    let mut header_seen = false;
    let mut audio = Vec::new();
    let mut text: Vec<(EmbeddingSequence, String, usize)> = Vec::new();

    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        if !header_seen {
            let h: Header = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: line_no,
                msg: format!("expected format header: {e}"),
            })?;
            if h.format != FORMAT_NAME || h.version != FORMAT_VERSION {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("unsupported format {} v{}", h.format, h.version),
                });
            }
            header_seen = true;
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        if rec.dim == 0 || rec.frames.is_empty() {
            return Err(Error::Schema(format!(
                "line {line_no}: `{}` needs a positive dim and at least one frame",
                rec.id
            )));
        }
        if let Some(bad) = rec.frames.iter().find(|f| f.len() != rec.dim) {
            return Err(Error::Schema(format!(
                "line {line_no}: `{}` declares dim {} but has a frame of width {}",
                rec.id,
                rec.dim,
                bad.len()
            )));
        }
        let frames = Tensor::from_rows(&rec.frames)?;
        let seq = EmbeddingSequence::new(rec.id, rec.modality, frames)?;
        match (rec.modality, rec.pair) {
            (Modality::Audio, None) => audio.push(seq),
            (Modality::Audio, Some(_)) => {
                return Err(Error::Schema(format!(
                    "line {line_no}: audio record `{}` must not carry a pair",
                    seq.id
                )))
            }
            (Modality::Text, Some(p)) => text.push((seq, p, line_no)),
            (Modality::Text, None) => {
                return Err(Error::Schema(format!(
                    "line {line_no}: text record `{}` has no pair",
                    seq.id
                )))
            }
        }
    }
    if !header_seen {
        return Err(Error::Parse {
            line: 1,
            msg: "missing format header".into(),
        });
    }

    let index: HashMap<&str, usize> = audio.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    let mut pairing = Vec::with_capacity(text.len());
    for (seq, pair, line_no) in &text {
        let &a = index.get(pair.as_str()).ok_or_else(|| {
            Error::Integrity(format!(
                "line {line_no}: caption `{}` references missing audio `{pair}`",
                seq.id
            ))
        })?;
        pairing.push(a);
    }
    let captions = text.into_iter().map(|(s, _, _)| s).collect();
    PairedDataset::new(audio, captions, pairing)
}

fn valid_frames(seq: &EmbeddingSequence) -> Vec<&[f32]> {
    (0..seq.len())
        .filter(|&i| seq.mask[i])
        .map(|i| seq.frames.row(i))
        .collect()
}

pub fn write_dataset(dataset: &PairedDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);

    let header = Header {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
    };
    writeln!(w, "{}", json_line(&header)).map_err(io_err)?;
    for s in dataset.audio() {
        let rec = RecordOut {
            id: &s.id,
            modality: Modality::Audio,
            dim: s.dim(),
            frames: valid_frames(s),
            pair: None,
        };
        writeln!(w, "{}", json_line(&rec)).map_err(io_err)?;
    }
    for (s, &a) in dataset.captions().iter().zip(dataset.pairing()) {
        let rec = RecordOut {
            id: &s.id,
            modality: Modality::Text,
            dim: s.dim(),
            frames: valid_frames(s),
            pair: Some(&dataset.audio()[a].id),
        };
        writeln!(w, "{}", json_line(&rec)).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

fn json_line<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("records serialize")
}
