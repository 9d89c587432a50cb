//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |---|---|
//! | 4 | magic `TRK1` |
//! | 4 | `u32` length of the config JSON |
//! | n | [`ModelConfig`] as compact JSON, fields in declaration order |
//! | 8 | `u64` byte length of the parameter payload |
//! | … | `f32` values of every parameter group in declaration order |

use std::fs;
use std::path::Path;

use super::{ModelConfig, TiedRetrievalModel};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub const MAGIC: &[u8; 4] = b"TRK1";

pub fn to_bytes<F: Scalar>(model: &TiedRetrievalModel<F>) -> Vec<u8> {
    let json = serde_json::to_vec(model.config()).expect("config serializes");
    let n = model.num_params();
    let mut out = Vec::with_capacity(4 + 4 + json.len() + 8 + 4 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&((4 * n) as u64).to_le_bytes());
    for g in model.params().groups() {
        for &v in g.value.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Checkpoint(format!("truncated while reading {what}")));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

/// Reads only the header.
pub fn read_config(mut bytes: &[u8]) -> Result<ModelConfig> {
    let b = &mut bytes;
    if take(b, 4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a TRK1 checkpoint".into()));
    }
    let len = u32::from_le_bytes(take(b, 4, "config length")?.try_into().expect("4 bytes")) as usize;
    let json = take(b, len, "config")?;
    serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("config: {e}")))
}

pub fn from_bytes<F: Scalar>(bytes: &[u8]) -> Result<TiedRetrievalModel<F>> {
    let config = read_config(bytes)?;
    let json_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let mut rest = &bytes[8 + json_len..];
    let b = &mut rest;
    let payload = u64::from_le_bytes(take(b, 8, "payload length")?.try_into().expect("8 bytes")) as usize;

    let mut model = TiedRetrievalModel::<F>::init(config, 0)
        .map_err(|e| Error::Checkpoint(format!("stored config is invalid: {e}")))?;
    let expected = 4 * model.num_params();
    if payload != expected || b.len() != expected {
        return Err(Error::Checkpoint(format!(
            "config implies {expected} parameter bytes, header says {payload}, file has {}",
            b.len()
        )));
    }
    let mut floats = b
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        for v in model.params_mut().value_mut(id).data_mut() {
            *v = F::of(floats.next().expect("length checked") as f64);
        }
    }
    Ok(model)
}

pub fn save<F: Scalar>(model: &TiedRetrievalModel<F>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load<F: Scalar>(path: impl AsRef<Path>) -> Result<TiedRetrievalModel<F>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
