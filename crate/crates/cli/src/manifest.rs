use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::exit::{usage, Fail};

pub const FILE_NAME: &str = "manifest.json";

/// Everything needed to re-run a command: resolved config, inputs, outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, PathBuf>,
    pub out_dir: PathBuf,
    pub config: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, out_dir: &Path, config: impl Serialize) -> Result<Self> {
        Ok(Self {
            tool: "tiedrank".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            inputs: BTreeMap::new(),
            out_dir: out_dir.to_path_buf(),
            config: serde_json::to_value(config)?,
        })
    }

    pub fn input(mut self, name: &str, path: &Path) -> Result<Self> {
        let abs = fs::canonicalize(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        self.inputs.insert(name.into(), abs);
        Ok(self)
    }

    pub fn input_path(&self, name: &str) -> Result<&Path> {
        self.inputs
            .get(name)
            .map(PathBuf::as_path)
            .ok_or_else(|| usage(format!("manifest has no `{name}` input")).into())
    }

    pub fn config_as<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.config.clone())
            .map_err(|e| usage(format!("manifest config does not match `{}`: {e}", self.command)).into())
    }

    /// Creates the output directory and writes the manifest into it.
    pub fn write(&self) -> Result<()> {
        fs::create_dir_all(&self.out_dir).with_context(|| format!("creating {}", self.out_dir.display()))?;
        let path = self.out_dir.join(FILE_NAME);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(path: &Path, command: &str) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        if m.command != command {
            return Err(Fail::usage(format!("manifest is for `{}`, not `{command}`", m.command)).into());
        }
        Ok(m)
    }
}

/// Absolute form of an output directory that may not exist yet.
pub fn absolute_dir(dir: &Path) -> Result<PathBuf> {
    Ok(std::path::absolute(dir)?)
}
