//! Run manifests: everything needed to replay a command and check its outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use pumpmap_core::config::sha256_hex;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const MANIFEST_SCHEMA: &str = "pumpmap-manifest/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigRecord {
    pub sha256: String,
    /// Verbatim config text, so the run can be replayed without the original file.
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub tool_version: String,
    pub command_line: Vec<String>,
    /// Stored as a decimal string: TOML integers stop at i64.
    #[serde(default, skip_serializing_if = "Option::is_none", with = "seed_str")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    pub started_unix_s: u64,
    pub finished_unix_s: u64,
    #[serde(default)]
    pub configs: BTreeMap<String, ConfigRecord>,
    /// Input data files (grids, field maps) by path → sha256.
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
    #[serde(default)]
    pub outputs: BTreeMap<String, String>,
    #[serde(default)]
    pub results: BTreeMap<String, f64>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn start() -> Self {
        Self {
            schema: MANIFEST_SCHEMA.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command_line: std::env::args().collect(),
            seed: None,
            workers: None,
            started_unix_s: now_unix(),
            finished_unix_s: 0,
            configs: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            results: BTreeMap::new(),
            warnings: Vec::new(),
        }
    }

    pub fn add_config(&mut self, path: &Path, text: String) -> String {
        let sha256 = sha256_hex(text.as_bytes());
        self.configs.insert(
            path.display().to_string(),
            ConfigRecord {
                sha256: sha256.clone(),
                text,
            },
        );
        sha256
    }

    pub fn add_input(&mut self, path: &Path, bytes: &[u8]) -> String {
        let h = sha256_hex(bytes);
        self.inputs.insert(path.display().to_string(), h.clone());
        h
    }

    /// Writes `bytes` to `path` and records its digest.
    pub fn write_output(&mut self, path: &Path, bytes: &[u8]) -> Result<(), CliError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))?;
        self.outputs.insert(path.display().to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn finish(mut self, path: &Path) -> Result<(), CliError> {
        self.finished_unix_s = now_unix();
        let text = toml::to_string(&self).map_err(|e| CliError::Io(format!("manifest: {e}")))?;
        std::fs::write(path, text).map_err(|e| CliError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }
}

/// `out.vgd` → `out.vgd.manifest.toml`.
pub fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.toml");
    PathBuf::from(s)
}

mod seed_str {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<u64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => s.serialize_str(&x.to_string()),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<u64>, D::Error> {
        Option::<String>::deserialize(d)?
            .map(|t| t.parse().map_err(D::Error::custom))
            .transpose()
    }
}
