use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};
use svr_core::io::write_json;
use svr_core::Result;

pub const MANIFEST: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the canonical JSON form of a resolved configuration.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    Ok(sha256_hex(serde_json::to_string(config)?.as_bytes()))
}

#[derive(Debug, Serialize)]
pub struct Input {
    pub path: String,
    /// Absent for procedural inputs.
    pub sha256: Option<String>,
}

impl Input {
    pub fn file(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.display().to_string(),
            sha256: Some(sha256_hex(&fs::read(path)?)),
        })
    }

    pub fn named(name: &str) -> Self {
        Self {
            path: name.to_string(),
            sha256: None,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct Manifest<C: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub format_version: u32,
    pub verb: &'static str,
    pub args: Vec<String>,
    pub inputs: Vec<Input>,
    pub config: C,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub deterministic: bool,
    /// Paths relative to the manifest.
    pub outputs: BTreeMap<String, Vec<String>>,
}

impl<C: Serialize> Manifest<C> {
    pub fn new(verb: &'static str, args: &[String], config: C, deterministic: bool) -> Result<Self> {
        Ok(Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            format_version: svr_core::io::FORMAT_VERSION,
            verb,
            args: args.to_vec(),
            inputs: Vec::new(),
            config_hash: config_hash(&config)?,
            config,
            seed: None,
            deterministic,
            outputs: BTreeMap::new(),
        })
    }

    pub fn output(&mut self, kind: &str, rel: impl Into<String>) {
        self.outputs.entry(kind.to_string()).or_default().push(rel.into());
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Outputs of an earlier run, read back from its manifest.
#[derive(Debug, serde::Deserialize)]
pub struct Outputs {
    pub outputs: BTreeMap<String, Vec<String>>,
}

impl Outputs {
    pub fn read(dir: &Path) -> Result<Self> {
        svr_core::io::read_json(&dir.join(MANIFEST))
    }

    pub fn one(&self, dir: &Path, kind: &str) -> Result<std::path::PathBuf> {
        self.all(dir, kind)?
            .into_iter()
            .next()
            .ok_or_else(|| svr_core::Error::Empty(format!("{} lists no `{kind}` output", dir.join(MANIFEST).display())))
    }

    pub fn all(&self, dir: &Path, kind: &str) -> Result<Vec<std::path::PathBuf>> {
        self.outputs
            .get(kind)
            .map(|v| v.iter().map(|p| dir.join(p)).collect())
            .ok_or_else(|| svr_core::Error::Empty(format!("{} lists no `{kind}` output", dir.join(MANIFEST).display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_of_empty_input() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = config_hash(&serde_json::json!({"x": 1})).unwrap();
        assert_eq!(a, config_hash(&serde_json::json!({"x": 1})).unwrap());
        assert_ne!(a, config_hash(&serde_json::json!({"x": 2})).unwrap());
    }
}
