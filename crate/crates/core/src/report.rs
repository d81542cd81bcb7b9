//! Report envelopes. Every JSON report carries the tool version, the seed
//! and the SHA-256 of the canonical config text, and nothing that varies
//! between identical runs.

use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;

pub const TOOL: &str = env!("CARGO_PKG_NAME");
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Metadata {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
}

impl Metadata {
    pub fn new(command: &str, canonical_config: &str, seed: u64) -> Self {
        Metadata {
            tool: TOOL.into(),
            version: VERSION.into(),
            command: command.into(),
            config_sha256: sha256_hex(canonical_config.as_bytes()),
            seed,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    meta: &'a Metadata,
    report: &'a T,
}

/// Writes `{"meta": …, "report": …}` as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, meta: &Metadata, report: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(&Envelope { meta, report })?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_matches_a_known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn envelope_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        let meta = Metadata::new("solve", "{}", 3);
        write_json(&path, &meta, &serde_json::json!({"pass": true})).unwrap();
        let v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(v["meta"]["seed"], 3);
        assert_eq!(v["meta"]["command"], "solve");
        assert_eq!(v["meta"]["config_sha256"].as_str().unwrap().len(), 64);
        assert_eq!(v["report"]["pass"], true);
    }
}
