use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const FILE_NAME: &str = "manifest.json";

/// Record of one command invocation, written next to its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// Hex SHA-256 of the checkpoint read or written.
    pub checkpoint_sha256: Option<String>,
    pub version: String,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.into(),
            config: None,
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            checkpoint_sha256: None,
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }

    /// Writes the manifest to `path` and checks it parses back unchanged.
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
        let back: RunManifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        ensure!(&back == self, "manifest {} did not round-trip", path.display());
        Ok(())
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_of_known_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc");
        std::fs::write(&p, b"abc").unwrap();
        assert_eq!(sha256_file(&p).unwrap(), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::new("train");
        m.seed = Some(3);
        m.outputs.push(dir.path().join("model.ckpt"));
        let p = dir.path().join(FILE_NAME);
        m.write(&p).unwrap();
        let back: RunManifest = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
