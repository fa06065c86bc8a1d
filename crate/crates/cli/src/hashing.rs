//! Content hashing and run manifests: every run records its config hash and
//! the hash of every output it produced.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use vidflow_core::error::Result;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    sha256_hex(serde_json::to_string(cfg).unwrap_or_default().as_bytes())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct OutputRecord {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub phase: String,
    pub config_hash: String,
    pub seed: u64,
    pub outputs: Vec<OutputRecord>,
}

impl RunManifest {
    pub fn new(subcommand: &str, phase: &str, config_hash: &str, seed: u64) -> Self {
        RunManifest {
            subcommand: subcommand.into(),
            phase: phase.into(),
            config_hash: config_hash.into(),
            seed,
            outputs: Vec::new(),
        }
    }

    pub fn record(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(OutputRecord {
            path: path.to_path_buf(),
            sha256: hash_file(path)?,
        });
        Ok(())
    }

    pub fn record_dir_recursive(&mut self, dir: &Path) -> Result<()> {
        let mut stack = vec![dir.to_path_buf()];
        let mut files = Vec::new();
        while let Some(d) = stack.pop() {
            for entry in std::fs::read_dir(&d)? {
                let p = entry?.path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    files.push(p);
                }
            }
        }
        files.sort();
        for f in files {
            self.record(&f)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hashing_is_stable() {
        assert_eq!(
            sha256_hex(b"vidflow"),
            sha256_hex(b"vidflow"),
        );
        assert_ne!(sha256_hex(b"a"), sha256_hex(b"b"));
    }
}
