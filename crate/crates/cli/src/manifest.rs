//! Run manifests: resolved settings plus SHA-256 digests of inputs and
//! outputs, enough to replay a run and check it reproduced.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use fame_core::FameError;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{RegionSource, ResolvedRun};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub command: String,
    pub run: ResolvedRun,
    pub inputs: BTreeMap<String, String>,
    /// Output name (file, or directory with a trailing `/`) to digest.
    pub outputs: BTreeMap<String, String>,
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn digest_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(digest_bytes(&bytes))
}

/// Digest over every file below `dir`, in sorted relative-path order.
pub fn digest_dir(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        let bytes = fs::read(dir.join(&rel))?;
        h.update(rel.as_bytes());
        h.update([0u8]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            collect(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("below root");
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

impl RunManifest {
    pub fn new(command: &str, run: &ResolvedRun) -> Result<Self> {
        let mut inputs = BTreeMap::new();
        inputs.insert("video".to_string(), digest_file(&run.video)?);
        if let RegionSource::File(p) = &run.regions {
            inputs.insert("regions".to_string(), digest_file(p)?);
        }
        Ok(Self {
            artifact_version: fame_core::ARTIFACT_VERSION.to_string(),
            command: command.to_string(),
            run: run.clone(),
            inputs,
            outputs: BTreeMap::new(),
        })
    }

    /// Records digests for the named outputs below `out`.
    pub fn record_outputs(&mut self, out: &Path, names: &[&str]) -> Result<()> {
        for name in names {
            let path = out.join(name.trim_end_matches('/'));
            let d = if name.ends_with('/') {
                digest_dir(&path)?
            } else {
                digest_file(&path)?
            };
            self.outputs.insert(name.to_string(), d);
        }
        Ok(())
    }

    /// Fails when a replayed input no longer matches its recorded digest.
    pub fn verify_inputs(&self) -> Result<()> {
        let mut paths = vec![("video", self.run.video.as_path())];
        if let RegionSource::File(p) = &self.run.regions {
            paths.push(("regions", p.as_path()));
        }
        for (name, path) in paths {
            let Some(expected) = self.inputs.get(name) else {
                continue;
            };
            if digest_file(path)? != *expected {
                return Err(FameError::Config(format!(
                    "replayed input {name} at {} changed since the manifest was written",
                    path.display()
                ))
                .into());
            }
        }
        Ok(())
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(out.join("manifest.json"), text + "\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digests_are_stable() {
        assert_eq!(
            digest_bytes(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("a.bin"), b"1").unwrap();
        fs::write(dir.path().join("sub/b.bin"), b"2").unwrap();
        let first = digest_dir(dir.path()).unwrap();
        assert_eq!(first, digest_dir(dir.path()).unwrap());
        fs::write(dir.path().join("sub/b.bin"), b"3").unwrap();
        assert_ne!(first, digest_dir(dir.path()).unwrap());
    }
}
