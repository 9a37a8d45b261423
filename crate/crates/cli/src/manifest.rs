use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::hex;
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the run directory.
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub fingerprint: String,
    pub seconds: f64,
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, Artifact>,
    pub phases: BTreeMap<String, PhaseRecord>,
}

pub fn file_sha256(path: &Path) -> CliResult<(String, u64)> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
    Ok((hex(&Sha256::digest(&bytes)), bytes.len() as u64))
}

impl RunManifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn load_or_new(dir: &Path, config_hash: &str, seed: u64) -> CliResult<Self> {
        let path = dir.join(Self::FILE);
        let mut m = if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(|e| CliError::io("reading manifest", e))?;
            serde_json::from_str(&text)?
        } else {
            RunManifest::default()
        };
        m.config_hash = config_hash.to_string();
        m.seed = seed;
        m.versions.insert("bdgxrl".into(), env!("CARGO_PKG_VERSION").into());
        m.versions.insert("manifest".into(), "1".into());
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(dir.join(Self::FILE), text + "\n").map_err(|e| CliError::io("writing manifest", e))
    }

    pub fn record_artifact(&mut self, dir: &Path, name: &str, rel: &Path) -> CliResult<()> {
        let (sha256, bytes) = file_sha256(&dir.join(rel))?;
        self.artifacts.insert(
            name.to_string(),
            Artifact {
                path: rel.to_path_buf(),
                sha256,
                bytes,
            },
        );
        Ok(())
    }

    /// A phase is complete when it ran under the same fingerprint (the hash
    /// of the config sections it depends on) and its
    /// artifacts are still on disk unchanged.
    pub fn is_complete(&self, dir: &Path, phase: &str, fingerprint: &str) -> bool {
        let Some(rec) = self.phases.get(phase) else {
            return false;
        };
        if rec.fingerprint != fingerprint {
            return false;
        }
        rec.artifacts.iter().all(|name| {
            self.artifacts.get(name).is_some_and(|a| {
                file_sha256(&dir.join(&a.path)).is_ok_and(|(h, _)| h == a.sha256)
            })
        })
    }

    /// Run `body` unless `phase` is complete, then record the artifacts it
    /// reports as `(name, relative path)` pairs. Returns whether it ran.
    pub fn run_phase<F>(&mut self, dir: &Path, phase: &str, fingerprint: &str, body: F) -> CliResult<bool>
    where
        F: FnOnce() -> CliResult<Vec<(String, PathBuf)>>,
    {
        if self.is_complete(dir, phase, fingerprint) {
            log::info!("phase {phase} already complete, skipping");
            return Ok(false);
        }
        let t = Instant::now();
        let produced = body()?;
        let mut names = Vec::with_capacity(produced.len());
        for (name, rel) in produced {
            self.record_artifact(dir, &name, &rel)?;
            names.push(name);
        }
        self.phases.insert(
            phase.to_string(),
            PhaseRecord {
                fingerprint: fingerprint.to_string(),
                seconds: t.elapsed().as_secs_f64(),
                artifacts: names,
            },
        );
        self.save(dir)?;
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn completed_phase_is_skipped_until_artifact_changes() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::load_or_new(dir.path(), "h1", 0).unwrap();
        let write = |text: &str| {
            std::fs::write(dir.path().join("a.txt"), text).unwrap();
            Ok(vec![("a".to_string(), PathBuf::from("a.txt"))])
        };
        assert!(m.run_phase(dir.path(), "p", "f1", || write("one")).unwrap());
        assert!(!m.run_phase(dir.path(), "p", "f1", || write("two")).unwrap());
        std::fs::write(dir.path().join("a.txt"), "edited").unwrap();
        assert!(m.run_phase(dir.path(), "p", "f1", || write("three")).unwrap());
        let back = RunManifest::load_or_new(dir.path(), "h2", 0).unwrap();
        assert!(back.is_complete(dir.path(), "p", "f1"));
        assert!(!back.is_complete(dir.path(), "p", "f2"));
    }
}
