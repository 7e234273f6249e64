use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::config::ExperimentConfig;

pub const MANIFEST_FILE: &str = "manifest.json";
/// Present only in the output directory of a run that stopped on an error.
pub const FAILURE_MARKER: &str = "FAILED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    /// Still running, or killed before it could record an outcome.
    Incomplete,
    Complete,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    pub name: String,
    pub seed: u64,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub config: ExperimentConfig,
    /// SHA-256 of every output file, keyed by path relative to the output
    /// directory.
    pub files: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

/// An output directory that records a hash for everything written to it.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    manifest: Manifest,
}

impl OutputDir {
    /// Creates `root` if needed and writes an incomplete manifest. A failure
    /// marker left by an earlier run is removed.
    pub fn create(root: &Path, command: &str, cfg: &ExperimentConfig) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let marker = root.join(FAILURE_MARKER);
        if marker.exists() {
            fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
        }
        let dir = Self {
            root: root.to_path_buf(),
            manifest: Manifest {
                command: command.into(),
                name: cfg.name.clone(),
                seed: cfg.seed,
                status: RunStatus::Incomplete,
                error: None,
                config: cfg.clone(),
                files: BTreeMap::new(),
            },
        };
        dir.write_manifest()?;
        Ok(dir)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Absolute path of `rel`, with parent directories created.
    pub fn path(&self, rel: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        Ok(p)
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(rel)?;
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        self.manifest.files.insert(rel.into(), sha256_hex(bytes));
        Ok(())
    }

    /// Hashes a file some other writer already produced under `rel`.
    pub fn record(&mut self, rel: &str) -> Result<()> {
        let p = self.root.join(rel);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        self.manifest.files.insert(rel.into(), sha256_hex(&bytes));
        Ok(())
    }

    fn write_manifest(&self) -> Result<()> {
        let p = self.root.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| Error::Input(format!("cannot serialize manifest: {e}")))?;
        text.push('\n');
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    pub fn finish(mut self) -> Result<Manifest> {
        self.manifest.status = RunStatus::Complete;
        self.write_manifest()?;
        Ok(self.manifest)
    }

    /// Marks the directory as the remains of a failed run.
    pub fn fail(mut self, err: &Error) -> Result<()> {
        self.manifest.status = RunStatus::Failed;
        self.manifest.error = Some(err.to_string());
        self.write_manifest()?;
        let p = self.root.join(FAILURE_MARKER);
        fs::write(&p, format!("{err}\n")).map_err(|e| Error::io(&p, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_tracks_files_and_status() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::default();
        let mut dir = OutputDir::create(tmp.path(), "run", &cfg).unwrap();
        let m = read_manifest(&tmp.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(m.status, RunStatus::Incomplete);
        dir.write("a/b.txt", b"abc").unwrap();
        let m = dir.finish().unwrap();
        assert_eq!(m.files["a/b.txt"], sha256_hex(b"abc"));
        assert_eq!(read_manifest(&tmp.path().join(MANIFEST_FILE)).unwrap(), m);

        let dir = OutputDir::create(tmp.path(), "run", &cfg).unwrap();
        dir.fail(&Error::Numeric("boom".into())).unwrap();
        let m = read_manifest(&tmp.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(m.status, RunStatus::Failed);
        assert!(m.error.unwrap().contains("boom"));
        assert!(tmp.path().join(FAILURE_MARKER).exists());
        OutputDir::create(tmp.path(), "run", &cfg).unwrap();
        assert!(!tmp.path().join(FAILURE_MARKER).exists());
    }
}
