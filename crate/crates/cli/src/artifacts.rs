//! Stage outputs. Files are written to a staging directory inside the output
//! directory and moved into place, together with a manifest, only when the
//! stage succeeds; a failed stage leaves nothing behind.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tempfile::TempDir;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    /// Path relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Everything needed to reproduce a run. Holds no timestamps or absolute
/// paths, so identical runs write identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
    pub artifacts: Vec<ArtifactEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([("rsgcir".to_string(), env!("CARGO_PKG_VERSION").to_string())])
}

pub fn manifest_name(command: &str) -> String {
    format!("manifest-{command}.json")
}

pub struct StageOutput {
    out: PathBuf,
    staging: TempDir,
    files: Vec<String>,
}

impl StageOutput {
    pub fn begin(out: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(out).map_err(|e| CliError::Output(format!("cannot create {}: {e}", out.display())))?;
        let staging = tempfile::Builder::new().prefix(".staging-").tempdir_in(out)?;
        Ok(Self { out: out.to_path_buf(), staging, files: Vec::new() })
    }

    /// Staging path for an artifact named relative to the output directory.
    pub fn path(&mut self, name: &str) -> Result<PathBuf, CliError> {
        let p = self.staging.path().join(name);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        Ok(p)
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        let p = self.path(name)?;
        std::fs::write(p, text)?;
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_text(name, &text)
    }

    /// Moves the staged artifacts into the output directory and writes the
    /// manifest for `command`.
    pub fn commit(self, command: &str, config_text: &str, seed: u64) -> Result<Manifest, CliError> {
        let mut artifacts = Vec::with_capacity(self.files.len());
        for name in &self.files {
            let from = self.staging.path().join(name);
            let bytes = std::fs::read(&from)?;
            artifacts.push(ArtifactEntry { path: name.clone(), sha256: sha256_hex(&bytes), bytes: bytes.len() as u64 });
            let to = self.out.join(name);
            if let Some(parent) = to.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::rename(&from, &to)?;
        }
        let manifest = Manifest {
            command: command.to_string(),
            config_sha256: sha256_hex(config_text.as_bytes()),
            seed,
            versions: versions(),
            artifacts,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(self.out.join(manifest_name(command)), text)?;
        Ok(manifest)
    }
}
