//! Output directory bookkeeping: every artifact is checksummed into
//! `manifest.json`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Path relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub artifacts: Vec<Artifact>,
    pub summary: serde_json::Value,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub struct Outputs {
    dir: PathBuf,
    inputs: Vec<PathBuf>,
    artifacts: Vec<PathBuf>,
}

impl Outputs {
    /// Creates `dir`; `inputs` are files no artifact may overwrite.
    pub fn create(dir: &Path, inputs: Vec<PathBuf>) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Runtime(format!("cannot create output directory {}: {e}", dir.display())))?;
        let inputs = inputs.iter().filter_map(|p| p.canonicalize().ok()).collect();
        Ok(Outputs {
            dir: dir.to_path_buf(),
            inputs,
            artifacts: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Path for the artifact `name`, registered for the manifest.
    pub fn artifact(&mut self, name: &str) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        if path.canonicalize().is_ok_and(|c| self.inputs.contains(&c)) {
            return Err(CliError::Validation(format!(
                "output {} would overwrite an input file",
                path.display()
            )));
        }
        self.artifacts.push(path.clone());
        Ok(path)
    }

    /// Registers every file under the subdirectory `name`.
    pub fn register_dir(&mut self, name: &str) -> Result<(), CliError> {
        let dir = self.dir.join(name);
        if !dir.is_dir() {
            return Ok(());
        }
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        files.sort();
        self.artifacts.extend(files.into_iter().filter(|p| p.is_file()));
        Ok(())
    }

    /// Checksums every artifact and writes the manifest.
    pub fn finish(
        self,
        command: &str,
        config_text: &str,
        seed: u64,
        summary: serde_json::Value,
    ) -> Result<Manifest, CliError> {
        let mut artifacts = Vec::with_capacity(self.artifacts.len());
        for path in &self.artifacts {
            let bytes = std::fs::read(path)
                .map_err(|e| CliError::Runtime(format!("artifact {} was not written: {e}", path.display())))?;
            let rel = path.strip_prefix(&self.dir).unwrap_or(path);
            artifacts.push(Artifact {
                path: rel.to_string_lossy().replace('\\', "/"),
                sha256: sha256_hex(&bytes),
                bytes: bytes.len() as u64,
            });
        }
        artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        artifacts.dedup_by(|a, b| a.path == b.path);
        let manifest = Manifest {
            command: command.to_string(),
            config_sha256: sha256_hex(config_text.as_bytes()),
            seed,
            artifacts,
            summary,
        };
        std::fs::write(self.dir.join(MANIFEST_NAME), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(manifest)
    }
}
