//! Output directories and their `manifest.json`.
//!
//! The manifest records the resolved inputs of a run (configuration after
//! flag overrides, command options and input file digests), the SHA-256 of
//! their canonical JSON, the seed, tool versions and a digest of every file
//! written.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Compact JSON with object keys in sorted order.
pub fn canonical_json(value: &Value) -> String {
    // serde_json's map is ordered by key unless `preserve_order` is enabled
    serde_json::to_string(value).expect("a Value always serializes")
}

#[derive(Debug, Serialize)]
struct OutputFile {
    file: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    versions: Versions,
    command: &'a str,
    config_sha256: String,
    seed: Option<u64>,
    inputs: &'a Value,
    outputs: &'a [OutputFile],
}

#[derive(Debug, Serialize)]
struct Versions {
    #[serde(rename = "syncon-cli")]
    cli: &'static str,
    #[serde(rename = "syncon-core")]
    core: &'static str,
}

/// An output directory that remembers what was written to it.
pub struct OutputDir {
    dir: PathBuf,
    files: Vec<OutputFile>,
}

impl OutputDir {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| {
            CliError::Input(format!("cannot create output directory {}: {e}", dir.display()))
        })?;
        Ok(OutputDir {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes)
            .map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))?;
        self.files.push(OutputFile {
            file: name.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    /// Write `manifest.json` for a run of `command` with resolved `inputs`.
    pub fn finish(self, command: &str, inputs: &Value, seed: Option<u64>) -> Result<(), CliError> {
        let manifest = Manifest {
            tool: "syncon",
            versions: Versions {
                cli: env!("CARGO_PKG_VERSION"),
                core: syncon::VERSION,
            },
            command,
            config_sha256: sha256_hex(canonical_json(inputs).as_bytes()),
            seed,
            inputs,
            outputs: &self.files,
        };
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        let path = self.dir.join("manifest.json");
        std::fs::write(&path, text)
            .map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
    }
}

/// Digest of an input file, keyed by its path as given.
pub fn file_digest(path: &Path) -> Result<(String, String), CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    Ok((path.display().to_string(), sha256_hex(&bytes)))
}
