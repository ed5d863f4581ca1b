//! Run manifests and atomic file output.
//!
//! Every file the CLI writes is placed atomically (write to a temporary name
//! in the same directory, then rename) and accompanied by a
//! `<file>.manifest.json` capturing what produced it: the subcommand, a
//! snapshot of the resolved configuration, the seed, the tool version,
//! SHA-256 digests of the input files, and start/end timestamps.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{SecondsFormat, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Digest of one input file.
#[derive(Serialize, Clone)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    tool_version: &'a str,
    seed: Option<u64>,
    config: &'a serde_json::Value,
    inputs: &'a [InputDigest],
    started_at: &'a str,
    finished_at: String,
}

/// Collects run provenance and writes one manifest per output file.
pub struct RunContext {
    command: &'static str,
    seed: Option<u64>,
    config: serde_json::Value,
    inputs: Vec<InputDigest>,
    started_at: String,
}

impl RunContext {
    pub fn new(command: &'static str, seed: Option<u64>, config: serde_json::Value) -> Self {
        RunContext {
            command,
            seed,
            config,
            inputs: Vec::new(),
            started_at: Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
        }
    }

    /// Digests an input file into the manifest.
    pub fn record_input(&mut self, path: &Path) -> Result<()> {
        let bytes =
            fs::read(path).with_context(|| format!("cannot read input file {}", path.display()))?;
        let digest = Sha256::digest(&bytes);
        self.inputs.push(InputDigest {
            path: path.display().to_string(),
            sha256: hex::encode(digest),
        });
        Ok(())
    }

    /// Writes `<output>.manifest.json` next to an already-written output.
    pub fn write_manifest_for(&self, output: &Path) -> Result<()> {
        let manifest = RunManifest {
            command: self.command,
            tool_version: env!("CARGO_PKG_VERSION"),
            seed: self.seed,
            config: &self.config,
            inputs: &self.inputs,
            started_at: &self.started_at,
            finished_at: Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
        };
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        write_atomic(&manifest_path(output), text.as_bytes())
    }
}

/// The manifest path for an output file: `<file>.manifest.json`.
pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "output".to_string());
    name.push_str(".manifest.json");
    output.with_file_name(name)
}

/// Writes a file atomically: to a temporary sibling, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "output".to_string());
    let tmp_name = format!(".{file_name}.tmp{}", std::process::id());
    let tmp = match dir {
        Some(d) => d.join(&tmp_name),
        None => PathBuf::from(&tmp_name),
    };
    fs::write(&tmp, bytes).with_context(|| format!("cannot write {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("cannot move {} into place", path.display()))?;
    Ok(())
}
