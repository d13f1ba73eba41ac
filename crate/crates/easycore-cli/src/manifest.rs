//! Run manifests: what ran, with which resolved config, over which inputs,
//! producing which outputs.
//!
//! Manifests make the pipeline content-addressed. Every subcommand writes
//! one next to its artifacts; commands that read an artifact look for a
//! sibling manifest that lists it as an output and refuse stale bytes.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use easycore::error::{Error, Result};

use crate::config::{file_digest, Config};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub subcommand: String,
    pub seed: u64,
    pub config_digest: String,
    /// The resolved configuration this run actually used.
    pub resolved_config: String,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    /// Free-form result metrics (accuracies, complexities, kappa, ...).
    pub notes: Vec<(String, String)>,
    pub wall_time_secs: f64,
}

/// Accumulates a run's inputs/outputs, then writes the manifest.
pub struct ManifestBuilder {
    subcommand: String,
    seed: u64,
    config_digest: String,
    resolved_config: String,
    inputs: Vec<FileRecord>,
    outputs: Vec<PathBuf>,
    notes: Vec<(String, String)>,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(subcommand: &str, config: &Config) -> Self {
        ManifestBuilder {
            subcommand: subcommand.to_string(),
            seed: config.seed,
            config_digest: config.digest(),
            resolved_config: config.canonical(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            notes: Vec::new(),
            started: Instant::now(),
        }
    }

    /// Register an input artifact: hash it and refuse it when a sibling
    /// manifest proves it stale.
    pub fn input<P: AsRef<Path>>(&mut self, path: P) -> Result<()> {
        let path = path.as_ref();
        let sha256 = file_digest(path)?;
        if let Some(recorded) = recorded_output_hash(path)? {
            if recorded != sha256 {
                return Err(Error::config(format!(
                    "stale artifact {}: content hash {} does not match the manifest that produced it ({})",
                    path.display(),
                    &sha256[..12.min(sha256.len())],
                    &recorded[..12.min(recorded.len())],
                )));
            }
        }
        self.inputs.push(FileRecord {
            path: path.to_path_buf(),
            sha256,
        });
        Ok(())
    }

    pub fn output<P: AsRef<Path>>(&mut self, path: P) {
        self.outputs.push(path.as_ref().to_path_buf());
    }

    pub fn note<K: Into<String>, V: ToString>(&mut self, key: K, value: V) {
        self.notes.push((key.into(), value.to_string()));
    }

    /// Hash the outputs (they must exist by now), write the manifest into
    /// `dir`, and return it.
    pub fn write(self, dir: &Path) -> Result<RunManifest> {
        let run_id = format!("{}-{}", self.subcommand, &self.config_digest[..12]);
        let outputs = self
            .outputs
            .iter()
            .map(|p| {
                Ok(FileRecord {
                    path: p.clone(),
                    sha256: file_digest(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = RunManifest {
            run_id: run_id.clone(),
            subcommand: self.subcommand,
            seed: self.seed,
            config_digest: self.config_digest,
            resolved_config: self.resolved_config,
            inputs: self.inputs,
            outputs,
            notes: self.notes,
            wall_time_secs: self.started.elapsed().as_secs_f64(),
        };
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("{run_id}.manifest.json"));
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::config(format!("manifest serialization: {e}")))?;
        std::fs::write(path, json)?;
        Ok(manifest)
    }
}

/// Hash recorded for `path` by whichever sibling manifest lists it as an
/// output, if any.
fn recorded_output_hash(path: &Path) -> Result<Option<String>> {
    let dir = match path.parent() {
        Some(d) if d.as_os_str().is_empty() => Path::new("."),
        Some(d) => d,
        None => return Ok(None),
    };
    let target = path.file_name();
    let entries = match std::fs::read_dir(dir) {
        Ok(e) => e,
        Err(_) => return Ok(None),
    };
    for entry in entries.flatten() {
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if !name.ends_with(".manifest.json") {
            continue;
        }
        let Ok(text) = std::fs::read_to_string(entry.path()) else {
            continue;
        };
        let Ok(manifest) = serde_json::from_str::<RunManifest>(&text) else {
            continue;
        };
        for output in &manifest.outputs {
            if output.path.file_name() == target {
                return Ok(Some(output.sha256.clone()));
            }
        }
    }
    Ok(None)
}

/// Re-hash the resolved config and every recorded file; confirm the digests
/// still match. Returns the verified manifest.
pub fn verify_manifest<P: AsRef<Path>>(path: P) -> Result<RunManifest> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let manifest: RunManifest = serde_json::from_str(&text)
        .map_err(|e| Error::config(format!("manifest parse: {e}")))?;
    let config: Config = toml::from_str(&manifest.resolved_config)
        .map_err(|e| Error::config(format!("embedded config parse: {e}")))?;
    let mut issues = Vec::new();
    if config.digest() != manifest.config_digest {
        issues.push(format!(
            "config digest mismatch: recomputed {}, recorded {}",
            config.digest(),
            manifest.config_digest
        ));
    }
    let base = path.as_ref().parent().unwrap_or(Path::new("."));
    for record in manifest.inputs.iter().chain(&manifest.outputs) {
        let candidate = if record.path.is_absolute() {
            record.path.clone()
        } else if record.path.exists() {
            record.path.clone()
        } else {
            base.join(record.path.file_name().unwrap_or_default())
        };
        match file_digest(&candidate) {
            Ok(actual) if actual == record.sha256 => {}
            Ok(actual) => issues.push(format!(
                "{}: hash {} does not match recorded {}",
                record.path.display(),
                &actual[..12],
                &record.sha256[..12]
            )),
            Err(e) => issues.push(format!("{}: {e}", record.path.display())),
        }
    }
    if issues.is_empty() {
        Ok(manifest)
    } else {
        Err(Error::InvalidConfig { issues })
    }
}
