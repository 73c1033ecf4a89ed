//! Output directories, run manifests and CSV/JSON writers.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use sgvqa_core::model::{CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
use sgvqa_core::synth::QType;
use sgvqa_core::train::{EpochRecord, MetricsReport, StepRecord};

use crate::config::{hash_value, leaves, ExperimentConfig};
use crate::error::{CliError, Result};

/// Manifest file written last into every command directory.
pub const RUN_MANIFEST: &str = "run.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Hash of the full recorded config.
    pub config_hash: String,
    /// Hash of the config fields and input files this command reads; equal
    /// keys mean the outputs are up to date.
    pub stage_key: String,
    pub seed: u64,
    pub corpus_seed: u64,
    pub versions: Value,
    pub config: Value,
    pub inputs: Vec<FileHash>,
    pub artifacts: Vec<FileHash>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// `path` relative to `root` when it lies below it.
pub fn display_rel(path: &Path, root: &Path) -> String {
    path.strip_prefix(root).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::config(path.display().to_string(), format!("malformed JSON: {e}")))
}

/// One command's output directory.
pub struct Stage {
    pub dir: PathBuf,
    command: &'static str,
    key: String,
    inputs: Vec<FileHash>,
    files: Vec<PathBuf>,
}

pub enum Prepared {
    Run(Stage),
    /// Outputs from an identical config and inputs already exist.
    UpToDate(PathBuf),
}

impl Stage {
    /// Checks `dir` for earlier outputs. `fields` are the dotted config
    /// paths the command depends on; `inputs` are files it reads.
    pub fn prepare(
        dir: PathBuf,
        command: &'static str,
        cfg: &ExperimentConfig,
        fields: &[&str],
        inputs: &[PathBuf],
        force: bool,
    ) -> Result<Prepared> {
        let flat = leaves(&cfg.recorded());
        let mut picked = Map::new();
        for (k, v) in &flat {
            if fields.iter().any(|f| k == f || k.starts_with(&format!("{f}."))) {
                picked.insert(k.clone(), v.clone());
            }
        }
        let inputs: Vec<FileHash> = inputs
            .iter()
            .map(|p| Ok(FileHash { path: display_rel(p, &cfg.out), sha256: sha256_file(p)? }))
            .collect::<Result<_>>()?;
        let key = hash_value(&json!({ "command": command, "fields": picked, "inputs": inputs }));

        if dir.exists() {
            let manifest_path = dir.join(RUN_MANIFEST);
            let existing: Option<RunManifest> = if manifest_path.exists() { read_json(&manifest_path).ok() } else { None };
            let empty = fs::read_dir(&dir).map_err(|e| CliError::io(&dir, e))?.next().is_none();
            match existing {
                Some(m) if m.stage_key == key && !force => return Ok(Prepared::UpToDate(dir)),
                _ if empty => {}
                _ if force => fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?,
                Some(m) => return Err(CliError::Stale { path: dir.display().to_string(), found: m.config_hash }),
                None => {
                    return Err(CliError::Stale { path: dir.display().to_string(), found: "no run manifest".into() });
                }
            }
        }
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        Ok(Prepared::Run(Stage { dir, command, key, inputs, files: Vec::new() }))
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    /// Registers a written file for the manifest.
    pub fn record(&mut self, path: PathBuf) {
        self.files.push(path);
    }

    pub fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<PathBuf> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        write_json(&p, value)?;
        self.record(p.clone());
        Ok(p)
    }

    pub fn csv(&mut self, rel: &str, header: &[String], rows: &[Vec<String>]) -> Result<PathBuf> {
        let p = self.path(rel);
        let io = |e: csv::Error| CliError::io(&p, e.into());
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&p).map_err(io)?;
        w.write_record(header).map_err(io)?;
        for r in rows {
            w.write_record(r).map_err(io)?;
        }
        w.flush().map_err(|e| CliError::io(&p, e))?;
        self.record(p.clone());
        Ok(p)
    }

    /// Writes the run manifest; the stage counts as complete afterwards.
    pub fn finish(self, cfg: &ExperimentConfig) -> Result<RunManifest> {
        let artifacts = self
            .files
            .iter()
            .map(|p| Ok(FileHash { path: display_rel(p, &self.dir), sha256: sha256_file(p)? }))
            .collect::<Result<Vec<_>>>()?;
        let manifest = RunManifest {
            command: self.command.into(),
            config_hash: cfg.hash(),
            stage_key: self.key,
            seed: cfg.train.seed,
            corpus_seed: cfg.corpus.seed,
            versions: versions(),
            config: cfg.recorded(),
            inputs: self.inputs,
            artifacts,
        };
        write_json(&self.dir.join(RUN_MANIFEST), &manifest)?;
        Ok(manifest)
    }
}

pub fn versions() -> Value {
    json!({
        "sgvqa": env!("CARGO_PKG_VERSION"),
        "checkpoint": format!("{CHECKPOINT_FORMAT}/{CHECKPOINT_VERSION}"),
    })
}

pub fn metrics_header() -> Vec<String> {
    let mut h: Vec<String> =
        ["epoch", "split", "overall", "binary", "open", "consistency", "validity"].map(String::from).to_vec();
    h.extend(QType::ALL.iter().map(|q| q.name().to_string()));
    h.extend(["L_sup", "L_prime", "J_e", "repr_std"].map(String::from));
    h
}

fn num(x: f64) -> String {
    x.to_string()
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

/// One metrics row; training losses stay empty on rows not produced by an
/// epoch.
pub fn metrics_row(epoch: usize, split: &str, m: &MetricsReport, losses: Option<&EpochRecord>) -> Vec<String> {
    let mut r = vec![epoch.to_string(), split.to_string()];
    r.extend([m.overall, m.binary, m.open, m.consistency, m.validity].map(num));
    r.extend(QType::ALL.iter().map(|&q| num(m.qtype(q).accuracy)));
    r.extend([losses.map(|e| e.sup), losses.map(|e| e.prime), losses.map(|e| e.link), losses.map(|e| e.repr_std)].map(opt));
    r
}

pub fn epoch_row(e: &EpochRecord) -> Vec<String> {
    metrics_row(e.epoch, "val", &e.val, Some(e))
}

pub fn steps_header() -> Vec<String> {
    ["step", "epoch", "L_sup", "L_prime", "J_e", "total"].map(String::from).to_vec()
}

pub fn step_row(s: &StepRecord) -> Vec<String> {
    vec![s.step.to_string(), s.epoch.to_string(), num(s.sup), num(s.prime), num(s.link), num(s.total)]
}
