//! Experiment config: a JSON file merged over the desk defaults, then
//! dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use sgvqa_core::model::{ModelConfig, Preset};
use sgvqa_core::synth::{CorpusConfig, Split};
use sgvqa_core::train::{TrainConfig, GRAPH_NOISE_SIGMA, QUESTION_NOISE_FRACTION};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub train: TrainConfig,
    /// Root of all command outputs.
    pub out: PathBuf,
    pub options: Options,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            corpus: CorpusConfig::default(),
            train: TrainConfig::desk(),
            out: "runs".into(),
            options: Options::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Options {
    /// Corpus location; `<out>/corpus` when unset.
    pub corpus_dir: Option<PathBuf>,
    /// Checkpoint read by eval, ablate and probe; `<out>/train/final.json` when unset.
    pub checkpoint: Option<PathBuf>,
    /// Split scored by eval, ablate and probe.
    pub split: Split,
    pub graph_noise_sigma: f64,
    pub question_noise_fraction: f64,
    /// Labeled fractions trained by sweep, ascending.
    pub fractions: Vec<f64>,
    pub gradcheck: GradcheckOptions,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            corpus_dir: None,
            checkpoint: None,
            split: Split::Test,
            graph_noise_sigma: GRAPH_NOISE_SIGMA,
            question_noise_fraction: QUESTION_NOISE_FRACTION,
            fractions: vec![0.2, 0.5, 1.0],
            gradcheck: GradcheckOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckOptions {
    /// Model dims to check; the training preset when unset.
    pub preset: Option<Preset>,
    pub scenes: usize,
    pub items: usize,
    pub max_objects: usize,
    pub eps: f64,
    pub tolerance: f64,
    /// Parameters are redrawn uniformly in ±spread before checking.
    pub spread: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions { preset: None, scenes: 20, items: 2, max_objects: 5, eps: 1e-5, tolerance: 1e-4, spread: 0.5 }
    }
}

impl ExperimentConfig {
    pub fn corpus_dir(&self) -> PathBuf {
        self.options.corpus_dir.clone().unwrap_or_else(|| self.out.join("corpus"))
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.options.checkpoint.clone().unwrap_or_else(|| self.out.join("train").join("final.json"))
    }

    pub fn gradcheck_preset(&self) -> Preset {
        self.options.gradcheck.preset.unwrap_or(self.train.preset)
    }

    /// The config as recorded in manifests: the output root is left out so
    /// a run can be moved or repeated elsewhere.
    pub fn recorded(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("object").remove("out");
        v
    }

    pub fn hash(&self) -> String {
        hash_value(&self.recorded())
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.train.validate()?;
        let mc = model_dims(self.train.preset);
        if mc.node_dim != self.corpus.node_dim {
            return Err(CliError::config(
                "corpus.node_dim",
                format!(
                    "the {} preset expects node features of dim {}, got {}",
                    self.train.preset.name(),
                    mc.node_dim,
                    self.corpus.node_dim
                ),
            ));
        }
        let o = &self.options;
        if !(o.graph_noise_sigma >= 0.0 && o.graph_noise_sigma.is_finite()) {
            return Err(CliError::config("options.graph_noise_sigma", "must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&o.question_noise_fraction) {
            return Err(CliError::config("options.question_noise_fraction", "must lie in [0, 1]"));
        }
        if o.fractions.is_empty() || o.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(CliError::config("options.fractions", "needs at least one value in (0, 1]"));
        }
        if o.fractions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CliError::config("options.fractions", "must be strictly ascending"));
        }
        let g = &o.gradcheck;
        if g.items == 0 {
            return Err(CliError::config("options.gradcheck.items", "must be positive"));
        }
        if !(g.eps > 0.0 && g.eps < 1e-2) {
            return Err(CliError::config("options.gradcheck.eps", "must lie in (0, 1e-2)"));
        }
        if !(g.tolerance > 0.0) {
            return Err(CliError::config("options.gradcheck.tolerance", "must be positive"));
        }
        if !(g.spread > 0.0 && g.spread.is_finite()) {
            return Err(CliError::config("options.gradcheck.spread", "must be positive"));
        }
        Ok(())
    }
}

pub fn hash_value(v: &Value) -> String {
    // serde_json maps are ordered by key, so this is canonical
    hex::encode(Sha256::digest(serde_json::to_vec(v).expect("value serializes")))
}

/// Reads `path` (when given) over the defaults, applies `overrides` of the
/// form `a.b.c=value` and validates the result. Values parse as JSON and
/// fall back to plain strings.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut root = serde_json::to_value(ExperimentConfig::default()).expect("defaults serialize");
    if let Some(path) = path {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        if !text.trim().is_empty() {
            let file: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::config(path.display().to_string(), format!("not valid JSON: {e}")))?;
            merge(&mut root, file, "")?;
        }
    }
    for o in overrides {
        let (key, raw) = o.split_once('=').ok_or_else(|| CliError::Usage(format!("override `{o}` is not key=value")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(&mut root, key.trim(), value)?;
    }
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(root).map_err(|e| {
        let path = e.path().to_string();
        CliError::config(path, e.into_inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

/// Deep-merges objects; everything else is replaced and type errors
/// surface when the merged value is deserialized. Keys must already exist
/// in `base`.
fn merge(base: &mut Value, patch: Value, prefix: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let here = join(prefix, &k);
                let slot = b.get_mut(&k).ok_or_else(|| CliError::config(&here, "unknown key"))?;
                merge(slot, v, &here)?;
            }
            Ok(())
        }
        (b, p) => {
            *b = p;
            Ok(())
        }
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    if key.is_empty() {
        return Err(CliError::Usage("empty override key".into()));
    }
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let here = parts[..=i].join(".");
        node = match node {
            Value::Object(map) => map.get_mut(*part).ok_or_else(|| CliError::config(&here, "unknown key"))?,
            Value::Array(items) => {
                let idx: usize = part.parse().map_err(|_| CliError::config(&here, "expected a list index"))?;
                let len = items.len();
                items.get_mut(idx).ok_or_else(|| CliError::config(&here, format!("index out of range (length {len})")))?
            }
            _ => return Err(CliError::config(&here, "parent is not a table")),
        };
    }
    *node = value;
    Ok(())
}

/// Flattens a JSON value to `dotted.path -> leaf` pairs.
pub fn leaves(v: &Value) -> Map<String, Value> {
    fn walk(v: &Value, prefix: &str, out: &mut Map<String, Value>) {
        match v {
            Value::Object(m) if !m.is_empty() => {
                for (k, x) in m {
                    walk(x, &join(prefix, k), out);
                }
            }
            _ => {
                out.insert(prefix.to_string(), v.clone());
            }
        }
    }
    let mut out = Map::new();
    walk(v, "", &mut out);
    out
}

pub fn model_dims(preset: Preset) -> ModelConfig {
    ModelConfig::for_preset(preset, 0, 0)
}
