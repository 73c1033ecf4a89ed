//! Corpus construction and on-disk layout.
//!
//! A corpus directory holds `scenes.jsonl`, one `<split>.jsonl` per split,
//! `vocab.json` and `manifest.json`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::qa::{generate_qa, oracle_answer, QAItem, QType};
use super::realize::{RealizeNoise, Realizer};
use super::scene::{sample_scene, SceneSpec};
use super::vocab::Vocab;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_scenes: usize,
    /// QA items per scene, paraphrases included; must be even.
    pub questions_per_scene: usize,
    pub max_objects: usize,
    pub min_distance: f64,
    pub node_dim: usize,
    pub answer_classes: usize,
    pub noise: RealizeNoise,
    pub seed: u64,
    /// Train/val/test fractions by scene.
    pub splits: [f64; 3],
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_scenes: 2000,
            questions_per_scene: 4,
            max_objects: 8,
            min_distance: 0.08,
            node_dim: 32,
            answer_classes: 32,
            noise: RealizeNoise::default(),
            seed: 0,
            splits: [0.8, 0.1, 0.1],
        }
    }
}

impl CorpusConfig {
    pub fn paper() -> Self {
        CorpusConfig { node_dim: 300, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, reason: &str| Err(Error::Config { path: format!("corpus.{path}"), reason: reason.into() });
        if self.n_scenes == 0 {
            return bad("n_scenes", "must be positive");
        }
        if self.questions_per_scene == 0 || !self.questions_per_scene.is_multiple_of(2) {
            return bad("questions_per_scene", "must be a positive even number (each question has a paraphrase)");
        }
        if self.max_objects < 2 {
            return bad("max_objects", "must be at least 2");
        }
        if !(self.min_distance >= 0.0 && self.min_distance < 1.0) {
            return bad("min_distance", "must lie in [0, 1)");
        }
        if self.node_dim == 0 {
            return bad("node_dim", "must be positive");
        }
        if self.splits.iter().any(|f| !(0.0..=1.0).contains(f)) || (self.splits.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("splits", "fractions must be in [0,1] and sum to 1");
        }
        self.noise.validate().map_err(|e| Error::Config { path: "corpus.noise".into(), reason: e.to_string() })?;
        Vocab::new(self.answer_classes)?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    /// The frozen realizer shared by every consumer of this corpus.
    pub fn realizer(&self) -> Result<Realizer> {
        Realizer::new(self.node_dim, rng::derive(self.seed, "projection"), self.noise)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Split::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| Error::Invalid(format!("unknown split `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config_hash: String,
    pub config: CorpusConfig,
    pub n_scenes: usize,
    pub n_items: [usize; 3],
    pub qtype_counts: Vec<(QType, usize)>,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub vocab: Vocab,
    /// Indexed by scene id.
    pub scenes: Vec<SceneSpec>,
    pub splits: [Vec<QAItem>; 3],
}

impl Corpus {
    pub fn items(&self, split: Split) -> &[QAItem] {
        &self.splits[split as usize]
    }

    pub fn scene(&self, id: u64) -> &SceneSpec {
        &self.scenes[id as usize]
    }

    pub fn scene_ids(&self, split: Split) -> Vec<u64> {
        let mut ids: Vec<u64> = self.items(split).iter().map(|q| q.scene_id).collect();
        ids.dedup();
        ids
    }

    pub fn manifest(&self) -> Manifest {
        let mut qtype_counts: Vec<(QType, usize)> = QType::ALL.iter().map(|&t| (t, 0)).collect();
        for q in self.splits.iter().flatten() {
            qtype_counts[QType::ALL.iter().position(|&t| t == q.qtype).unwrap()].1 += 1;
        }
        Manifest {
            seed: self.config.seed,
            config_hash: self.config.hash(),
            config: self.config.clone(),
            n_scenes: self.scenes.len(),
            n_items: [self.splits[0].len(), self.splits[1].len(), self.splits[2].len()],
            qtype_counts,
        }
    }

    /// Re-checks scene invariants and every stored answer against the oracle.
    pub fn verify(&self) -> Result<()> {
        for (i, s) in self.scenes.iter().enumerate() {
            if s.id != i as u64 {
                return Err(Error::Invalid(format!("scene at position {i} has id {}", s.id)));
            }
            s.validate()?;
        }
        for q in self.splits.iter().flatten() {
            let scene = self
                .scenes
                .get(q.scene_id as usize)
                .ok_or_else(|| Error::Invalid(format!("item {} references missing scene {}", q.id, q.scene_id)))?;
            let oracle = oracle_answer(scene, &q.question, &self.vocab)?;
            if oracle != q.answer || !q.valid_answers.contains(&q.answer) {
                return Err(Error::Invalid(format!("item {} stores answer {} but the oracle gives {oracle}", q.id, q.answer)));
            }
        }
        Ok(())
    }
}

fn scene_items(cfg: &CorpusConfig, vocab: &Vocab, spec: &SceneSpec) -> Result<Vec<QAItem>> {
    let groups = cfg.questions_per_scene / 2;
    let mut items = Vec::with_capacity(cfg.questions_per_scene);
    for g in 0..groups {
        let group = spec.id * groups as u64 + g as u64;
        let mut r = rng::stream(cfg.seed, "qa", group);
        // cycle question types across groups, falling through when a scene
        // cannot support one
        let start = (group % QType::ALL.len() as u64) as usize;
        let mut generated = None;
        for k in 0..QType::ALL.len() {
            match generate_qa(spec, QType::ALL[(start + k) % QType::ALL.len()], vocab, &mut r) {
                Ok(q) => {
                    generated = Some(q);
                    break;
                }
                Err(Error::Unsatisfiable(_)) => continue,
                Err(e) => return Err(e),
            }
        }
        let q = generated.ok_or(Error::Unsatisfiable("every question type"))?;
        for (k, question) in [q.primary, q.paraphrase].into_iter().enumerate() {
            let oracle = oracle_answer(spec, &question, vocab)?;
            if oracle != q.answer {
                return Err(Error::Invalid(format!(
                    "scene {}: generated answer {} disagrees with oracle {oracle}",
                    spec.id, q.answer
                )));
            }
            items.push(QAItem {
                id: group * 2 + k as u64,
                scene_id: spec.id,
                question,
                qtype: q.template.qtype(),
                template: q.template,
                answer: q.answer,
                valid_answers: q.template.valid_answers(vocab),
                paraphrase_group: group,
                binary: q.template.binary(),
            });
        }
    }
    Ok(items)
}

/// Samples scenes and questions; deterministic in `cfg`.
pub fn build_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let vocab = Vocab::new(cfg.answer_classes)?;
    let per_scene: Vec<(SceneSpec, Vec<QAItem>)> = (0..cfg.n_scenes as u64)
        .into_par_iter()
        .map(|i| {
            let spec = sample_scene(&mut rng::stream(cfg.seed, "scene", i), i, cfg.max_objects, cfg.min_distance)?;
            let items = scene_items(cfg, &vocab, &spec)?;
            Ok((spec, items))
        })
        .collect::<Result<_>>()?;

    let mut order: Vec<usize> = (0..cfg.n_scenes).collect();
    order.shuffle(&mut rng::stream(cfg.seed, "split", 0));
    let n_train = (cfg.splits[0] * cfg.n_scenes as f64).round() as usize;
    let n_val = ((cfg.splits[1] * cfg.n_scenes as f64).round() as usize).min(cfg.n_scenes - n_train);
    let mut assignment = vec![Split::Test; cfg.n_scenes];
    for (rank, &scene) in order.iter().enumerate() {
        assignment[scene] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let mut splits: [Vec<QAItem>; 3] = Default::default();
    let mut scenes = Vec::with_capacity(cfg.n_scenes);
    for (i, (spec, items)) in per_scene.into_iter().enumerate() {
        splits[assignment[i] as usize].extend(items);
        scenes.push(spec);
    }
    Ok(Corpus { config: cfg.clone(), vocab, scenes, splits })
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, row)
            .map_err(|e| Error::Format { path: path.display().to_string(), reason: e.to_string() })?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format { path: path.display().to_string(), reason: format!("line {}: {e}", n + 1) })?,
        );
    }
    Ok(out)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| Error::Format { path: path.display().to_string(), reason: e.to_string() })?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format { path: path.display().to_string(), reason: e.to_string() })
}

pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_jsonl(&dir.join("scenes.jsonl"), &corpus.scenes)?;
    for split in Split::ALL {
        write_jsonl(&dir.join(format!("{}.jsonl", split.name())), corpus.items(split))?;
    }
    write_json(&dir.join("vocab.json"), &corpus.vocab)?;
    write_json(&dir.join("manifest.json"), &corpus.manifest())
}

/// Loads a corpus directory and re-verifies it against the oracle.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
    if manifest.config.hash() != manifest.config_hash {
        return Err(Error::Format {
            path: dir.join("manifest.json").display().to_string(),
            reason: "config hash does not match the recorded config".into(),
        });
    }
    let vocab = read_json::<Vocab>(&dir.join("vocab.json"))?.reindexed();
    if vocab != Vocab::new(manifest.config.answer_classes)? {
        return Err(Error::VocabMismatch(format!("{} differs from the canonical vocabulary", dir.join("vocab.json").display())));
    }
    let scenes = read_jsonl(&dir.join("scenes.jsonl"))?;
    let mut splits: [Vec<QAItem>; 3] = Default::default();
    for split in Split::ALL {
        splits[split as usize] = read_jsonl(&dir.join(format!("{}.jsonl", split.name())))?;
    }
    let corpus = Corpus { config: manifest.config, vocab, scenes, splits };
    corpus.verify()?;
    Ok(corpus)
}
