//! Robustness probes and the labeled-fraction sweep.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::metrics::MetricsReport;
use super::pipeline::eval_stream;
use super::run::{eval_graphs, evaluate, evaluate_inputs, train};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::rng;
use crate::synth::{augment_scene, vocab::PAD, Augmentation, Corpus, QAItem, QType, SceneGraph, Split};

/// Default std of the feature noise used by the graph-noise probes.
pub const GRAPH_NOISE_SIGMA: f64 = 0.3;
/// Largest share of question tokens the question-noise probe replaces.
pub const QUESTION_NOISE_FRACTION: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Perturbation {
    Identity,
    /// Re-realizes an augmented copy of the scene. Stored answers are kept.
    Scene {
        augmentation: Augmentation,
    },
    /// Gaussian noise on node features; topology is untouched.
    GraphNoise {
        sigma: f64,
    },
    /// Replaces k ~ U{0..⌊fraction·len⌋} question tokens with random words.
    QuestionNoise {
        fraction: f64,
    },
    /// Graph noise and question noise together.
    Both {
        sigma: f64,
        fraction: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Setup {
    pub name: String,
    /// Restricts evaluation to one question type.
    pub qtype: Option<QType>,
    pub perturbation: Perturbation,
}

impl Setup {
    pub fn new(name: &str, qtype: Option<QType>, perturbation: Perturbation) -> Self {
        Setup { name: name.into(), qtype, perturbation }
    }

    pub fn identity() -> Self {
        Self::new("identity", None, Perturbation::Identity)
    }

    pub fn relation_flip() -> Self {
        Self::new("relation_flip", Some(QType::Relation), Perturbation::Scene { augmentation: Augmentation::Flip })
    }

    pub fn attribute_jitter() -> Self {
        Self::new(
            "attribute_strong_jitter",
            Some(QType::Attribute),
            Perturbation::Scene { augmentation: Augmentation::STRONG_JITTER },
        )
    }

    pub fn global_noise_crop() -> Self {
        Self::new("global_noise_crop", Some(QType::Global), Perturbation::Scene { augmentation: Augmentation::STRONG_NOISE_CROP })
    }

    pub fn noise_sg() -> Self {
        Self::new("noise_sg", None, Perturbation::GraphNoise { sigma: GRAPH_NOISE_SIGMA })
    }

    pub fn question_noise() -> Self {
        Self::new("question_noise", None, Perturbation::QuestionNoise { fraction: QUESTION_NOISE_FRACTION })
    }

    pub fn noise_noise() -> Self {
        Self::new("noise_noise", None, Perturbation::Both { sigma: GRAPH_NOISE_SIGMA, fraction: QUESTION_NOISE_FRACTION })
    }

    /// The disruptive-augmentation rows.
    pub fn augmentation_suite() -> Vec<Setup> {
        vec![Self::relation_flip(), Self::attribute_jitter(), Self::global_noise_crop()]
    }

    /// The noise-sensitivity rows.
    pub fn noise_suite() -> Vec<Setup> {
        vec![Self::noise_sg(), Self::question_noise(), Self::noise_noise()]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRow {
    pub setup: String,
    pub qtype: Option<QType>,
    pub count: usize,
    pub clean: f64,
    pub perturbed: f64,
    pub delta: f64,
}

/// Replaces a random number of positions, up to `fraction` of the length,
/// with random non-pad tokens.
pub fn noisy_question<R: Rng>(question: &[u32], n_tokens: usize, fraction: f64, rng: &mut R) -> Vec<u32> {
    let mut q: Vec<u32> = question.iter().copied().filter(|&t| t != PAD).collect();
    let max_k = (fraction * q.len() as f64).floor() as usize;
    let k = rng.gen_range(0..=max_k);
    let picks = rand::seq::index::sample(rng, q.len(), k);
    for i in picks.iter() {
        q[i] = rng.gen_range(1..n_tokens as u32);
    }
    q
}

fn perturbed_graph(corpus: &Corpus, item: &QAItem, clean: &SceneGraph, p: Perturbation, seed: u64) -> Result<SceneGraph> {
    match p {
        Perturbation::Identity | Perturbation::QuestionNoise { .. } => Ok(clean.clone()),
        Perturbation::Scene { augmentation } => {
            let spec = corpus.scene(item.scene_id);
            let view = match augment_scene(spec, augmentation, &mut rng::stream(seed, "perturb-scene", item.scene_id)) {
                Ok(v) => v,
                Err(Error::TooFewObjects(_)) => spec.clone(),
                Err(e) => return Err(e),
            };
            corpus.config.realizer()?.realize(&view, &mut eval_stream(corpus.config.seed, item.scene_id))
        }
        Perturbation::GraphNoise { sigma } | Perturbation::Both { sigma, .. } => {
            Ok(clean.with_feature_noise(sigma, &mut rng::stream(seed, "perturb-graph", item.scene_id)))
        }
    }
}

fn perturbed_question(item: &QAItem, n_tokens: usize, p: Perturbation, seed: u64) -> Vec<u32> {
    match p {
        Perturbation::QuestionNoise { fraction } | Perturbation::Both { fraction, .. } => {
            noisy_question(&item.question, n_tokens, fraction, &mut rng::stream(seed, "perturb-question", item.id))
        }
        _ => item.question.clone(),
    }
}

/// Accuracy change of each setup on its matched subset of `split`.
pub fn perturbation_report(
    params: &ModelParams,
    corpus: &Corpus,
    split: Split,
    setups: &[Setup],
    seed: u64,
) -> Result<Vec<PerturbationRow>> {
    evaluate(params, corpus, split)?;
    let n_tokens = corpus.vocab.n_tokens();
    setups
        .iter()
        .map(|setup| {
            let items: Vec<QAItem> =
                corpus.items(split).iter().filter(|q| setup.qtype.is_none_or(|t| q.qtype == t)).cloned().collect();
            if items.is_empty() {
                return Err(Error::Empty { op: "perturbation subset" });
            }
            let clean_graphs = eval_graphs(corpus, &items)?;
            let clean_q: Vec<Vec<u32>> = items.iter().map(|q| q.question.clone()).collect();
            let clean = evaluate_inputs(params, &items, &clean_q, &clean_graphs)?.overall;
            let graphs: Vec<SceneGraph> = items
                .par_iter()
                .zip(&clean_graphs)
                .map(|(q, g)| perturbed_graph(corpus, q, g, setup.perturbation, seed))
                .collect::<Result<_>>()?;
            let questions: Vec<Vec<u32>> =
                items.iter().map(|q| perturbed_question(q, n_tokens, setup.perturbation, seed)).collect();
            let perturbed = evaluate_inputs(params, &items, &questions, &graphs)?.overall;
            Ok(PerturbationRow {
                setup: setup.name.clone(),
                qtype: setup.qtype,
                count: items.len(),
                clean,
                perturbed,
                delta: perturbed - clean,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub fraction: f64,
    pub train_scenes: usize,
    pub test: MetricsReport,
}

/// One model per labeled fraction, each scored on the full test split.
pub fn fraction_sweep(cfg: &TrainConfig, corpus: &Corpus, fractions: &[f64]) -> Result<Vec<SweepPoint>> {
    if fractions.is_empty() {
        return Err(Error::Empty { op: "fraction sweep" });
    }
    if fractions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config { path: "sweep.fractions".into(), reason: "must be strictly ascending".into() });
    }
    fractions
        .iter()
        .map(|&f| {
            let run_cfg = TrainConfig { data_fraction: f, ..cfg.clone() };
            let out = train(&run_cfg, corpus)?;
            Ok(SweepPoint {
                fraction: f,
                train_scenes: out.train_scenes.len(),
                test: evaluate(&out.params, corpus, Split::Test)?,
            })
        })
        .collect()
}
