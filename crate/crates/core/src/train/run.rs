use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::metrics::{argmax, score_predictions, MetricsReport};
use super::optim::{lr_at, AdamW};
use super::pipeline::{anchor_view, augmented_view, eval_stream, infer, train_step, StepLosses};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::rng;
use crate::synth::{Corpus, QAItem, SceneGraph, Split};

/// Batch size used by evaluation passes.
pub const EVAL_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub sup: f64,
    pub prime: f64,
    pub link: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub sup: f64,
    pub prime: f64,
    pub link: f64,
    pub total: f64,
    pub val: MetricsReport,
    pub repr_std: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub initial_repr_std: f64,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub train_scenes: Vec<u64>,
}

pub fn model_config(cfg: &TrainConfig, corpus: &Corpus) -> Result<ModelConfig> {
    let mc = ModelConfig::for_preset(cfg.preset, corpus.vocab.n_tokens(), corpus.vocab.n_answers());
    if mc.node_dim != corpus.config.node_dim {
        return Err(Error::Config {
            path: "corpus.node_dim".into(),
            reason: format!("the {} preset expects node features of dim {}", cfg.preset.name(), mc.node_dim),
        });
    }
    Ok(mc)
}

/// Training scenes kept at `fraction`: a prefix of one fixed permutation,
/// so smaller fractions are subsets of larger ones.
pub fn fraction_scenes(corpus: &Corpus, seed: u64, fraction: f64) -> Vec<u64> {
    let mut ids = corpus.scene_ids(Split::Train);
    ids.shuffle(&mut rng::stream(seed, "fraction", 0));
    let keep = ((fraction * ids.len() as f64).ceil() as usize).clamp(1, ids.len().max(1));
    ids.truncate(keep);
    ids
}

fn check_vocab(params: &ModelParams, corpus: &Corpus) -> Result<()> {
    if params.vocab_fingerprint != corpus.vocab.fingerprint() {
        return Err(Error::VocabMismatch(format!(
            "checkpoint vocabulary {} does not match corpus vocabulary {}",
            params.vocab_fingerprint,
            corpus.vocab.fingerprint()
        )));
    }
    Ok(())
}

/// The clean evaluation graph of each item.
pub fn eval_graphs(corpus: &Corpus, items: &[QAItem]) -> Result<Vec<SceneGraph>> {
    let realizer = corpus.config.realizer()?;
    items
        .par_iter()
        .map(|q| realizer.realize(corpus.scene(q.scene_id), &mut eval_stream(corpus.config.seed, q.scene_id)))
        .collect()
}

/// Logits and graph vectors for explicit inputs, batched.
pub fn infer_all(params: &ModelParams, questions: &[Vec<u32>], graphs: &[SceneGraph]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let chunks: Vec<(usize, usize)> =
        (0..questions.len()).step_by(EVAL_BATCH).map(|s| (s, (s + EVAL_BATCH).min(questions.len()))).collect();
    let parts: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)> = chunks
        .par_iter()
        .map(|&(a, b)| {
            let qs: Vec<&[u32]> = questions[a..b].iter().map(Vec::as_slice).collect();
            let gs: Vec<&SceneGraph> = graphs[a..b].iter().collect();
            infer(params, &qs, &gs)
        })
        .collect::<Result<_>>()?;
    let mut logits = Vec::with_capacity(questions.len());
    let mut vectors = Vec::with_capacity(questions.len());
    for (l, v) in parts {
        logits.extend(l);
        vectors.extend(v);
    }
    Ok((logits, vectors))
}

/// Metrics for `items` answered from the given questions and graphs.
pub fn evaluate_inputs(
    params: &ModelParams,
    items: &[QAItem],
    questions: &[Vec<u32>],
    graphs: &[SceneGraph],
) -> Result<MetricsReport> {
    let (logits, _) = infer_all(params, questions, graphs)?;
    let preds: Vec<usize> = logits.iter().map(|row| argmax(row)).collect();
    let mut report = score_predictions(items, &preds)?;
    let ce: f64 = logits
        .iter()
        .zip(items)
        .map(|(row, q)| {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lz = row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            -(row[q.answer] - mx - lz)
        })
        .sum();
    report.loss = Some(ce / items.len() as f64);
    Ok(report)
}

/// Eval-mode metrics on one split; never touches the parameters.
pub fn evaluate(params: &ModelParams, corpus: &Corpus, split: Split) -> Result<MetricsReport> {
    check_vocab(params, corpus)?;
    let items = corpus.items(split);
    if items.is_empty() {
        return Err(Error::Empty { op: "evaluation split" });
    }
    let graphs = eval_graphs(corpus, items)?;
    let questions: Vec<Vec<u32>> = items.iter().map(|q| q.question.clone()).collect();
    evaluate_inputs(params, items, &questions, &graphs)
}

/// Mean over channels of the standard deviation of L2-normalized vectors.
pub fn normalized_std(vectors: &[Vec<f64>]) -> f64 {
    let n = vectors.len();
    if n == 0 {
        return 0.0;
    }
    let d = vectors[0].len();
    let normed: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter().map(|x| x / norm).collect()
        })
        .collect();
    let mut total = 0.0;
    for k in 0..d {
        let mean = normed.iter().map(|v| v[k]).sum::<f64>() / n as f64;
        let var = normed.iter().map(|v| (v[k] - mean).powi(2)).sum::<f64>() / n as f64;
        total += var.sqrt();
    }
    total / d as f64
}

/// Spread of the graph vectors on the fixed probe set.
pub fn repr_std(params: &ModelParams, probe: &[QAItem], graphs: &[SceneGraph]) -> Result<f64> {
    let questions: Vec<Vec<u32>> = probe.iter().map(|q| q.question.clone()).collect();
    let (_, vectors) = infer_all(params, &questions, graphs)?;
    Ok(normalized_std(&vectors))
}

fn probe_items(corpus: &Corpus, size: usize) -> Vec<QAItem> {
    let pool = if corpus.items(Split::Val).is_empty() { corpus.items(Split::Train) } else { corpus.items(Split::Val) };
    pool.iter().take(size).cloned().collect()
}

pub fn train(cfg: &TrainConfig, corpus: &Corpus) -> Result<TrainOutcome> {
    train_with(cfg, corpus, &mut |_, _| Ok(()))
}

/// Trains and calls `on_epoch` after every epoch with the epoch's record
/// and the current parameters.
pub fn train_with(
    cfg: &TrainConfig,
    corpus: &Corpus,
    on_epoch: &mut dyn FnMut(&EpochRecord, &ModelParams) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut params = ModelParams::init(model_config(cfg, corpus)?, cfg.seed, corpus.vocab.fingerprint())?;
    let realizer = corpus.config.realizer()?;
    let train_scenes = fraction_scenes(corpus, cfg.seed, cfg.data_fraction);
    let mut keep = train_scenes.clone();
    keep.sort_unstable();
    let items: Vec<&QAItem> = corpus.items(Split::Train).iter().filter(|q| keep.binary_search(&q.scene_id).is_ok()).collect();
    if items.len() < cfg.batch_size {
        return Err(Error::Config {
            path: "train.data_fraction".into(),
            reason: format!("{} training items is less than one batch of {}", items.len(), cfg.batch_size),
        });
    }
    let probe = probe_items(corpus, cfg.probe_size);
    let probe_graphs = eval_graphs(corpus, &probe)?;
    let initial_repr_std = repr_std(&params, &probe, &probe_graphs)?;
    let dual = cfg.loss.needs_second_view();
    let mut opt = AdamW::new(cfg.weight_decay);
    let (mut epochs, mut steps) = (Vec::with_capacity(cfg.epochs), Vec::new());
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg.lr, cfg.lr_decay, cfg.lr_period, epoch);
        let mut order = items.clone();
        order.shuffle(&mut rng::stream(cfg.seed, "shuffle", epoch as u64));
        let mut acc = StepLosses::default();
        let n_batches = order.len() / cfg.batch_size;
        for (bi, batch) in order.chunks_exact(cfg.batch_size).enumerate() {
            let anchors: Vec<SceneGraph> = batch
                .par_iter()
                .map(|q| anchor_view(&realizer, corpus.scene(q.scene_id), cfg.seed, epoch, q.id))
                .collect::<Result<_>>()?;
            let augmented: Option<Vec<SceneGraph>> = if dual {
                Some(
                    batch
                        .par_iter()
                        .map(|q| augmented_view(&realizer, corpus.scene(q.scene_id), &cfg.augmentations, cfg.seed, epoch, q.id))
                        .collect::<Result<_>>()?,
                )
            } else {
                None
            };
            let dropout = rng::stream2(cfg.seed, "dropout", epoch as u64, bi as u64);
            let out = train_step(&params, &cfg.loss, batch, &anchors, augmented.as_deref(), dropout).map_err(|e| match e {
                Error::NonFinite(what) => Error::Diverged { epoch: epoch + 1, step, what },
                other => other,
            })?;
            opt.step(&mut params.store, &out.grads, lr);
            params.apply_norm_updates(&out.norm_updates);
            if let Some((id, _)) = params.store.iter().find(|(_, p)| !p.tensor.all_finite()) {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    step,
                    what: format!("parameter {} became non-finite", params.store.name(id)),
                });
            }
            let l = out.losses;
            steps.push(StepRecord { step, epoch: epoch + 1, sup: l.sup, prime: l.prime, link: l.link, total: l.total });
            acc.sup += l.sup;
            acc.prime += l.prime;
            acc.link += l.link;
            acc.total += l.total;
            step += 1;
        }
        let k = n_batches as f64;
        let val = if corpus.items(Split::Val).is_empty() {
            evaluate(&params, corpus, Split::Train)?
        } else {
            evaluate(&params, corpus, Split::Val)?
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            sup: acc.sup / k,
            prime: acc.prime / k,
            link: acc.link / k,
            total: acc.total / k,
            val,
            repr_std: repr_std(&params, &probe, &probe_graphs)?,
        };
        on_epoch(&record, &params)?;
        epochs.push(record);
    }
    Ok(TrainOutcome { params, initial_repr_std, epochs, steps, train_scenes })
}
