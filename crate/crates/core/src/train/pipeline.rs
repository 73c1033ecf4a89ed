//! Per-batch view construction and the forward/backward passes.

use rand::Rng;

use crate::error::{Error, Result};
use crate::losses::{total_loss, DualViewBatch, LossConfig, LossParts, Variant};
use crate::model::{
    classify, edge_scores, embed_tokens, encode_graph, encode_question, predict_head, GraphBatch, HeadRole, ModelParams, Net,
    NormSlot, QuestionBatch, Session,
};
use crate::rng::{self, Stream};
use crate::synth::{augment_scene, Augmentation, QAItem, Realizer, SceneGraph, SceneSpec};
use crate::tensor::{Gradients, NormMode, NormState, ParamStore, Tape};

/// Anchor view of one item for a training epoch.
pub fn anchor_view(realizer: &Realizer, spec: &SceneSpec, seed: u64, epoch: usize, item: u64) -> Result<SceneGraph> {
    realizer.realize(spec, &mut rng::stream2(seed, "anchor", epoch as u64, item))
}

/// Augmented view of one item for a training epoch. An augmentation that
/// leaves fewer than two objects falls back to the identity.
pub fn augmented_view(
    realizer: &Realizer,
    spec: &SceneSpec,
    augmentations: &[Augmentation],
    seed: u64,
    epoch: usize,
    item: u64,
) -> Result<SceneGraph> {
    let mut r = rng::stream2(seed, "augment", epoch as u64, item);
    let aug = augmentations[r.gen_range(0..augmentations.len())];
    let view = match augment_scene(spec, aug, &mut r) {
        Ok(v) => v,
        Err(Error::TooFewObjects(_)) => spec.clone(),
        Err(e) => return Err(e),
    };
    realizer.realize(&view, &mut r)
}

/// The graph every evaluation uses for a scene.
pub fn eval_stream(corpus_seed: u64, scene_id: u64) -> Stream {
    rng::stream(corpus_seed, "eval-graph", scene_id)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub sup: f64,
    pub prime: f64,
    pub link: f64,
    pub total: f64,
}

pub struct StepOutput {
    pub grads: Gradients,
    pub losses: StepLosses,
    pub norm_updates: Vec<(NormSlot, NormState)>,
}

/// Builds the full training objective on `tape` for one dual-view batch.
/// `augmented` is ignored when the loss does not use a second view.
#[allow(clippy::too_many_arguments)]
pub fn forward_loss(
    tape: &mut Tape,
    store: &ParamStore,
    net: &Net,
    cfg: &LossConfig,
    items: &[&QAItem],
    anchors: &[SceneGraph],
    augmented: Option<&[SceneGraph]>,
    dropout: Stream,
) -> Result<(LossParts, Vec<(NormSlot, NormState)>)> {
    let b = items.len();
    let questions: Vec<&[u32]> = items.iter().map(|q| q.question.as_slice()).collect();
    let c = &net.config;
    let qb = QuestionBatch::new(&questions, c.n_tokens, c.max_len)?;
    let dual = cfg.needs_second_view();
    let mut graphs: Vec<&SceneGraph> = anchors.iter().collect();
    let mut graph_question: Vec<usize> = (0..b).collect();
    if dual {
        let aug = augmented.ok_or(Error::Invalid("similarity variants need augmented views".into()))?;
        graphs.extend(aug.iter());
        graph_question.extend(0..b);
    }
    let gb = GraphBatch::new(&graphs, graph_question)?;

    let mut s = Session::with_store(tape, store, net, NormMode::Train, dropout);
    let emb = embed_tokens(&mut s, &qb)?;
    let instr = encode_question(&mut s, &qb, emb)?;
    let (z, g) = encode_graph(&mut s, &gb, &instr)?;
    let g_anchor = if dual { s.tape.slice_rows(g, 0, b)? } else { g };
    let logits = classify(&mut s, g_anchor, instr.question)?;
    let (mut p_node, mut p_graph, mut r) = (None, None, None);
    if dual {
        if cfg.predictor && cfg.variant.uses_nodes() {
            p_node = Some(predict_head(&mut s, z, HeadRole::Node)?);
        }
        if cfg.predictor && cfg.variant == Variant::Global {
            p_graph = Some(predict_head(&mut s, g, HeadRole::Graph)?);
        }
        if cfg.link_reg {
            r = edge_scores(&mut s, &gb, z)?;
        }
    }
    let norm_updates = s.take_norm_updates();
    let batch = DualViewBatch {
        graphs: &gb,
        n_items: b,
        z,
        g,
        p_node,
        p_graph,
        r,
        logits,
        answers: items.iter().map(|q| q.answer).collect(),
    };
    Ok((total_loss(tape, cfg, &batch)?, norm_updates))
}

/// Forward and backward for one dual-view batch.
pub fn train_step(
    params: &ModelParams,
    cfg: &LossConfig,
    items: &[&QAItem],
    anchors: &[SceneGraph],
    augmented: Option<&[SceneGraph]>,
    dropout: Stream,
) -> Result<StepOutput> {
    let mut tape = Tape::new();
    let (parts, norm_updates) = forward_loss(&mut tape, &params.store, &params.net, cfg, items, anchors, augmented, dropout)?;
    let total = tape.scalar(parts.total);
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("total loss {total}")));
    }
    let grads = tape.backward(parts.total)?;
    Ok(StepOutput { grads, losses: StepLosses { sup: parts.sup, prime: parts.prime, link: parts.link, total }, norm_updates })
}

/// Eval-mode logits and graph vectors for single-view inputs.
pub fn infer(params: &ModelParams, questions: &[&[u32]], graphs: &[&SceneGraph]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let c = params.config();
    let qb = QuestionBatch::new(questions, c.n_tokens, c.max_len)?;
    let gb = GraphBatch::new(graphs, (0..graphs.len()).collect())?;
    let mut tape = Tape::new();
    let mut s = Session::new(&mut tape, params, NormMode::Eval, rng::stream(0, "unused", 0));
    let emb = embed_tokens(&mut s, &qb)?;
    let instr = encode_question(&mut s, &qb, emb)?;
    let (_, g) = encode_graph(&mut s, &gb, &instr)?;
    let logits = classify(&mut s, g, instr.question)?;
    let rows = |v: &[f64], w: usize| v.chunks(w).map(<[f64]>::to_vec).collect::<Vec<_>>();
    Ok((rows(tape.value(logits), c.n_answers), rows(tape.value(g), c.graph_dim)))
}
