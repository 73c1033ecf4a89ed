mod common;

use rand::seq::SliceRandom;

use common::tiny_corpus;
use sgvqa_core::losses::{supervised_loss, LossConfig, Variant};
use sgvqa_core::model::{
    classify, embed_tokens, encode_graph, encode_question, GraphBatch, ModelParams, Preset, QuestionBatch, Session,
};
use sgvqa_core::rng;
use sgvqa_core::synth::{build_corpus, Corpus, CorpusConfig, QType, Split};
use sgvqa_core::tensor::{NormMode, Tape};
use sgvqa_core::train::{
    anchor_view, check_batch, evaluate, forward_loss, fraction_scenes, lr_at, model_config, perturbation_report, train,
    train_with, AdamW, Setup, TrainConfig,
};
use sgvqa_core::Error;

fn tiny_cfg(loss: LossConfig) -> TrainConfig {
    TrainConfig { loss, preset: Preset::Tiny, batch_size: 8, epochs: 2, probe_size: 16, ..TrainConfig::desk() }
}

fn bits(p: &ModelParams) -> Vec<(String, Vec<u64>)> {
    p.store.iter().map(|(_, q)| (q.name.clone(), q.tensor.data().iter().map(|v| v.to_bits()).collect())).collect()
}

/// Supervised-only training written directly against the model functions.
fn hand_rolled_baseline(cfg: &TrainConfig, corpus: &Corpus) -> ModelParams {
    let mut params = ModelParams::init(model_config(cfg, corpus).unwrap(), cfg.seed, corpus.vocab.fingerprint()).unwrap();
    let realizer = corpus.config.realizer().unwrap();
    let mut keep = fraction_scenes(corpus, cfg.seed, cfg.data_fraction);
    keep.sort_unstable();
    let items: Vec<_> = corpus.items(Split::Train).iter().filter(|q| keep.contains(&q.scene_id)).collect();
    let mut opt = AdamW::new(cfg.weight_decay);
    for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg.lr, cfg.lr_decay, cfg.lr_period, epoch);
        let mut order = items.clone();
        order.shuffle(&mut rng::stream(cfg.seed, "shuffle", epoch as u64));
        for (bi, batch) in order.chunks_exact(cfg.batch_size).enumerate() {
            let graphs: Vec<_> =
                batch.iter().map(|q| anchor_view(&realizer, corpus.scene(q.scene_id), cfg.seed, epoch, q.id).unwrap()).collect();
            let c = params.config().clone();
            let qs: Vec<&[u32]> = batch.iter().map(|q| q.question.as_slice()).collect();
            let qb = QuestionBatch::new(&qs, c.n_tokens, c.max_len).unwrap();
            let gb = GraphBatch::new(&graphs.iter().collect::<Vec<_>>(), (0..batch.len()).collect()).unwrap();
            let mut tape = Tape::new();
            let dropout = rng::stream2(cfg.seed, "dropout", epoch as u64, bi as u64);
            let mut s = Session::new(&mut tape, &params, NormMode::Train, dropout);
            let emb = embed_tokens(&mut s, &qb).unwrap();
            let instr = encode_question(&mut s, &qb, emb).unwrap();
            let (_, g) = encode_graph(&mut s, &gb, &instr).unwrap();
            let logits = classify(&mut s, g, instr.question).unwrap();
            let answers: Vec<usize> = batch.iter().map(|q| q.answer).collect();
            let rows = supervised_loss(&mut tape, logits, &answers).unwrap();
            let loss = tape.mean(rows, None).unwrap();
            let grads = tape.backward(loss).unwrap();
            opt.step(&mut params.store, &grads, lr);
        }
    }
    params
}

#[test]
fn baseline_equals_a_hand_rolled_supervised_loop() {
    let corpus = tiny_corpus();
    let cfg = tiny_cfg(LossConfig::baseline());
    let out = train(&cfg, &corpus).unwrap();
    assert_eq!(bits(&out.params), bits(&hand_rolled_baseline(&cfg, &corpus)));
    assert!(out.steps.iter().all(|s| s.prime == 0.0 && s.link == 0.0 && s.total == s.sup));
}

#[test]
fn without_supervision_the_classifier_never_moves() {
    let corpus = tiny_corpus();
    let cfg = tiny_cfg(LossConfig { alpha: 0.0, ..LossConfig::variant(Variant::Global) });
    let init = ModelParams::init(model_config(&cfg, &corpus).unwrap(), cfg.seed, corpus.vocab.fingerprint()).unwrap();
    let out = train(&cfg, &corpus).unwrap();
    for id in init.ids().classifier() {
        assert_eq!(init.store.get(id).data(), out.params.store.get(id).data(), "{}", init.store.name(id));
    }
    // the graph encoder did learn from the similarity term
    let w = init.ids().gat[0].w_h;
    assert_ne!(init.store.get(w).data(), out.params.store.get(w).data());
}

#[test]
fn both_views_share_one_set_of_weights() {
    let corpus = tiny_corpus();
    let params = common::tiny_params(&corpus, 0);
    assert!(params.store.iter().all(|(_, p)| !p.name.contains("view")));
    let (items, anchors, aug) = check_batch(&corpus, 4, 0).unwrap();
    let refs: Vec<_> = items.iter().collect();
    let cfg = LossConfig { link_reg: true, ..LossConfig::variant(Variant::Local) };
    let mut tape = Tape::new();
    forward_loss(&mut tape, &params.store, &params.net, &cfg, &refs, &anchors, Some(&aug), rng::stream(0, "d", 0)).unwrap();
    for (id, p) in params.store.iter().filter(|(_, p)| p.name.starts_with("gat.") || p.name.starts_with("edge.")) {
        assert_eq!(tape.param_node_count(id), 1, "{}", p.name);
    }
    let missing = LossConfig::variant(Variant::Local);
    let mut tape = Tape::new();
    let err = forward_loss(&mut tape, &params.store, &params.net, &missing, &refs, &anchors, None, rng::stream(0, "d", 0));
    assert!(err.is_err());
}

#[test]
fn learning_rate_follows_the_step_schedule() {
    for e in 0..10 {
        assert_eq!(lr_at(1e-3, 0.1, 10, e), 1e-3);
    }
    assert!((lr_at(1e-3, 0.1, 10, 10) - 1e-4).abs() < 1e-18);
    assert!((lr_at(1e-3, 0.1, 10, 25) - 1e-5).abs() < 1e-19);
    let corpus = tiny_corpus();
    let cfg = TrainConfig { epochs: 3, lr_decay: 0.5, lr_period: 1, ..tiny_cfg(LossConfig::baseline()) };
    let out = train(&cfg, &corpus).unwrap();
    let lrs: Vec<f64> = out.epochs.iter().map(|e| e.lr).collect();
    assert_eq!(lrs, vec![1e-3, 5e-4, 2.5e-4]);
    assert_eq!(out.epochs.iter().map(|e| e.epoch).collect::<Vec<_>>(), vec![1, 2, 3]);
}

#[test]
fn evaluation_is_pure_and_repeatable() {
    let corpus = tiny_corpus();
    let params = common::tiny_params(&corpus, 3);
    let before = bits(&params);
    let norms = params.net.norms.clone();
    let a = evaluate(&params, &corpus, Split::Test).unwrap();
    let b = evaluate(&params, &corpus, Split::Test).unwrap();
    assert_eq!(a, b);
    assert_eq!(bits(&params), before);
    assert_eq!(params.net.norms, norms);
    assert_eq!(a.count, corpus.items(Split::Test).len());
    assert!(a.loss.unwrap() > 0.0);
}

#[test]
fn two_epochs_lower_the_training_loss() {
    let corpus = build_corpus(&CorpusConfig { n_scenes: 100, ..CorpusConfig::default() }).unwrap();
    for variant in Variant::ALL {
        let cfg = TrainConfig { epochs: 2, batch_size: 16, loss: LossConfig::variant(variant), ..TrainConfig::desk() };
        let out = train(&cfg, &corpus).unwrap();
        let (first, second) = (out.epochs[0].total, out.epochs[1].total);
        assert!(second < first, "{}: {first} then {second}", variant.name());
        assert_eq!(out.epochs[0].prime > 0.0, variant != Variant::Baseline);
        assert_eq!(out.steps.len(), 2 * (corpus.items(Split::Train).len() / 16));
    }
}

#[test]
fn training_is_deterministic_in_the_seed() {
    let corpus = tiny_corpus();
    let cfg = tiny_cfg(LossConfig { link_reg: true, ..LossConfig::variant(Variant::Selfsim) });
    let a = train(&cfg, &corpus).unwrap();
    let b = train(&cfg, &corpus).unwrap();
    assert_eq!(bits(&a.params), bits(&b.params));
    assert_eq!(a.epochs, b.epochs);
    assert_eq!(a.steps, b.steps);
    let c = train(&TrainConfig { seed: 1, ..cfg }, &corpus).unwrap();
    assert_ne!(bits(&a.params), bits(&c.params));
}

#[test]
fn epoch_callback_sees_every_epoch() {
    let corpus = tiny_corpus();
    let cfg = TrainConfig { epochs: 3, ..tiny_cfg(LossConfig::baseline()) };
    let mut seen = Vec::new();
    train_with(&cfg, &corpus, &mut |rec, _| {
        seen.push(rec.epoch);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, vec![1, 2, 3]);
    let stop = train_with(&cfg, &corpus, &mut |_, _| Err(Error::Invalid("stop".into())));
    assert!(matches!(stop, Err(Error::Invalid(_))));
}

#[test]
fn identity_probe_changes_nothing_and_flip_is_relation_only() {
    let corpus = build_corpus(&CorpusConfig { n_scenes: 60, max_objects: 5, node_dim: 6, ..CorpusConfig::default() }).unwrap();
    let params = common::tiny_params(&corpus, 0);
    let rows = perturbation_report(&params, &corpus, Split::Train, &[Setup::identity(), Setup::relation_flip()], 0).unwrap();
    assert_eq!(rows[0].delta, 0.0);
    assert_eq!(rows[0].clean, rows[0].perturbed);
    assert_eq!(rows[0].count, corpus.items(Split::Train).len());
    let relation = corpus.items(Split::Train).iter().filter(|q| q.qtype == QType::Relation).count();
    assert_eq!(rows[1].count, relation);
    assert_eq!(rows[1].qtype, Some(QType::Relation));
    assert_eq!(rows[1].delta, rows[1].perturbed - rows[1].clean);
}

#[test]
fn labeled_fractions_are_nested() {
    let corpus = build_corpus(&CorpusConfig { n_scenes: 200, ..CorpusConfig::default() }).unwrap();
    let fractions = [0.05, 0.2, 0.5, 1.0];
    let sets: Vec<Vec<u64>> = fractions.iter().map(|&f| fraction_scenes(&corpus, 4, f)).collect();
    for w in sets.windows(2) {
        assert!(w[0].len() < w[1].len());
        assert_eq!(w[0], w[1][..w[0].len()]);
    }
    let mut full = sets[3].clone();
    full.sort_unstable();
    let mut train_ids = corpus.scene_ids(Split::Train);
    train_ids.sort_unstable();
    assert_eq!(full, train_ids);
    assert_eq!(sets[0].len(), (0.05 * train_ids.len() as f64).ceil() as usize);
}

#[test]
fn full_fraction_trains_on_every_training_scene() {
    let corpus = tiny_corpus();
    let out = train(&tiny_cfg(LossConfig::baseline()), &corpus).unwrap();
    let mut used = out.train_scenes.clone();
    used.sort_unstable();
    let mut all = corpus.scene_ids(Split::Train);
    all.sort_unstable();
    assert_eq!(used, all);
}

#[test]
fn fraction_smaller_than_one_batch_is_an_error() {
    let corpus = tiny_corpus();
    let cfg = TrainConfig { data_fraction: 0.05, batch_size: 32, ..tiny_cfg(LossConfig::baseline()) };
    match train(&cfg, &corpus) {
        Err(Error::Config { path, .. }) => assert_eq!(path, "train.data_fraction"),
        other => panic!("expected a config error, got {:?}", other.map(|o| o.epochs.len())),
    }
}

#[test]
fn foreign_vocabulary_is_rejected() {
    let corpus = tiny_corpus();
    let mut params = common::tiny_params(&corpus, 0);
    params.vocab_fingerprint = "0000".into();
    assert!(matches!(evaluate(&params, &corpus, Split::Val), Err(Error::VocabMismatch(_))));
    assert!(matches!(perturbation_report(&params, &corpus, Split::Val, &[Setup::identity()], 0), Err(Error::VocabMismatch(_))));
}

#[test]
fn preset_must_match_corpus_features() {
    let corpus = tiny_corpus();
    match train(&TrainConfig { epochs: 1, ..TrainConfig::desk() }, &corpus) {
        Err(Error::Config { path, .. }) => assert_eq!(path, "corpus.node_dim"),
        other => panic!("expected a config error, got {:?}", other.map(|o| o.epochs.len())),
    }
}

#[test]
fn invalid_training_configs_are_rejected() {
    let base = tiny_cfg(LossConfig::baseline());
    for cfg in [
        TrainConfig { lr: 0.0, ..base.clone() },
        TrainConfig { batch_size: 1, ..base.clone() },
        TrainConfig { data_fraction: 1.5, ..base.clone() },
        TrainConfig { lr_decay: 0.0, ..base.clone() },
        TrainConfig { loss: LossConfig::variant(Variant::Local), augmentations: vec![], ..base.clone() },
        TrainConfig { loss: LossConfig { beta: 1.0, ..LossConfig::baseline() }, ..base.clone() },
    ] {
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })), "{cfg:?}");
    }
}
