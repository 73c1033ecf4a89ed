use std::collections::BTreeMap;
use std::fs;

use sgvqa_core::rng;
use sgvqa_core::synth::{
    augment_scene, build_corpus, load_corpus, oracle_answer, write_corpus, Augmentation, Corpus, CorpusConfig, QAItem, QType,
    RealizeNoise, Split, Template,
};

fn corpus(n: usize) -> Corpus {
    build_corpus(&CorpusConfig { n_scenes: n, ..CorpusConfig::default() }).unwrap()
}

fn all_items(c: &Corpus) -> impl Iterator<Item = &QAItem> {
    c.splits.iter().flatten()
}

#[test]
fn flip_swaps_left_right_answers_and_keeps_the_rest() {
    let c = corpus(600);
    let (left, right) = (c.vocab.answer("left"), c.vocab.answer("right"));
    let mut swapped = 0;
    for q in all_items(&c) {
        let scene = c.scene(q.scene_id);
        let flipped = augment_scene(scene, Augmentation::Flip, &mut rng::stream(0, "t", 0)).unwrap();
        let after = oracle_answer(&flipped, &q.question, &c.vocab);
        match q.template {
            Template::LeftOrRight => {
                let want = if q.answer == left { right } else { left };
                assert_eq!(after.unwrap(), want, "item {}", q.id);
                swapped += 1;
            }
            // existence to the left depends on the mirrored geometry
            Template::ExistsLeftOf => {}
            _ => assert_eq!(after.unwrap(), q.answer, "item {} ({})", q.id, q.template.name()),
        }
    }
    assert!(swapped > 20);
}

#[test]
fn global_answers_survive_label_preserving_augmentations() {
    let c = corpus(400);
    for q in all_items(&c).filter(|q| q.qtype == QType::Global) {
        for (k, aug) in [Augmentation::Flip, Augmentation::MILD_JITTER, Augmentation::STRONG_JITTER].into_iter().enumerate() {
            let view = augment_scene(c.scene(q.scene_id), aug, &mut rng::stream2(1, "t", q.id, k as u64)).unwrap();
            assert_eq!(oracle_answer(&view, &q.question, &c.vocab).unwrap(), q.answer);
        }
    }
}

#[test]
fn no_answer_dominates_the_corpus() {
    let c = corpus(2000);
    let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
    for q in all_items(&c) {
        *hist.entry(q.answer).or_default() += 1;
    }
    let n: usize = hist.values().sum();
    let (top, count) = hist.iter().max_by_key(|(_, v)| **v).unwrap();
    let share = *count as f64 / n as f64;
    assert!(share < 0.4, "answer {} covers {share:.3}", c.vocab.answer_name(*top).unwrap());
    assert!(hist.len() > 10);
}

#[test]
fn every_question_type_is_generated() {
    let c = corpus(500);
    for t in QType::ALL {
        assert!(all_items(&c).filter(|q| q.qtype == t).count() > 50, "{}", t.name());
    }
}

#[test]
fn stored_answers_agree_with_the_oracle_and_paraphrases_agree() {
    let c = corpus(300);
    c.verify().unwrap();
    let mut groups: BTreeMap<u64, Vec<&QAItem>> = BTreeMap::new();
    for q in all_items(&c) {
        groups.entry(q.paraphrase_group).or_default().push(q);
        assert!(q.valid_answers.contains(&q.answer));
        assert_eq!(q.binary, q.template.binary());
    }
    for g in groups.values() {
        assert_eq!(g.len(), 2);
        assert_eq!(g[0].answer, g[1].answer);
        assert_eq!(g[0].template, g[1].template);
        assert_ne!(g[0].question, g[1].question);
    }
}

#[test]
fn scene_and_question_counts() {
    let c = corpus(10);
    assert_eq!(all_items(&c).count(), 40);
    assert_eq!(c.scenes.len(), 10);
    let c6 = build_corpus(&CorpusConfig { n_scenes: 10, questions_per_scene: 6, ..CorpusConfig::default() }).unwrap();
    assert_eq!(all_items(&c6).count(), 60);
    for s in 0..10u64 {
        assert_eq!(all_items(&c6).filter(|q| q.scene_id == s).count(), 6);
    }
}

#[test]
fn splits_partition_scenes() {
    let c = corpus(200);
    let ids: Vec<Vec<u64>> = Split::ALL.iter().map(|&s| c.scene_ids(s)).collect();
    let total: usize = ids.iter().map(Vec::len).sum();
    assert_eq!(total, 200);
    assert_eq!(ids[0].len(), 160);
    let mut all: Vec<u64> = ids.concat();
    all.sort_unstable();
    all.dedup();
    assert_eq!(all.len(), 200);
}

#[test]
fn written_files_recount_to_the_manifest() {
    let c = corpus(120);
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&c, dir.path()).unwrap();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut per_split = Vec::new();
    for split in Split::ALL {
        let text = fs::read_to_string(dir.path().join(format!("{}.jsonl", split.name()))).unwrap();
        let rows: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        per_split.push(rows.len());
        for r in rows {
            *counts.entry(r["qtype"].as_str().unwrap().to_string()).or_default() += 1;
        }
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["n_items"], serde_json::json!(per_split));
    for pair in manifest["qtype_counts"].as_array().unwrap() {
        let name = pair[0].as_str().unwrap();
        assert_eq!(pair[1].as_u64().unwrap() as usize, counts.get(name).copied().unwrap_or(0), "{name}");
    }
    let loaded = load_corpus(dir.path()).unwrap();
    assert_eq!(loaded.splits, c.splits);
    assert_eq!(loaded.scenes, c.scenes);
}

#[test]
fn rebuild_is_byte_identical() {
    let cfg = CorpusConfig { n_scenes: 80, seed: 17, ..CorpusConfig::default() };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_corpus(&build_corpus(&cfg).unwrap(), a.path()).unwrap();
    write_corpus(&build_corpus(&cfg).unwrap(), b.path()).unwrap();
    let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 6);
    for name in names {
        assert_eq!(fs::read(a.path().join(&name)).unwrap(), fs::read(b.path().join(&name)).unwrap(), "{name:?}");
    }
    let other = build_corpus(&CorpusConfig { seed: 18, ..cfg }).unwrap();
    assert_ne!(other.scenes, build_corpus(&CorpusConfig { seed: 17, n_scenes: 80, ..CorpusConfig::default() }).unwrap().scenes);
}

#[test]
fn tampered_answer_fails_to_load() {
    let c = corpus(20);
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&c, dir.path()).unwrap();
    let path = dir.path().join("train.jsonl");
    let text = fs::read_to_string(&path).unwrap();
    let mut rows: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let valid: Vec<u64> = rows[0]["valid_answers"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    let current = rows[0]["answer"].as_u64().unwrap();
    rows[0]["answer"] = serde_json::json!(valid.iter().find(|&&v| v != current).unwrap());
    let out: Vec<String> = rows.iter().map(|r| r.to_string()).collect();
    fs::write(&path, out.join("\n") + "\n").unwrap();
    assert!(load_corpus(dir.path()).is_err());
}

#[test]
fn bad_configs_are_rejected() {
    for cfg in [
        CorpusConfig { n_scenes: 0, ..CorpusConfig::default() },
        CorpusConfig { questions_per_scene: 3, ..CorpusConfig::default() },
        CorpusConfig { splits: [0.5, 0.5, 0.5], ..CorpusConfig::default() },
        CorpusConfig { noise: RealizeNoise { feature_sigma: -1.0, ..RealizeNoise::default() }, ..CorpusConfig::default() },
    ] {
        assert!(build_corpus(&cfg).is_err(), "{cfg:?}");
    }
}

/// Two realizations of the same object differ by the difference of two
/// independent N(0, σ²I) draws, so the RMS distance is σ√(2·dim).
#[test]
fn realizer_feature_noise_has_the_stated_scale() {
    let sigma = 0.1;
    let cfg = CorpusConfig { n_scenes: 200, ..CorpusConfig::default() };
    let c = build_corpus(&cfg).unwrap();
    let realizer = c.config.realizer().unwrap();
    let (mut sq, mut n) = (0.0, 0usize);
    for (i, s) in c.scenes.iter().enumerate() {
        let a = realizer.realize(s, &mut rng::stream(1, "mc", i as u64)).unwrap();
        let b = realizer.realize(s, &mut rng::stream(2, "mc", i as u64)).unwrap();
        for node in &a.nodes {
            let other = &b.nodes[b.node_index(node.object_id).unwrap()];
            sq += node.features.iter().zip(&other.features).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
            n += 1;
        }
    }
    let rms = (sq / n as f64).sqrt();
    let want = sigma * (2.0 * cfg.node_dim as f64).sqrt();
    assert!((rms - want).abs() / want < 0.05, "{rms} vs {want}");
    // noise-free features are a fixed function of the object
    let clean = realizer.with_noise(RealizeNoise { feature_sigma: 0.0, ..RealizeNoise::default() }).unwrap();
    let s = &c.scenes[0];
    let g = clean.realize(s, &mut rng::stream(3, "mc", 0)).unwrap();
    for node in &g.nodes {
        let o = s.object(node.object_id).unwrap();
        assert_eq!(node.features, clean.encode_object(o.category, o.color, o.size, o.pos));
    }
}

#[test]
fn edges_respect_the_radius_and_carry_the_true_predicate() {
    let c = corpus(100);
    let realizer = c.config.realizer().unwrap();
    let radius = c.config.noise.edge_radius;
    for s in &c.scenes {
        let g = realizer.realize(s, &mut rng::stream(4, "edges", s.id)).unwrap();
        let mut expected = 0;
        for a in &s.objects {
            for b in &s.objects {
                if a.id != b.id && (a.pos[0] - b.pos[0]).hypot(a.pos[1] - b.pos[1]) < radius {
                    expected += 1;
                }
            }
        }
        assert_eq!(g.edges.len(), expected);
        for e in &g.edges {
            let top = (0..e.scores.len()).max_by(|&i, &j| e.scores[i].total_cmp(&e.scores[j])).unwrap();
            assert_eq!(top, e.truth.index());
        }
    }
}
