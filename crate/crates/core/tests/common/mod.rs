#![allow(dead_code)]

pub mod oracles;

use sgvqa_core::model::{ModelConfig, ModelParams, Preset};
use sgvqa_core::synth::{build_corpus, Corpus, CorpusConfig};

/// Small corpus matching the tiny preset: node dim 6, at most 5 objects.
pub fn tiny_corpus() -> Corpus {
    build_corpus(&CorpusConfig { n_scenes: 12, max_objects: 5, node_dim: 6, ..CorpusConfig::default() }).unwrap()
}

pub fn tiny_params(corpus: &Corpus, seed: u64) -> ModelParams {
    let mc = ModelConfig::for_preset(Preset::Tiny, corpus.vocab.n_tokens(), corpus.vocab.n_answers());
    ModelParams::init(mc, seed, corpus.vocab.fingerprint()).unwrap()
}
