//! Trainable components: token embeddings, the instruction-decoding question
//! encoder, the question-conditioned GAT graph encoder, the edge-score head,
//! the two predictor heads and the answer classifier.

mod batch;
mod checkpoint;
mod forward;
mod params;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use batch::{GraphBatch, QuestionBatch};
pub use checkpoint::{Checkpoint, NamedNorm, NamedTensor, RngState, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use forward::{
    classify, edge_scores, embed_tokens, encode_graph, encode_question, gat_step, predict_head, HeadRole, InstructionSet, Session,
};
pub use params::{ModelParams, Net, NormSlot, ParamIds, StepIds};

/// Number of instruction vectors and graph-encoder steps.
pub const STEPS: usize = 5;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const CLASSIFIER_DROPOUT: f64 = 0.2;
/// Longest question the position table covers.
pub const MAX_QUESTION_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
    Tiny,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
            Preset::Tiny => "tiny",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: Preset,
    pub n_tokens: usize,
    pub n_answers: usize,
    pub n_predicates: usize,
    pub word_dim: usize,
    pub question_dim: usize,
    pub node_dim: usize,
    pub link_dim: usize,
    pub graph_dim: usize,
    pub max_len: usize,
}

impl ModelConfig {
    /// Dimensions 32/32/32/32 and graph 64.
    pub fn desk(n_tokens: usize, n_answers: usize) -> Self {
        Self::with_dims(Preset::Desk, n_tokens, n_answers, 32, 64)
    }

    /// Dimensions 300/300/300/300 and graph 512.
    pub fn paper(n_tokens: usize, n_answers: usize) -> Self {
        Self::with_dims(Preset::Paper, n_tokens, n_answers, 300, 512)
    }

    /// Small dims for gradient checking.
    pub fn tiny(n_tokens: usize, n_answers: usize) -> Self {
        Self::with_dims(Preset::Tiny, n_tokens, n_answers, 6, 8)
    }

    pub fn for_preset(preset: Preset, n_tokens: usize, n_answers: usize) -> Self {
        match preset {
            Preset::Desk => Self::desk(n_tokens, n_answers),
            Preset::Paper => Self::paper(n_tokens, n_answers),
            Preset::Tiny => Self::tiny(n_tokens, n_answers),
        }
    }

    fn with_dims(preset: Preset, n_tokens: usize, n_answers: usize, d: usize, graph_dim: usize) -> Self {
        ModelConfig {
            preset,
            n_tokens,
            n_answers,
            n_predicates: 5,
            word_dim: d,
            question_dim: d,
            node_dim: d,
            link_dim: d,
            graph_dim,
            max_len: MAX_QUESTION_LEN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_tokens", self.n_tokens),
            ("n_answers", self.n_answers),
            ("n_predicates", self.n_predicates),
            ("word_dim", self.word_dim),
            ("question_dim", self.question_dim),
            ("node_dim", self.node_dim),
            ("link_dim", self.link_dim),
            ("graph_dim", self.graph_dim),
            ("max_len", self.max_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config { path: format!("model.{name}"), reason: "must be positive".into() });
            }
        }
        Ok(())
    }
}
