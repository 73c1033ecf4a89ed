use rand::Rng;
use serde::{Deserialize, Serialize};

use super::forward::HeadRole;
use super::{ModelConfig, STEPS};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{NormState, ParamId, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepIds {
    pub w_h: ParamId,
    pub w_i: ParamId,
    pub a_src: ParamId,
    pub a_dst: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadIds {
    pub w: [ParamId; 3],
    pub b: [ParamId; 3],
    pub gamma: [ParamId; 2],
    pub beta: [ParamId; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamIds {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub q_in_w: ParamId,
    pub q_in_b: ParamId,
    pub att_q: ParamId,
    pub att_k: ParamId,
    pub att_v: ParamId,
    pub dec_step: ParamId,
    pub dec_q: ParamId,
    pub dec_k: ParamId,
    pub dec_ctx: ParamId,
    pub dec_prev: ParamId,
    pub dec_b: ParamId,
    pub gat: Vec<StepIds>,
    pub pool_w: ParamId,
    pub pool_b: ParamId,
    pub edge_src: ParamId,
    pub edge_dst: ParamId,
    pub edge_prior: ParamId,
    pub edge_b1: ParamId,
    pub edge_w2: ParamId,
    pub edge_b2: ParamId,
    pub node_head: HeadIds,
    pub graph_head: HeadIds,
    pub cls_w1: ParamId,
    pub cls_b1: ParamId,
    pub cls_w2: ParamId,
    pub cls_b2: ParamId,
}

impl ParamIds {
    pub fn head(&self, role: HeadRole) -> &HeadIds {
        match role {
            HeadRole::Node => &self.node_head,
            HeadRole::Graph => &self.graph_head,
        }
    }

    pub fn classifier(&self) -> [ParamId; 4] {
        [self.cls_w1, self.cls_b1, self.cls_w2, self.cls_b2]
    }
}

/// Which batch-norm layer a running state belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NormSlot {
    pub role: HeadRole,
    pub layer: usize,
}

impl NormSlot {
    pub const ALL: [NormSlot; 4] = [
        NormSlot { role: HeadRole::Node, layer: 0 },
        NormSlot { role: HeadRole::Node, layer: 1 },
        NormSlot { role: HeadRole::Graph, layer: 0 },
        NormSlot { role: HeadRole::Graph, layer: 1 },
    ];

    pub fn index(self) -> usize {
        let base = match self.role {
            HeadRole::Node => 0,
            HeadRole::Graph => 2,
        };
        base + self.layer
    }

    pub fn name(self) -> String {
        let role = match self.role {
            HeadRole::Node => "node_head",
            HeadRole::Graph => "graph_head",
        };
        format!("{role}.bn{}", self.layer + 1)
    }
}

/// Everything about the network except the parameter values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Net {
    pub config: ModelConfig,
    pub ids: ParamIds,
    pub norms: Vec<NormState>,
}

impl Net {
    pub fn norm(&self, slot: NormSlot) -> &NormState {
        &self.norms[slot.index()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub net: Net,
    pub store: ParamStore,
    /// Identifies the vocabulary the embedding and answer tables were built for.
    pub vocab_fingerprint: String,
}

struct Builder {
    store: ParamStore,
    seed: u64,
}

impl Builder {
    /// uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))
    fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut r = rng::stream(self.seed, "init", self.store.len() as u64);
        let n = shape.iter().product();
        let data = (0..n).map(|_| r.gen_range(-bound..=bound)).collect();
        self.store.add(name, Tensor::new(shape, data).expect("positive extents"))
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> (ParamId, ParamId) {
        let w = self.uniform(&format!("{name}.w"), &[fan_in, fan_out], fan_in);
        let b = self.uniform(&format!("{name}.b"), &[fan_out], fan_in);
        (w, b)
    }

    fn constant(&mut self, name: &str, n: usize, v: f64) -> ParamId {
        self.store.add(name, Tensor::new(&[n], vec![v; n]).expect("positive extent"))
    }

    fn head(&mut self, name: &str, d: usize) -> HeadIds {
        let (w1, b1) = self.linear(&format!("{name}.fc1"), d, d);
        let g1 = self.constant(&format!("{name}.bn1.gamma"), d, 1.0);
        let be1 = self.constant(&format!("{name}.bn1.beta"), d, 0.0);
        let (w2, b2) = self.linear(&format!("{name}.fc2"), d, d);
        let g2 = self.constant(&format!("{name}.bn2.gamma"), d, 1.0);
        let be2 = self.constant(&format!("{name}.bn2.beta"), d, 0.0);
        let (w3, b3) = self.linear(&format!("{name}.fc3"), d, d);
        HeadIds { w: [w1, w2, w3], b: [b1, b2, b3], gamma: [g1, g2], beta: [be1, be2] }
    }
}

impl ModelParams {
    pub fn init(config: ModelConfig, seed: u64, vocab_fingerprint: impl Into<String>) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let (dw, dq, dn, dl, dg) = (c.word_dim, c.question_dim, c.node_dim, c.link_dim, c.graph_dim);
        let mut b = Builder { store: ParamStore::new(), seed };
        let tok_emb = b.uniform("embed.tokens", &[c.n_tokens, dw], dw);
        let pos_emb = b.uniform("embed.positions", &[c.max_len, dw], dw);
        let (q_in_w, q_in_b) = b.linear("question.input", dw, dq);
        let att_q = b.uniform("question.attn.q", &[dq, dq], dq);
        let att_k = b.uniform("question.attn.k", &[dq, dq], dq);
        let att_v = b.uniform("question.attn.v", &[dq, dq], dq);
        let dec_step = b.uniform("decoder.step", &[STEPS, dq], dq);
        let dec_q = b.uniform("decoder.q", &[dq, dq], dq);
        let dec_k = b.uniform("decoder.k", &[dq, dq], dq);
        let dec_ctx = b.uniform("decoder.out.ctx", &[dq, dq], 2 * dq);
        let dec_prev = b.uniform("decoder.out.prev", &[dq, dq], 2 * dq);
        let dec_b = b.uniform("decoder.out.b", &[dq], 2 * dq);
        let gat = (0..STEPS)
            .map(|t| StepIds {
                // one linear map over [h ‖ i_t], stored as its two row blocks
                w_h: b.uniform(&format!("gat.{t}.w_node"), &[dn, dn], dn + dq),
                w_i: b.uniform(&format!("gat.{t}.w_instr"), &[dq, dn], dn + dq),
                a_src: b.uniform(&format!("gat.{t}.a_src"), &[dn, 1], 2 * dn),
                a_dst: b.uniform(&format!("gat.{t}.a_dst"), &[dn, 1], 2 * dn),
            })
            .collect();
        let (pool_w, pool_b) = b.linear("pool", dn, dg);
        let fan = 2 * dn + c.n_predicates;
        let edge_src = b.uniform("edge.w_src", &[dn, dl], fan);
        let edge_dst = b.uniform("edge.w_dst", &[dn, dl], fan);
        let edge_prior = b.uniform("edge.w_prior", &[c.n_predicates, dl], fan);
        let edge_b1 = b.uniform("edge.b1", &[dl], fan);
        let (edge_w2, edge_b2) = b.linear("edge.out", dl, c.n_predicates);
        let node_head = b.head("node_head", dn);
        let graph_head = b.head("graph_head", dg);
        let (cls_w1, cls_b1) = b.linear("classifier.fc1", dg + dq, dg);
        let (cls_w2, cls_b2) = b.linear("classifier.fc2", dg, c.n_answers);
        let ids = ParamIds {
            tok_emb,
            pos_emb,
            q_in_w,
            q_in_b,
            att_q,
            att_k,
            att_v,
            dec_step,
            dec_q,
            dec_k,
            dec_ctx,
            dec_prev,
            dec_b,
            gat,
            pool_w,
            pool_b,
            edge_src,
            edge_dst,
            edge_prior,
            edge_b1,
            edge_w2,
            edge_b2,
            node_head,
            graph_head,
            cls_w1,
            cls_b1,
            cls_w2,
            cls_b2,
        };
        let norms = NormSlot::ALL.iter().map(|s| NormState::new(if s.role == HeadRole::Node { dn } else { dg })).collect();
        Ok(ModelParams { net: Net { config, ids, norms }, store: b.store, vocab_fingerprint: vocab_fingerprint.into() })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn ids(&self) -> &ParamIds {
        &self.net.ids
    }

    pub fn apply_norm_updates(&mut self, updates: &[(NormSlot, NormState)]) {
        for (slot, state) in updates {
            self.net.norms[slot.index()] = state.clone();
        }
    }

    /// Ids whose name starts with `prefix`.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.store.iter().filter(|(_, p)| p.name.starts_with(prefix)).map(|(id, _)| id).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.net.config.validate()?;
        for (_, p) in self.store.iter() {
            if !p.tensor.all_finite() {
                return Err(Error::NonFinite(format!("parameter {}", p.name)));
            }
        }
        for n in &self.net.norms {
            n.validate()?;
        }
        Ok(())
    }
}
