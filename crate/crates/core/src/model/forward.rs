use serde::{Deserialize, Serialize};

use super::batch::{GraphBatch, QuestionBatch};
use super::params::{ModelParams, Net, NormSlot};
use super::{CLASSIFIER_DROPOUT, LEAKY_SLOPE, STEPS};
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::{NormMode, NormState, ParamId, ParamStore, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadRole {
    Node,
    Graph,
}

/// One forward pass: a tape plus read-only access to the parameters.
///
/// Batch-norm running statistics are not written back here; train-mode
/// updates are collected and applied by the caller.
pub struct Session<'a> {
    pub tape: &'a mut Tape,
    store: &'a ParamStore,
    net: &'a Net,
    pub mode: NormMode,
    rng: Stream,
    norm_updates: Vec<(NormSlot, NormState)>,
}

impl<'a> Session<'a> {
    pub fn new(tape: &'a mut Tape, params: &'a ModelParams, mode: NormMode, dropout: Stream) -> Self {
        Self::with_store(tape, &params.store, &params.net, mode, dropout)
    }

    /// For callers that hold a parameter store separately from the network
    /// description, such as the finite-difference checker.
    pub fn with_store(tape: &'a mut Tape, store: &'a ParamStore, net: &'a Net, mode: NormMode, dropout: Stream) -> Self {
        Session { tape, store, net, mode, rng: dropout, norm_updates: Vec::new() }
    }

    pub fn net(&self) -> &Net {
        self.net
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    pub fn take_norm_updates(&mut self) -> Vec<(NormSlot, NormState)> {
        std::mem::take(&mut self.norm_updates)
    }

    fn column(&mut self, values: Vec<f64>) -> Result<Var> {
        let n = values.len();
        self.tape.constant_from(&[n, 1], values)
    }

    /// Σ_pairs (a[left] · b[right]) per pair, as a vector.
    fn pair_dots(&mut self, a: Var, left: &[usize], b: Var, right: &[usize]) -> Result<Var> {
        let ga = self.tape.gather_rows(a, left)?;
        let gb = self.tape.gather_rows(b, right)?;
        let m = self.tape.mul(ga, gb)?;
        self.tape.sum(m, Some(1))
    }

    /// Attention-weighted sum of `values[src]` into rows `dst`.
    fn aggregate(&mut self, weights: Var, values: Var, src: &[usize], dst: &[usize], n: usize) -> Result<Var> {
        let w = self.tape.reshape(weights, &[src.len(), 1])?;
        let v = self.tape.gather_rows(values, src)?;
        let m = self.tape.mul(v, w)?;
        self.tape.scatter_add_rows(m, dst, n)
    }
}

/// Question vectors (B × question dim) and the M instruction vectors, each
/// B × question dim.
#[derive(Clone, Debug)]
pub struct InstructionSet {
    pub question: Var,
    pub steps: Vec<Var>,
}

/// Table lookup: row i is the embedding of the i-th (non-pad) token.
pub fn embed_tokens(s: &mut Session, qb: &QuestionBatch) -> Result<Var> {
    let table = s.p(s.net.ids.tok_emb);
    s.tape.gather_rows(table, &qb.tokens)
}

pub fn encode_question(s: &mut Session, qb: &QuestionBatch, embeddings: Var) -> Result<InstructionSet> {
    let ids = s.net.ids.clone();
    let dq = s.net.config.question_dim;
    let inv_sqrt = 1.0 / (dq as f64).sqrt();
    let nt = qb.n_tokens();
    let b = qb.n_questions;

    let pos_table = s.p(ids.pos_emb);
    let pos = s.tape.gather_rows(pos_table, &qb.positions)?;
    let h = s.tape.add(embeddings, pos)?;
    let (w_in, b_in) = (s.p(ids.q_in_w), s.p(ids.q_in_b));
    let x = s.tape.linear(h, w_in, Some(b_in))?;

    // single-head self-attention within each question, residual + elu
    let (wq, wk, wv) = (s.p(ids.att_q), s.p(ids.att_k), s.p(ids.att_v));
    let q = s.tape.matmul(x, wq)?;
    let k = s.tape.matmul(x, wk)?;
    let v = s.tape.matmul(x, wv)?;
    let scores = s.pair_dots(q, &qb.pair_query, k, &qb.pair_key)?;
    let scores = s.tape.scale(scores, inv_sqrt)?;
    let alpha = s.tape.segment_softmax(scores, &qb.pair_query, nt)?;
    let attended = s.aggregate(alpha, v, &qb.pair_key, &qb.pair_query, nt)?;
    let c = s.tape.add(x, attended)?;
    let c = s.tape.elu(c)?;

    let w = s.column(qb.mean_weights())?;
    let weighted = s.tape.mul(c, w)?;
    let question = s.tape.scatter_add_rows(weighted, &qb.question_of, b)?;

    // autoregressive instruction decoding over the token states
    let token_rows: Vec<usize> = (0..nt).collect();
    let (step_emb, dec_q, dec_k) = (s.p(ids.dec_step), s.p(ids.dec_q), s.p(ids.dec_k));
    let (dec_ctx, dec_prev, dec_b) = (s.p(ids.dec_ctx), s.p(ids.dec_prev), s.p(ids.dec_b));
    let keys = s.tape.matmul(c, dec_k)?;
    let mut prev = question;
    let mut steps = Vec::with_capacity(STEPS);
    for t in 0..STEPS {
        let e_t = s.tape.slice_rows(step_emb, t, 1)?;
        let cue = s.tape.add(prev, e_t)?;
        let query = s.tape.matmul(cue, dec_q)?;
        let sc = s.pair_dots(query, &qb.question_of, keys, &token_rows)?;
        let sc = s.tape.scale(sc, inv_sqrt)?;
        let alpha = s.tape.segment_softmax(sc, &qb.question_of, b)?;
        let ctx = s.aggregate(alpha, c, &token_rows, &qb.question_of, b)?;
        let a = s.tape.matmul(ctx, dec_ctx)?;
        let p = s.tape.matmul(prev, dec_prev)?;
        let sum = s.tape.add(a, p)?;
        let sum = s.tape.add(sum, dec_b)?;
        let i_t = s.tape.elu(sum)?;
        steps.push(i_t);
        prev = i_t;
    }
    Ok(InstructionSet { question, steps })
}

/// One attention step. `instr` holds one instruction row per graph.
pub fn gat_step(s: &mut Session, gb: &GraphBatch, h: Var, instr: Var, t: usize) -> Result<Var> {
    let ids = s.net.ids.gat.get(t).cloned().ok_or_else(|| Error::Invalid(format!("step {t} out of {STEPS}")))?;
    let n = gb.n_nodes();
    let (w_h, w_i, a_src, a_dst) = (s.p(ids.w_h), s.p(ids.w_i), s.p(ids.a_src), s.p(ids.a_dst));
    let node_part = s.tape.matmul(h, w_h)?;
    let instr_part = s.tape.matmul(instr, w_i)?;
    let instr_part = s.tape.gather_rows(instr_part, &gb.node_graph)?;
    let wh = s.tape.add(node_part, instr_part)?;
    let src_score = s.tape.matmul(wh, a_src)?;
    let src_score = s.tape.reshape(src_score, &[n])?;
    let dst_score = s.tape.matmul(wh, a_dst)?;
    let dst_score = s.tape.reshape(dst_score, &[n])?;
    let es = s.tape.gather_rows(src_score, &gb.att_src)?;
    let ed = s.tape.gather_rows(dst_score, &gb.att_dst)?;
    let e = s.tape.add(ed, es)?;
    let e = s.tape.leaky_relu(e, LEAKY_SLOPE)?;
    let alpha = s.tape.segment_softmax(e, &gb.att_dst, n)?;
    let out = s.aggregate(alpha, wh, &gb.att_src, &gb.att_dst, n)?;
    s.tape.elu(out)
}

/// Node embeddings (all nodes × node dim) and graph vectors (G × graph dim).
pub fn encode_graph(s: &mut Session, gb: &GraphBatch, instr: &InstructionSet) -> Result<(Var, Var)> {
    if instr.steps.len() != STEPS {
        return Err(Error::Invalid(format!("{} instruction vectors, expected {STEPS}", instr.steps.len())));
    }
    let mut h = s.tape.constant_from(&[gb.n_nodes(), gb.node_dim], gb.features.clone())?;
    for (t, &i_t) in instr.steps.iter().enumerate() {
        let rows = s.tape.gather_rows(i_t, &gb.graph_question)?;
        h = gat_step(s, gb, h, rows, t)?;
    }
    let w = s.column(gb.mean_weights())?;
    let weighted = s.tape.mul(h, w)?;
    let pooled = s.tape.scatter_add_rows(weighted, &gb.node_graph, gb.n_graphs)?;
    let (pw, pb) = (s.p(s.net.ids.pool_w), s.p(s.net.ids.pool_b));
    let g = s.tape.linear(pooled, pw, Some(pb))?;
    Ok((h, g))
}

/// Per-edge predicate distributions (E × predicates), or `None` when the
/// batch has no edges.
pub fn edge_scores(s: &mut Session, gb: &GraphBatch, z: Var) -> Result<Option<Var>> {
    if gb.n_edges() == 0 {
        return Ok(None);
    }
    let ids = s.net.ids.clone();
    let zs = s.tape.gather_rows(z, &gb.edge_src)?;
    let zd = s.tape.gather_rows(z, &gb.edge_dst)?;
    let prior = s.tape.constant_from(&[gb.n_edges(), gb.n_predicates], gb.edge_prior.clone())?;
    let (w_src, w_dst, w_prior, b1) = (s.p(ids.edge_src), s.p(ids.edge_dst), s.p(ids.edge_prior), s.p(ids.edge_b1));
    let a = s.tape.matmul(zs, w_src)?;
    let b = s.tape.matmul(zd, w_dst)?;
    let c = s.tape.matmul(prior, w_prior)?;
    let hidden = s.tape.add(a, b)?;
    let hidden = s.tape.add(hidden, c)?;
    let hidden = s.tape.add(hidden, b1)?;
    let hidden = s.tape.relu(hidden)?;
    let (w2, b2) = (s.p(ids.edge_w2), s.p(ids.edge_b2));
    let logits = s.tape.linear(hidden, w2, Some(b2))?;
    s.tape.softmax(logits).map(Some)
}

/// Three linear layers, the first two followed by batch norm and ReLU.
/// Rows are the batch.
pub fn predict_head(s: &mut Session, x: Var, role: HeadRole) -> Result<Var> {
    let ids = s.net.ids.head(role).clone();
    let mut h = x;
    for layer in 0..3 {
        let (w, b) = (s.p(ids.w[layer]), s.p(ids.b[layer]));
        h = s.tape.linear(h, w, Some(b))?;
        if layer < 2 {
            let slot = NormSlot { role, layer };
            let (gamma, beta) = (s.p(ids.gamma[layer]), s.p(ids.beta[layer]));
            let state = s.net.norm(slot).clone();
            let (y, next) = s.tape.batch_norm(h, gamma, beta, &state, s.mode)?;
            if let Some(next) = next {
                s.norm_updates.push((slot, next));
            }
            h = s.tape.relu(y)?;
        }
    }
    Ok(h)
}

/// Answer logits from [graph vector ‖ question vector].
pub fn classify(s: &mut Session, graph: Var, question: Var) -> Result<Var> {
    let ids = s.net.ids.clone();
    let x = s.tape.concat(&[graph, question], 1)?;
    let (w1, b1) = (s.p(ids.cls_w1), s.p(ids.cls_b1));
    let h = s.tape.linear(x, w1, Some(b1))?;
    let h = s.tape.elu(h)?;
    let mode = s.mode;
    let h = s.tape.dropout(h, CLASSIFIER_DROPOUT, mode, &mut s.rng)?;
    let (w2, b2) = (s.p(ids.cls_w2), s.p(ids.cls_b2));
    s.tape.linear(h, w2, Some(b2))
}
