//! Flat layouts for a minibatch of questions and scene graphs.
//!
//! Items are concatenated along the row axis; attention is expressed as
//! message passing over explicit (query, key) index lists so that one tape
//! carries the whole batch.

use crate::error::{Error, Result};
use crate::synth::{vocab::PAD, SceneGraph};

#[derive(Clone, Debug, PartialEq)]
pub struct QuestionBatch {
    pub n_questions: usize,
    /// Token ids, padding removed, all questions back to back.
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    pub question_of: Vec<usize>,
    pub lengths: Vec<usize>,
    /// Self-attention pairs within each question: query row, key row.
    pub pair_query: Vec<usize>,
    pub pair_key: Vec<usize>,
}

impl QuestionBatch {
    pub fn new(questions: &[&[u32]], n_tokens: usize, max_len: usize) -> Result<Self> {
        if questions.is_empty() {
            return Err(Error::Empty { op: "question batch" });
        }
        let mut b = QuestionBatch {
            n_questions: questions.len(),
            tokens: Vec::new(),
            positions: Vec::new(),
            question_of: Vec::new(),
            lengths: Vec::new(),
            pair_query: Vec::new(),
            pair_key: Vec::new(),
        };
        for (q, question) in questions.iter().enumerate() {
            let start = b.tokens.len();
            for &t in question.iter().filter(|&&t| t != PAD) {
                if t as usize >= n_tokens {
                    return Err(Error::Invalid(format!("token id {t} outside vocabulary of {n_tokens}")));
                }
                b.positions.push(b.tokens.len() - start);
                b.tokens.push(t as usize);
                b.question_of.push(q);
            }
            let len = b.tokens.len() - start;
            if len == 0 {
                return Err(Error::Empty { op: "question" });
            }
            if len > max_len {
                return Err(Error::Invalid(format!("question of {len} tokens exceeds the maximum of {max_len}")));
            }
            for i in start..start + len {
                for j in start..start + len {
                    b.pair_query.push(i);
                    b.pair_key.push(j);
                }
            }
            b.lengths.push(len);
        }
        Ok(b)
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.len()
    }

    /// 1/len(question) for each token, as a column.
    pub fn mean_weights(&self) -> Vec<f64> {
        self.question_of.iter().map(|&q| 1.0 / self.lengths[q] as f64).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphBatch {
    pub n_graphs: usize,
    pub node_dim: usize,
    pub n_predicates: usize,
    /// Row-major node features of all graphs.
    pub features: Vec<f64>,
    pub node_graph: Vec<usize>,
    pub offsets: Vec<usize>,
    pub counts: Vec<usize>,
    /// Object id of every node; used for cross-view alignment only.
    pub object_ids: Vec<u32>,
    /// Question row that conditions each graph.
    pub graph_question: Vec<usize>,
    /// Attention edges: realized edges plus one self-loop per node.
    pub att_src: Vec<usize>,
    pub att_dst: Vec<usize>,
    /// Realized edges with the generator's score rows.
    pub edge_src: Vec<usize>,
    pub edge_dst: Vec<usize>,
    pub edge_graph: Vec<usize>,
    pub edge_prior: Vec<f64>,
}

impl GraphBatch {
    pub fn new(graphs: &[&SceneGraph], graph_question: Vec<usize>) -> Result<Self> {
        let first = graphs.first().ok_or(Error::Empty { op: "graph batch" })?;
        if graph_question.len() != graphs.len() {
            return Err(Error::Invalid(format!("{} question rows for {} graphs", graph_question.len(), graphs.len())));
        }
        let node_dim = first.node_dim;
        let n_predicates = first.edges.first().map_or(5, |e| e.scores.len());
        let mut b = GraphBatch {
            n_graphs: graphs.len(),
            node_dim,
            n_predicates,
            features: Vec::new(),
            node_graph: Vec::new(),
            offsets: Vec::new(),
            counts: Vec::new(),
            object_ids: Vec::new(),
            graph_question,
            att_src: Vec::new(),
            att_dst: Vec::new(),
            edge_src: Vec::new(),
            edge_dst: Vec::new(),
            edge_graph: Vec::new(),
            edge_prior: Vec::new(),
        };
        for (gi, g) in graphs.iter().enumerate() {
            g.validate()?;
            if g.node_dim != node_dim {
                return Err(Error::shape("graph batch", format!("node dim {} vs {node_dim}", g.node_dim)));
            }
            if g.nodes.is_empty() {
                return Err(Error::Empty { op: "graph" });
            }
            let off = b.node_graph.len();
            b.offsets.push(off);
            b.counts.push(g.nodes.len());
            for n in &g.nodes {
                b.features.extend_from_slice(&n.features);
                b.node_graph.push(gi);
                b.object_ids.push(n.object_id);
            }
            for e in &g.edges {
                if e.scores.len() != n_predicates {
                    return Err(Error::shape("graph batch", "edge score width differs between graphs"));
                }
                b.att_src.push(off + e.src);
                b.att_dst.push(off + e.dst);
                b.edge_src.push(off + e.src);
                b.edge_dst.push(off + e.dst);
                b.edge_graph.push(gi);
                b.edge_prior.extend_from_slice(&e.scores);
            }
            for k in 0..g.nodes.len() {
                b.att_src.push(off + k);
                b.att_dst.push(off + k);
            }
        }
        Ok(b)
    }

    pub fn n_nodes(&self) -> usize {
        self.node_graph.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edge_src.len()
    }

    /// 1/|nodes of graph| per node.
    pub fn mean_weights(&self) -> Vec<f64> {
        self.node_graph.iter().map(|&g| 1.0 / self.counts[g] as f64).collect()
    }

    /// Global node rows of graph `g`.
    pub fn node_range(&self, g: usize) -> std::ops::Range<usize> {
        self.offsets[g]..self.offsets[g] + self.counts[g]
    }

    /// Global edge rows of graph `g`, keyed by the (src, dst) object ids.
    pub fn edges_of(&self, g: usize) -> Vec<((u32, u32), usize)> {
        (0..self.n_edges())
            .filter(|&e| self.edge_graph[e] == g)
            .map(|e| ((self.object_ids[self.edge_src[e]], self.object_ids[self.edge_dst[e]]), e))
            .collect()
    }
}
