//! Parameter-free stand-in for a frozen scene-graph generator.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::scene::{dominant_predicate, Predicate, SceneSpec};
use super::vocab::{N_CATEGORIES, N_COLORS, N_SIZES};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

const RAW_DIM: usize = N_CATEGORIES + N_COLORS + N_SIZES + 2;
const POSITION_GAIN: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RealizeNoise {
    /// Std of the Gaussian added to every node feature coordinate.
    pub feature_sigma: f64,
    /// Uniform noise amplitude added to edge logits; below 1 so the true
    /// predicate keeps the largest logit.
    pub edge_noise: f64,
    /// Softmax temperature of edge score distributions; 0 gives one-hot rows.
    pub edge_temperature: f64,
    /// Ordered pairs closer than this are linked.
    pub edge_radius: f64,
}

impl Default for RealizeNoise {
    fn default() -> Self {
        RealizeNoise { feature_sigma: 0.1, edge_noise: 0.5, edge_temperature: 0.5, edge_radius: 0.5 }
    }
}

impl RealizeNoise {
    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, reason: &str| Err(Error::Config { path: path.into(), reason: reason.into() });
        if !(self.feature_sigma >= 0.0) {
            return bad("corpus.noise.feature_sigma", "must be >= 0");
        }
        if !(0.0..1.0).contains(&self.edge_noise) {
            return bad("corpus.noise.edge_noise", "must lie in [0, 1)");
        }
        if !(self.edge_temperature >= 0.0) {
            return bad("corpus.noise.edge_temperature", "must be >= 0");
        }
        if !(self.edge_radius > 0.0) {
            return bad("corpus.noise.edge_radius", "must be > 0");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    /// Identity of the source object. Used to align views and audit losses;
    /// never fed to the model.
    pub object_id: u32,
    pub category: usize,
    pub features: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub src: usize,
    pub dst: usize,
    pub scores: Vec<f64>,
    pub truth: Predicate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub node_dim: usize,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

impl SceneGraph {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Invalid("scene graph without nodes".into()));
        }
        if self.nodes.iter().any(|n| n.features.len() != self.node_dim) {
            return Err(Error::Invalid("node feature dimension mismatch".into()));
        }
        for e in &self.edges {
            if e.src >= self.nodes.len() || e.dst >= self.nodes.len() {
                return Err(Error::Invalid(format!("edge {}->{} out of range", e.src, e.dst)));
            }
            let total: f64 = e.scores.iter().sum();
            if (total - 1.0).abs() > 1e-6 || e.scores.iter().any(|s| *s < 0.0) {
                return Err(Error::Invalid("edge scores are not a distribution".into()));
            }
        }
        Ok(())
    }

    /// Node features as an `O × node_dim` tensor.
    pub fn feature_matrix(&self) -> Tensor {
        let data = self.nodes.iter().flat_map(|n| n.features.iter().copied()).collect();
        Tensor::matrix(self.nodes.len(), self.node_dim, data).expect("validated graph")
    }

    pub fn edge_pairs(&self) -> Vec<(usize, usize)> {
        self.edges.iter().map(|e| (e.src, e.dst)).collect()
    }

    /// Reorders nodes so that new node `k` is old node `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> SceneGraph {
        let mut inverse = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        SceneGraph {
            node_dim: self.node_dim,
            nodes: perm.iter().map(|&old| self.nodes[old].clone()).collect(),
            edges: self.edges.iter().map(|e| GraphEdge { src: inverse[e.src], dst: inverse[e.dst], ..e.clone() }).collect(),
        }
    }

    /// Adds isotropic Gaussian noise to node features; topology is untouched.
    pub fn with_feature_noise<R: Rng>(&self, sigma: f64, rng: &mut R) -> SceneGraph {
        let mut g = self.clone();
        for n in &mut g.nodes {
            for v in &mut n.features {
                *v += sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        g
    }

    pub fn node_index(&self, object_id: u32) -> Option<usize> {
        self.nodes.iter().position(|n| n.object_id == object_id)
    }
}

/// Fixed random projection from symbolic object descriptions to node features.
#[derive(Clone, Debug, PartialEq)]
pub struct Realizer {
    node_dim: usize,
    projection: Vec<f64>,
    noise: RealizeNoise,
}

impl Realizer {
    pub fn new(node_dim: usize, projection_seed: u64, noise: RealizeNoise) -> Result<Self> {
        noise.validate()?;
        if node_dim == 0 {
            return Err(Error::Config { path: "corpus.node_dim".into(), reason: "must be positive".into() });
        }
        let mut rng = rng::stream(projection_seed, "feature-projection", 0);
        let scale = 1.0 / (node_dim as f64).sqrt();
        let projection = (0..RAW_DIM * node_dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        Ok(Realizer { node_dim, projection, noise })
    }

    pub fn node_dim(&self) -> usize {
        self.node_dim
    }

    pub fn noise(&self) -> &RealizeNoise {
        &self.noise
    }

    pub fn with_noise(&self, noise: RealizeNoise) -> Result<Self> {
        noise.validate()?;
        Ok(Realizer { noise, ..self.clone() })
    }

    /// Noise-free feature vector of an object.
    pub fn encode_object(&self, category: usize, color: usize, size: usize, pos: [f64; 2]) -> Vec<f64> {
        let mut raw = [0.0; RAW_DIM];
        raw[category] = 1.0;
        raw[N_CATEGORIES + color] = 1.0;
        raw[N_CATEGORIES + N_COLORS + size] = 1.0;
        raw[RAW_DIM - 2] = POSITION_GAIN * (2.0 * pos[0] - 1.0);
        raw[RAW_DIM - 1] = POSITION_GAIN * (2.0 * pos[1] - 1.0);
        let mut out = vec![0.0; self.node_dim];
        for (k, r) in raw.iter().enumerate() {
            if *r != 0.0 {
                let row = &self.projection[k * self.node_dim..(k + 1) * self.node_dim];
                out.iter_mut().zip(row).for_each(|(o, p)| *o += r * p);
            }
        }
        out
    }

    pub fn realize<R: Rng>(&self, spec: &SceneSpec, rng: &mut R) -> Result<SceneGraph> {
        let feature_noise = Normal::new(0.0, self.noise.feature_sigma).map_err(|e| Error::Invalid(e.to_string()))?;
        let mut order: Vec<usize> = (0..spec.objects.len()).collect();
        order.shuffle(rng);
        let nodes: Vec<GraphNode> = order
            .iter()
            .map(|&k| {
                let o = &spec.objects[k];
                let mut features = self.encode_object(o.category, o.color, o.size, o.pos);
                features.iter_mut().for_each(|v| *v += feature_noise.sample(rng));
                GraphNode { object_id: o.id, category: o.category, features }
            })
            .collect();
        let mut edges = Vec::new();
        for (i, &a) in order.iter().enumerate() {
            for (j, &b) in order.iter().enumerate() {
                if i == j {
                    continue;
                }
                let (s, o) = (&spec.objects[a], &spec.objects[b]);
                if (s.pos[0] - o.pos[0]).hypot(s.pos[1] - o.pos[1]) >= self.noise.edge_radius {
                    continue;
                }
                let truth = dominant_predicate(s, o);
                let scores = self.edge_scores(truth, rng);
                edges.push(GraphEdge { src: i, dst: j, scores, truth });
            }
        }
        let graph = SceneGraph { node_dim: self.node_dim, nodes, edges };
        graph.validate()?;
        Ok(graph)
    }

    fn edge_scores<R: Rng>(&self, truth: Predicate, rng: &mut R) -> Vec<f64> {
        let k = Predicate::ALL.len();
        let logits: Vec<f64> =
            (0..k).map(|p| f64::from(u8::from(p == truth.index())) + self.noise.edge_noise * rng.gen::<f64>()).collect();
        if self.noise.edge_temperature == 0.0 {
            let mut onehot = vec![0.0; k];
            onehot[truth.index()] = 1.0;
            return onehot;
        }
        let mx = logits.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let exps: Vec<f64> = logits.iter().map(|l| ((l - mx) / self.noise.edge_temperature).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }
}
