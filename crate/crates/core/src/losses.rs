//! Similarity objectives, regularizers and the combined training loss.
//!
//! The single-instance functions are plain math on tape values and never
//! detach anything themselves; [`total_loss`] places every stop-gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::GraphBatch;
use crate::tensor::{Tape, Var};

/// Guard inside logarithms of supplied distributions.
pub const LOG_GUARD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    Local,
    Global,
    Selfsim,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Local, Variant::Global, Variant::Selfsim];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Local => "local",
            Variant::Global => "global",
            Variant::Selfsim => "selfsim",
        }
    }

    pub fn uses_nodes(self) -> bool {
        matches!(self, Variant::Local | Variant::Selfsim)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub variant: Variant,
    pub link_reg: bool,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    /// Detach the z-side and anchor targets. Turning it off is only useful
    /// for demonstrating collapse.
    pub stop_gradient: bool,
    /// Route the p-side through the predictor heads; when off, p = z.
    pub predictor: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            variant: Variant::Local,
            link_reg: false,
            alpha: 1.0,
            beta: 1.0,
            tau: 0.1,
            stop_gradient: true,
            predictor: true,
        }
    }
}

impl LossConfig {
    pub fn baseline() -> Self {
        LossConfig { variant: Variant::Baseline, beta: 0.0, ..Self::default() }
    }

    pub fn variant(variant: Variant) -> Self {
        if variant == Variant::Baseline {
            Self::baseline()
        } else {
            LossConfig { variant, ..Self::default() }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| Err(Error::Config { path: format!("train.loss.{field}"), reason: reason.into() });
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha", "must be finite and non-negative");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta", "must be finite and non-negative");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau", "must be positive");
        }
        if self.variant == Variant::Baseline {
            if self.beta != 0.0 {
                return bad("beta", "the baseline variant is supervised only; set beta to 0");
            }
            if self.link_reg {
                return bad("link_reg", "link regularization needs a similarity variant");
            }
        }
        Ok(())
    }

    /// Whether the second (augmented) view contributes to the loss.
    pub fn needs_second_view(&self) -> bool {
        self.variant != Variant::Baseline && self.beta > 0.0
    }
}

/// D(a, b) = 1 - cos(a, b) along the last axis: a scalar for vectors, one
/// value per row for matrices.
pub fn cosine_distance(t: &mut Tape, a: Var, b: Var) -> Result<Var> {
    if t.shape(a) != t.shape(b) {
        return Err(Error::shape("cosine_distance", format!("{:?} vs {:?}", t.shape(a), t.shape(b))));
    }
    let axis = t.shape(a).len().saturating_sub(1);
    let na = t.l2_normalize(a)?;
    let nb = t.l2_normalize(b)?;
    let m = t.mul(na, nb)?;
    let cos = t.sum(m, Some(axis))?;
    let neg = t.neg(cos);
    t.add_scalar(neg, 1.0)
}

/// D between every row of `a` and every row of `b`.
pub fn distance_matrix(t: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let na = t.l2_normalize(a)?;
    let nb = t.l2_normalize(b)?;
    let nbt = t.transpose(nb)?;
    let cos = t.matmul(na, nbt)?;
    let neg = t.neg(cos);
    t.add_scalar(neg, 1.0)
}

/// (1/O_p) Σ_i min_j D(p_i, z_j). The per-row minima are sorted before
/// summation so the value does not depend on row order.
pub fn min_match(t: &mut Tape, p: Var, z: Var) -> Result<Var> {
    if t.shape(p).len() != 2 || t.shape(z).len() != 2 {
        return Err(Error::shape("local_loss", "expects node matrices"));
    }
    let d = distance_matrix(t, p, z)?;
    let mins = t.min(d, Some(1))?;
    let sorted = t.sort(mins)?;
    t.mean(sorted, None)
}

pub fn local_loss(t: &mut Tape, p1: Var, z2: Var, p2: Var, z1: Var) -> Result<Var> {
    let a = min_match(t, p1, z2)?;
    let b = min_match(t, p2, z1)?;
    let s = t.add(a, b)?;
    t.scale(s, 0.5)
}

/// ½(D(p1, z2) + D(p2, z1)); matrices are treated row-wise and averaged.
pub fn global_loss(t: &mut Tape, p1: Var, z2: Var, p2: Var, z1: Var) -> Result<Var> {
    let a = cosine_distance(t, p1, z2)?;
    let b = cosine_distance(t, p2, z1)?;
    let s = t.add(a, b)?;
    let s = t.mean(s, None)?;
    t.scale(s, 0.5)
}

fn off_diagonal(o: usize) -> Vec<bool> {
    (0..o * o).map(|k| k / o != k % o).collect()
}

/// Mean row-wise cross-entropy between the off-diagonal similarity
/// distributions softmax(-D/τ) of `target` and of `z`. Rows of the two
/// inputs must correspond.
pub fn selfsim_j(t: &mut Tape, target: Var, z: Var, tau: f64) -> Result<Var> {
    let o = t.shape(target).first().copied().unwrap_or(0);
    if t.shape(target).len() != 2 || t.shape(target) != t.shape(z) {
        return Err(Error::shape("selfsim", format!("{:?} vs {:?}", t.shape(target), t.shape(z))));
    }
    if o < 2 {
        return Err(Error::Empty { op: "selfsim (needs at least two nodes)" });
    }
    let mask = off_diagonal(o);
    let d1 = distance_matrix(t, target, target)?;
    let l1 = t.scale(d1, -1.0 / tau)?;
    let s1 = t.softmax_masked(l1, Some(&mask))?;
    let d2 = distance_matrix(t, z, z)?;
    let l2 = t.scale(d2, -1.0 / tau)?;
    let log_s2 = t.log_softmax_masked(l2, Some(&mask))?;
    let prod = t.mul(s1, log_s2)?;
    let rows = t.sum(prod, Some(1))?;
    let m = t.mean(rows, None)?;
    Ok(t.neg(m))
}

/// −(1/E) Σ_e Σ_k r1[e,k] · ln(r2[e,k] + 1e-12).
pub fn link_reg(t: &mut Tape, r1: Var, r2: Var) -> Result<Var> {
    if t.shape(r1) != t.shape(r2) || t.shape(r1).len() != 2 {
        return Err(Error::shape("link_reg", format!("{:?} vs {:?}", t.shape(r1), t.shape(r2))));
    }
    let per_edge = link_rows(t, r1, r2)?;
    t.mean(per_edge, None)
}

fn link_rows(t: &mut Tape, r1: Var, r2: Var) -> Result<Var> {
    let guarded = t.add_scalar(r2, LOG_GUARD)?;
    let logs = t.log(guarded)?;
    let prod = t.mul(r1, logs)?;
    let rows = t.sum(prod, Some(1))?;
    Ok(t.neg(rows))
}

/// −log softmax(logits)[answer] for each row of `logits` (B × classes).
pub fn supervised_loss(t: &mut Tape, logits: Var, answers: &[usize]) -> Result<Var> {
    let shape = t.shape(logits).to_vec();
    let (b, k) = match shape.as_slice() {
        [k] => (1, *k),
        [b, k] => (*b, *k),
        _ => return Err(Error::shape("supervised_loss", format!("{shape:?}"))),
    };
    if answers.len() != b {
        return Err(Error::shape("supervised_loss", format!("{} answers for {b} rows", answers.len())));
    }
    let mut onehot = vec![0.0; b * k];
    for (r, &a) in answers.iter().enumerate() {
        if a >= k {
            return Err(Error::Invalid(format!("answer id {a} outside {k} classes")));
        }
        onehot[r * k + a] = 1.0;
    }
    let logits = t.reshape(logits, &[b, k])?;
    let logp = t.log_softmax(logits)?;
    let mask = t.constant_from(&[b, k], onehot)?;
    let picked = t.mul(logp, mask)?;
    let rows = t.sum(picked, Some(1))?;
    Ok(t.neg(rows))
}

/// Batched outputs of the dual-view forward pass.
///
/// `graphs` lays out the anchor views of items 0..B first and then the
/// augmented views in the same item order.
pub struct DualViewBatch<'g> {
    pub graphs: &'g GraphBatch,
    pub n_items: usize,
    /// Node embeddings of all graphs.
    pub z: Var,
    /// Graph vectors of all graphs.
    pub g: Var,
    /// Node predictor outputs, rows aligned with `z`.
    pub p_node: Option<Var>,
    /// Graph predictor outputs, rows aligned with `g`.
    pub p_graph: Option<Var>,
    /// Edge distributions, rows aligned with the batch's realized edges.
    pub r: Option<Var>,
    /// Anchor-view logits, B × answers.
    pub logits: Var,
    pub answers: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct LossParts {
    pub total: Var,
    pub sup: f64,
    pub prime: f64,
    pub link: f64,
}

fn rows_of(t: &mut Tape, m: Var, range: std::ops::Range<usize>) -> Result<Var> {
    t.slice_rows(m, range.start, range.len())
}

/// Row pairs of nodes present in both views, sorted by object id.
pub fn common_nodes(gb: &GraphBatch, anchor: usize, augmented: usize) -> (Vec<usize>, Vec<usize>) {
    let mut a: Vec<(u32, usize)> = gb.node_range(anchor).map(|k| (gb.object_ids[k], k)).collect();
    let mut b: Vec<(u32, usize)> = gb.node_range(augmented).map(|k| (gb.object_ids[k], k)).collect();
    a.sort_unstable();
    b.sort_unstable();
    let (mut ra, mut rb) = (Vec::new(), Vec::new());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                ra.push(a[i].1);
                rb.push(b[j].1);
                i += 1;
                j += 1;
            }
        }
    }
    (ra, rb)
}

/// Edge row pairs present in both views, keyed by (src, dst) object ids.
pub fn common_edges(gb: &GraphBatch, anchor: usize, augmented: usize) -> (Vec<usize>, Vec<usize>) {
    let mut a = gb.edges_of(anchor);
    let b = gb.edges_of(augmented);
    a.sort_unstable();
    let (mut ra, mut rb) = (Vec::new(), Vec::new());
    let mut bs = b;
    bs.sort_unstable();
    for (key, e1) in a {
        if let Ok(pos) = bs.binary_search_by(|(k, _)| k.cmp(&key)) {
            ra.push(e1);
            rb.push(bs[pos].1);
        }
    }
    (ra, rb)
}

/// α·mean(L_sup) + β·(mean(L′) + J_e), with L′ chosen by the variant.
/// Terms with zero weight are left off the tape.
pub fn total_loss(t: &mut Tape, cfg: &LossConfig, batch: &DualViewBatch) -> Result<LossParts> {
    cfg.validate()?;
    let b = batch.n_items;
    let sup_rows = supervised_loss(t, batch.logits, &batch.answers)?;
    let sup = t.mean(sup_rows, None)?;
    let sup_value = t.scalar(sup);
    let mut total = if cfg.alpha > 0.0 { Some(t.scale(sup, cfg.alpha)?) } else { None };
    let (mut prime_value, mut link_value) = (0.0, 0.0);

    if cfg.needs_second_view() {
        if batch.graphs.n_graphs != 2 * b {
            return Err(Error::Invalid(format!("{} graphs for {b} dual-view items", batch.graphs.n_graphs)));
        }
        let sg = |t: &mut Tape, v: Var| if cfg.stop_gradient { t.detach(v) } else { v };
        let pick_p = |p: Option<Var>, z: Var| -> Result<Var> {
            if cfg.predictor {
                p.ok_or(Error::Invalid("predictor outputs missing from batch".into()))
            } else {
                Ok(z)
            }
        };
        let gb = batch.graphs;
        let prime = match cfg.variant {
            Variant::Global => {
                let p = pick_p(batch.p_graph, batch.g)?;
                let zt = sg(t, batch.g);
                let p1 = t.slice_rows(p, 0, b)?;
                let p2 = t.slice_rows(p, b, b)?;
                let z1 = t.slice_rows(zt, 0, b)?;
                let z2 = t.slice_rows(zt, b, b)?;
                global_loss(t, p1, z2, p2, z1)?
            }
            Variant::Local | Variant::Selfsim => {
                let p = pick_p(batch.p_node, batch.z)?;
                let zt = sg(t, batch.z);
                let target = t.detach(batch.z);
                let mut per_item = Vec::with_capacity(b);
                for i in 0..b {
                    let p1 = rows_of(t, p, gb.node_range(i))?;
                    let p2 = rows_of(t, p, gb.node_range(b + i))?;
                    let z1 = rows_of(t, zt, gb.node_range(i))?;
                    let z2 = rows_of(t, zt, gb.node_range(b + i))?;
                    let mut l = local_loss(t, p1, z2, p2, z1)?;
                    if cfg.variant == Variant::Selfsim {
                        let (ra, rb) = common_nodes(gb, i, b + i);
                        if ra.len() >= 2 {
                            // the anchor's similarity structure is the target
                            let anchor = if cfg.stop_gradient { target } else { batch.z };
                            let s1 = t.gather_rows(anchor, &ra)?;
                            let s2 = t.gather_rows(batch.z, &rb)?;
                            let j = selfsim_j(t, s1, s2, cfg.tau)?;
                            l = t.add(l, j)?;
                        }
                    }
                    per_item.push(t.reshape(l, &[1])?);
                }
                let all = t.concat(&per_item, 0)?;
                t.mean(all, None)?
            }
            Variant::Baseline => unreachable!("baseline never needs the second view"),
        };
        prime_value = t.scalar(prime);
        let mut sim = prime;

        if cfg.link_reg {
            let r = batch.r.ok_or(Error::Invalid("edge scores missing from batch".into()))?;
            let (mut e1, mut e2, mut w) = (Vec::new(), Vec::new(), Vec::new());
            let mut per_item = Vec::new();
            for i in 0..b {
                let (ra, rb) = common_edges(gb, i, b + i);
                if !ra.is_empty() {
                    per_item.push(ra.len());
                    e1.extend(ra);
                    e2.extend(rb);
                }
            }
            if !per_item.is_empty() {
                let n_items = per_item.len() as f64;
                for n in &per_item {
                    w.extend(std::iter::repeat_n(1.0 / (*n as f64 * n_items), *n));
                }
                let rt = sg(t, r);
                let r1 = t.gather_rows(rt, &e1)?;
                let r2 = t.gather_rows(r, &e2)?;
                let rows = link_rows(t, r1, r2)?;
                let wv = t.constant_from(&[w.len()], w)?;
                let weighted = t.mul(rows, wv)?;
                let je = t.sum(weighted, None)?;
                link_value = t.scalar(je);
                sim = t.add(sim, je)?;
            }
        }
        let sim = t.scale(sim, cfg.beta)?;
        total = Some(match total {
            Some(s) => t.add(s, sim)?,
            None => sim,
        });
    }
    let total = match total {
        Some(v) => v,
        None => return Err(Error::Invalid("alpha and beta are both zero; nothing to optimize".into())),
    };
    Ok(LossParts { total, sup: sup_value, prime: prime_value, link: link_value })
}
