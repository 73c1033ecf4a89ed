//! Wengert-list reverse mode.
//!
//! Every forward primitive appends a node holding its output value and what
//! it needs for the backward pass. Inputs always precede their consumers, so
//! a single reverse sweep visits each record exactly once.

use rand::Rng;

use super::norm::{NormMode, NormState, BN_EPS};
use super::params::{Gradients, ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};
use crate::rng;

/// Norm floor for `l2_normalize` and cosine computations.
pub const NORM_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Neg(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    SliceRows { input: usize, start: usize },
    Gather { input: usize, indices: Vec<usize> },
    ScatterAdd { input: usize, index: Vec<usize> },
    SegmentSoftmax { input: usize, segments: Vec<usize> },
    Sum { input: usize, axis: Option<usize> },
    Mean { input: usize, axis: Option<usize> },
    Pick { input: usize, picks: Vec<usize> },
    Sort { input: usize, perm: Vec<usize> },
    Softmax { input: usize, mask: Option<Vec<bool>> },
    LogSoftmax { input: usize, mask: Option<Vec<bool>> },
    Log(usize),
    Exp(usize),
    Relu(usize),
    Elu(usize),
    LeakyRelu(usize, f64),
    L2Normalize { input: usize, norms: Vec<f64> },
    Dropout { input: usize, scale: Vec<f64> },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
}

#[derive(Clone, Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Generic description of a forward primitive, for callers that want to
/// dispatch on the primitive kind (property tests, tooling). The typed
/// methods on [`Tape`] are the usual entry point.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    MatMul,
    Concat { axis: usize },
    Sum { axis: Option<usize> },
    Mean { axis: Option<usize> },
    Max { axis: Option<usize> },
    Min { axis: Option<usize> },
    Softmax,
    LogSoftmax,
    Log,
    Exp,
    Relu,
    Elu,
    LeakyRelu { slope: f64 },
    L2Normalize,
    Dropout { rate: f64, mode: NormMode, seed: u64, stream: u64 },
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: Vec<Option<Var>>,
    detached: Vec<Vec<f64>>,
    pinned: Option<Vec<Vec<f64>>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` laid into the rank of `out`, zero on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 { 0 } else { s };
        s *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every output element.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = numel(out);
    if n == 0 {
        return;
    }
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

fn add_into(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
        None => *slot = Some(contrib),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose k-th `detach` yields `values[k]` instead of its input.
    /// Replaying the detached values of an earlier pass makes stopped
    /// branches true constants under parameter perturbation.
    pub fn with_pinned_detaches(values: Vec<Vec<f64>>) -> Self {
        Tape { pinned: Some(values), ..Self::default() }
    }

    /// Values produced by every `detach` so far, in call order.
    pub fn detached_values(&self) -> &[Vec<f64>] {
        &self.detached
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.data.clone()).expect("tape nodes hold valid tensors")
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        assert_eq!(n.data.len(), 1, "scalar() on shape {:?}", n.shape);
        n.data[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { shape, data, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn checked(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, ng: bool) -> Result<Var> {
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{name} produced {bad}")));
        }
        Ok(self.push(shape, data, op, ng))
    }

    fn ng(&self, v: usize) -> bool {
        self.nodes[v].needs_grad
    }

    /// Constant leaf; never receives gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if numel(shape) != data.len() || shape.contains(&0) {
            return Err(Error::shape("constant", format!("{shape:?} vs {} values", data.len())));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    /// Binds a parameter onto the tape. Each parameter is bound at most once
    /// per tape, so every use shares one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(Some(v)) = self.bound.get(id.0) {
            return *v;
        }
        let t = store.get(id);
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param(id), true);
        if self.bound.len() <= id.0 {
            self.bound.resize(id.0 + 1, None);
        }
        self.bound[id.0] = Some(v);
        v
    }

    /// The node a parameter is bound to, if any.
    pub fn bound_param(&self, id: ParamId) -> Option<Var> {
        self.bound.get(id.0).copied().flatten()
    }

    /// Number of distinct nodes created for parameter `id` on this tape.
    pub fn param_node_count(&self, id: ParamId) -> usize {
        self.nodes.iter().filter(|n| matches!(n.op, Op::Param(p) if p == id)).count()
    }

    /// Stop-gradient: same value, cut from everything upstream.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let shape = n.shape.clone();
        let k = self.detached.len();
        let data = match self.pinned.as_ref().and_then(|p| p.get(k)) {
            Some(p) if p.len() == n.data.len() => p.clone(),
            _ => n.data.clone(),
        };
        self.detached.push(data.clone());
        self.push(shape, data, Op::Leaf, false)
    }

    /// Dispatches a [`Primitive`] by kind.
    pub fn apply(&mut self, prim: &Primitive, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::Invalid(format!("{prim:?} takes {n} inputs, got {}", inputs.len())))
            }
        };
        match prim {
            Primitive::Add => arity(2).and_then(|_| self.add(inputs[0], inputs[1])),
            Primitive::Sub => arity(2).and_then(|_| self.sub(inputs[0], inputs[1])),
            Primitive::Mul => arity(2).and_then(|_| self.mul(inputs[0], inputs[1])),
            Primitive::MatMul => arity(2).and_then(|_| self.matmul(inputs[0], inputs[1])),
            Primitive::Concat { axis } => self.concat(inputs, *axis),
            Primitive::Sum { axis } => arity(1).and_then(|_| self.sum(inputs[0], *axis)),
            Primitive::Mean { axis } => arity(1).and_then(|_| self.mean(inputs[0], *axis)),
            Primitive::Max { axis } => arity(1).and_then(|_| self.max(inputs[0], *axis)),
            Primitive::Min { axis } => arity(1).and_then(|_| self.min(inputs[0], *axis)),
            Primitive::Softmax => arity(1).and_then(|_| self.softmax(inputs[0])),
            Primitive::LogSoftmax => arity(1).and_then(|_| self.log_softmax(inputs[0])),
            Primitive::Log => arity(1).and_then(|_| self.log(inputs[0])),
            Primitive::Exp => arity(1).and_then(|_| self.exp(inputs[0])),
            Primitive::Relu => arity(1).and_then(|_| self.relu(inputs[0])),
            Primitive::Elu => arity(1).and_then(|_| self.elu(inputs[0])),
            Primitive::LeakyRelu { slope } => arity(1).and_then(|_| self.leaky_relu(inputs[0], *slope)),
            Primitive::L2Normalize => arity(1).and_then(|_| self.l2_normalize(inputs[0])),
            Primitive::Dropout { rate, mode, seed, stream } => {
                arity(1)?;
                let mut rng = rng::stream(*seed, "dropout", *stream);
                self.dropout(inputs[0], *rate, *mode, &mut rng)
            }
        }
    }

    // ---- elementwise binary (numpy broadcasting) ----

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if na.shape == nb.shape {
            let data = na.data.iter().zip(&nb.data).map(|(x, y)| f(*x, *y)).collect();
            return Ok((na.shape.clone(), data));
        }
        let out = broadcast_shape(&na.shape, &nb.shape)
            .ok_or_else(|| Error::shape(name, format!("{:?} vs {:?}", na.shape, nb.shape)))?;
        let sa = broadcast_strides(&na.shape, &out);
        let sb = broadcast_strides(&nb.shape, &out);
        let mut data = vec![0.0; numel(&out)];
        for_each_broadcast(&out, &sa, &sb, |o, ia, ib| data[o] = f(na.data[ia], nb.data[ib]));
        Ok((out, data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = self.binary("add", a, b, |x, y| x + y)?;
        let ng = self.ng(a.0) || self.ng(b.0);
        self.checked("add", shape, data, Op::Add(a.0, b.0), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = self.binary("sub", a, b, |x, y| x - y)?;
        let ng = self.ng(a.0) || self.ng(b.0);
        self.checked("sub", shape, data, Op::Sub(a.0, b.0), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = self.binary("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(a.0) || self.ng(b.0);
        self.checked("mul", shape, data, Op::Mul(a.0, b.0), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let n = &self.nodes[a.0];
        let (shape, data) = (n.shape.clone(), n.data.iter().map(|x| x * c).collect());
        let ng = self.ng(a.0);
        self.checked("scale", shape, data, Op::Scale(a.0, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let n = &self.nodes[a.0];
        let (shape, data) = (n.shape.clone(), n.data.iter().map(|x| x + c).collect());
        let ng = self.ng(a.0);
        self.checked("add_scalar", shape, data, Op::AddScalar(a.0), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let n = &self.nodes[a.0];
        let (shape, data) = (n.shape.clone(), n.data.iter().map(|x| -x).collect());
        let ng = self.ng(a.0);
        self.push(shape, data, Op::Neg(a.0), ng)
    }

    // ---- linear algebra and layout ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[1] != nb.shape[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", na.shape, nb.shape)));
        }
        let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = na.data[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &nb.data[p * n..(p + 1) * n];
                row.iter_mut().zip(brow).for_each(|(o, bv)| *o += aip * bv);
            }
        }
        let ng = self.ng(a.0) || self.ng(b.0);
        self.checked("matmul", vec![m, n], out, Op::MatMul(a.0, b.0), ng)
    }

    /// `x @ w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let na = &self.nodes[a.0];
        if na.shape.len() != 2 {
            return Err(Error::shape("transpose", format!("rank {}", na.shape.len())));
        }
        let (r, c) = (na.shape[0], na.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = na.data[i * c + j];
            }
        }
        let ng = self.ng(a.0);
        Ok(self.push(vec![c, r], out, Op::Transpose(a.0), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let na = &self.nodes[a.0];
        if numel(shape) != na.data.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", na.shape)));
        }
        let data = na.data.clone();
        let ng = self.ng(a.0);
        Ok(self.push(shape.to_vec(), data, Op::Reshape(a.0), ng))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or(Error::Empty { op: "concat" })?;
        let base = self.nodes[first.0].shape.clone();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for rank {}", base.len())));
        }
        let mut out_shape = base.clone();
        out_shape[axis] = 0;
        for v in inputs {
            let s = &self.nodes[v.0].shape;
            let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", format!("{base:?} vs {s:?} on axis {axis}")));
            }
            out_shape[axis] += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for v in inputs {
                let n = &self.nodes[v.0];
                let chunk = n.shape[axis] * inner;
                data.extend_from_slice(&n.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let ng = inputs.iter().any(|v| self.ng(v.0));
        let op = Op::Concat { inputs: inputs.iter().map(|v| v.0).collect(), axis };
        Ok(self.push(out_shape, data, op, ng))
    }

    /// Rows `start..start+len` along the leading axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let na = &self.nodes[a.0];
        if na.shape.is_empty() || len == 0 || start + len > na.shape[0] {
            return Err(Error::shape("slice_rows", format!("{start}+{len} of {:?}", na.shape)));
        }
        let inner = numel(&na.shape[1..]);
        let data = na.data[start * inner..(start + len) * inner].to_vec();
        let mut shape = na.shape.clone();
        shape[0] = len;
        let ng = self.ng(a.0);
        Ok(self.push(shape, data, Op::SliceRows { input: a.0, start }, ng))
    }

    /// Selects rows of a matrix (or elements of a vector) by index; indices
    /// may repeat.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let na = &self.nodes[a.0];
        if na.shape.is_empty() || indices.is_empty() {
            return Err(Error::shape("gather_rows", format!("{} indices of {:?}", indices.len(), na.shape)));
        }
        let rows = na.shape[0];
        let inner = numel(&na.shape[1..]);
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            if i >= rows {
                return Err(Error::shape("gather_rows", format!("index {i} out of {rows} rows")));
            }
            data.extend_from_slice(&na.data[i * inner..(i + 1) * inner]);
        }
        let mut shape = na.shape.clone();
        shape[0] = indices.len();
        let ng = self.ng(a.0);
        Ok(self.push(shape, data, Op::Gather { input: a.0, indices: indices.to_vec() }, ng))
    }

    /// Row `r` of the output is the sum of input rows `k` with
    /// `index[k] == r`; rows nobody maps to stay zero.
    pub fn scatter_add_rows(&mut self, a: Var, index: &[usize], n_rows: usize) -> Result<Var> {
        let na = &self.nodes[a.0];
        if na.shape.is_empty() || na.shape[0] != index.len() || n_rows == 0 {
            return Err(Error::shape("scatter_add_rows", format!("{} indices for {:?} into {n_rows}", index.len(), na.shape)));
        }
        let inner = numel(&na.shape[1..]);
        let mut data = vec![0.0; n_rows * inner];
        for (k, &r) in index.iter().enumerate() {
            if r >= n_rows {
                return Err(Error::shape("scatter_add_rows", format!("index {r} out of {n_rows} rows")));
            }
            data[r * inner..(r + 1) * inner].iter_mut().zip(&na.data[k * inner..(k + 1) * inner]).for_each(|(o, x)| *o += x);
        }
        let mut shape = na.shape.clone();
        shape[0] = n_rows;
        let ng = self.ng(a.0);
        Ok(self.push(shape, data, Op::ScatterAdd { input: a.0, index: index.to_vec() }, ng))
    }

    /// Softmax of a vector within groups: entries sharing a segment id are
    /// normalized together.
    pub fn segment_softmax(&mut self, a: Var, segments: &[usize], n_segments: usize) -> Result<Var> {
        let na = &self.nodes[a.0];
        if na.shape.len() != 1 || na.data.len() != segments.len() {
            return Err(Error::shape("segment_softmax", format!("{} segment ids for {:?}", segments.len(), na.shape)));
        }
        let mut mx = vec![f64::NEG_INFINITY; n_segments];
        for (&s, &x) in segments.iter().zip(&na.data) {
            if s >= n_segments {
                return Err(Error::shape("segment_softmax", format!("segment {s} out of {n_segments}")));
            }
            mx[s] = mx[s].max(x);
        }
        let mut z = vec![0.0; n_segments];
        let mut data: Vec<f64> = segments.iter().zip(&na.data).map(|(&s, &x)| (x - mx[s]).exp()).collect();
        for (&s, &e) in segments.iter().zip(&data) {
            z[s] += e;
        }
        data.iter_mut().zip(segments).for_each(|(e, &s)| *e /= z[s]);
        let shape = na.shape.clone();
        let ng = self.ng(a.0);
        let op = Op::SegmentSoftmax { input: a.0, segments: segments.to_vec() };
        self.checked("segment_softmax", shape, data, op, ng)
    }

    // ---- reductions ----

    fn reduce(&self, a: Var, axis: Option<usize>, name: &'static str) -> Result<(Vec<usize>, usize, usize, usize)> {
        let s = &self.nodes[a.0].shape;
        match axis {
            None => Ok((vec![], 1, numel(s), 1)),
            Some(ax) if ax < s.len() => {
                let (o, l, i) = axis_split(s, ax);
                let mut out = s.clone();
                out.remove(ax);
                Ok((out, o, l, i))
            }
            Some(ax) => Err(Error::shape(name, format!("axis {ax} for shape {s:?}"))),
        }
    }

    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let (shape, outer, len, inner) = self.reduce(a, axis, "sum")?;
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += src[(o * len + l) * inner + i];
                }
            }
        }
        let ng = self.ng(a.0);
        self.checked("sum", shape, data, Op::Sum { input: a.0, axis }, ng)
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let (shape, outer, len, inner) = self.reduce(a, axis, "mean")?;
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += src[(o * len + l) * inner + i];
                }
            }
        }
        let inv = 1.0 / len as f64;
        data.iter_mut().for_each(|v| *v *= inv);
        let ng = self.ng(a.0);
        self.checked("mean", shape, data, Op::Mean { input: a.0, axis }, ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.sum(a, None)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        self.mean(a, None)
    }

    fn extremum(&mut self, a: Var, axis: Option<usize>, want_max: bool) -> Result<Var> {
        let name = if want_max { "max" } else { "min" };
        let (shape, outer, len, inner) = self.reduce(a, axis, name)?;
        let src = &self.nodes[a.0].data;
        let mut data = Vec::with_capacity(outer * inner);
        let mut picks = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = (o * len) * inner + i;
                for l in 1..len {
                    let k = (o * len + l) * inner + i;
                    // strict comparison keeps the lowest index on ties
                    let better = if want_max { src[k] > src[best] } else { src[k] < src[best] };
                    if better {
                        best = k;
                    }
                }
                data.push(src[best]);
                picks.push(best);
            }
        }
        let ng = self.ng(a.0);
        self.checked(name, shape, data, Op::Pick { input: a.0, picks }, ng)
    }

    /// Maximum along `axis` (all elements when `None`); ties go to the lowest index.
    pub fn max(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.extremum(a, axis, true)
    }

    /// Minimum along `axis` (all elements when `None`); ties go to the lowest index.
    pub fn min(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.extremum(a, axis, false)
    }

    /// Ascending sort of a vector. Summing a sorted vector gives a result that
    /// does not depend on the original element order.
    pub fn sort(&mut self, a: Var) -> Result<Var> {
        let na = &self.nodes[a.0];
        if na.shape.len() != 1 {
            return Err(Error::shape("sort", format!("expects a vector, got {:?}", na.shape)));
        }
        let mut perm: Vec<usize> = (0..na.data.len()).collect();
        perm.sort_by(|&i, &j| na.data[i].total_cmp(&na.data[j]).then(i.cmp(&j)));
        let data = perm.iter().map(|&i| na.data[i]).collect();
        let shape = na.shape.clone();
        let ng = self.ng(a.0);
        Ok(self.push(shape, data, Op::Sort { input: a.0, perm }, ng))
    }

    // ---- normalized exponentials over the last axis ----

    fn softmax_rows(&self, a: Var, mask: Option<&[bool]>, name: &'static str, log: bool) -> Result<Vec<f64>> {
        let na = &self.nodes[a.0];
        let width = *na.shape.last().unwrap_or(&1);
        if let Some(m) = mask {
            if m.len() != na.data.len() {
                return Err(Error::shape(name, format!("mask of {} for {:?}", m.len(), na.shape)));
            }
        }
        let allowed = |k: usize| mask.is_none_or(|m| m[k]);
        let mut out = vec![0.0; na.data.len()];
        for (r, row) in na.data.chunks(width).enumerate() {
            let base = r * width;
            let mut mx = f64::NEG_INFINITY;
            for (j, &x) in row.iter().enumerate() {
                if allowed(base + j) && x > mx {
                    mx = x;
                }
            }
            if mx == f64::NEG_INFINITY {
                return Err(Error::Empty { op: name });
            }
            let mut z = 0.0;
            for (j, &x) in row.iter().enumerate() {
                if allowed(base + j) {
                    z += (x - mx).exp();
                }
            }
            let lz = z.ln();
            for (j, &x) in row.iter().enumerate() {
                if allowed(base + j) {
                    out[base + j] = if log { x - mx - lz } else { (x - mx).exp() / z };
                }
            }
        }
        Ok(out)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_masked(a, None)
    }

    /// Softmax over the last axis restricted to entries where `mask` is true;
    /// excluded entries are exactly zero. A row with no allowed entry is an error.
    pub fn softmax_masked(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let data = self.softmax_rows(a, mask, "softmax", false)?;
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.ng(a.0);
        let op = Op::Softmax { input: a.0, mask: mask.map(<[bool]>::to_vec) };
        self.checked("softmax", shape, data, op, ng)
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.log_softmax_masked(a, None)
    }

    /// Log-softmax over the last axis; excluded entries read as zero.
    pub fn log_softmax_masked(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let data = self.softmax_rows(a, mask, "log_softmax", true)?;
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.ng(a.0);
        let op = Op::LogSoftmax { input: a.0, mask: mask.map(<[bool]>::to_vec) };
        self.checked("log_softmax", shape, data, op, ng)
    }

    // ---- pointwise ----

    fn unary(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let na = &self.nodes[a.0];
        let (shape, data) = (na.shape.clone(), na.data.iter().map(|x| f(*x)).collect());
        let ng = self.ng(a.0);
        self.checked(name, shape, data, op, ng)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.nodes[a.0].data.iter().find(|x| !(**x > 0.0)) {
            return Err(Error::NonFinite(format!("log of {bad}")));
        }
        self.unary("log", a, Op::Log(a.0), f64::ln)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, Op::Exp(a.0), f64::exp)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, Op::Relu(a.0), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn elu(&mut self, a: Var) -> Result<Var> {
        self.unary("elu", a, Op::Elu(a.0), |x| if x > 0.0 { x } else { x.exp_m1() })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.unary("leaky_relu", a, Op::LeakyRelu(a.0, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    /// Scales each slice along the last axis to unit L2 norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let na = &self.nodes[a.0];
        let width = *na.shape.last().unwrap_or(&1);
        let mut norms = Vec::with_capacity(na.data.len() / width);
        let mut data = Vec::with_capacity(na.data.len());
        for row in na.data.chunks(width) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < NORM_FLOOR {
                return Err(Error::DegenerateNorm { op: "l2_normalize", norm });
            }
            data.extend(row.iter().map(|x| x / norm));
            norms.push(norm);
        }
        let shape = na.shape.clone();
        let ng = self.ng(a.0);
        self.checked("l2_normalize", shape, data, Op::L2Normalize { input: a.0, norms }, ng)
    }

    /// Inverted dropout. Eval mode returns `a` itself.
    pub fn dropout<R: Rng>(&mut self, a: Var, rate: f64, mode: NormMode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Invalid(format!("dropout rate {rate} outside [0,1)")));
        }
        if mode == NormMode::Eval || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let na = &self.nodes[a.0];
        let scale: Vec<f64> = (0..na.data.len()).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
        let data = na.data.iter().zip(&scale).map(|(x, s)| x * s).collect();
        let shape = na.shape.clone();
        let ng = self.ng(a.0);
        Ok(self.push(shape, data, Op::Dropout { input: a.0, scale }, ng))
    }

    /// Batch normalization over the rows of `x` (batch × features).
    ///
    /// Train mode normalizes with batch statistics and returns the updated
    /// running state; eval mode uses the running state and returns `None`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &NormState,
        mode: NormMode,
    ) -> Result<(Var, Option<NormState>)> {
        let nx = &self.nodes[x.0];
        if nx.shape.len() != 2 {
            return Err(Error::shape("batch_norm", format!("expects batch x features, got {:?}", nx.shape)));
        }
        let (b, f) = (nx.shape[0], nx.shape[1]);
        let (ng_, nb_) = (&self.nodes[gamma.0], &self.nodes[beta.0]);
        if ng_.data.len() != f || nb_.data.len() != f || state.features() != f {
            return Err(Error::shape("batch_norm", format!("{f} features vs gamma/beta/state sizes")));
        }
        let (mean, var, new_state) = match mode {
            NormMode::Train => {
                if b < 2 {
                    return Err(Error::Invalid("batch_norm in train mode needs a batch of at least 2".into()));
                }
                let mut mean = vec![0.0; f];
                for row in nx.data.chunks(f) {
                    mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m /= b as f64);
                let mut var = vec![0.0; f];
                for row in nx.data.chunks(f) {
                    for j in 0..f {
                        let d = row[j] - mean[j];
                        var[j] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= b as f64);
                let unbiased: Vec<f64> = var.iter().map(|v| v * b as f64 / (b - 1) as f64).collect();
                let next = state.updated(&mean, &unbiased);
                (mean, var, Some(next))
            }
            NormMode::Eval => (state.running_mean.clone(), state.running_var.clone(), None),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = Vec::with_capacity(b * f);
        let mut out = Vec::with_capacity(b * f);
        for row in nx.data.chunks(f) {
            for j in 0..f {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(ng_.data[j] * h + nb_.data[j]);
            }
        }
        let ng = self.ng(x.0) || self.ng(gamma.0) || self.ng(beta.0);
        let op = Op::BatchNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, inv_std, train: mode == NormMode::Train };
        let v = self.checked("batch_norm", vec![b, f], out, op, ng)?;
        Ok((v, new_state))
    }

    // ---- reverse sweep ----

    /// Reverse-mode sweep from a one-element `loss`. Returns gradients for the
    /// parameters the loss reaches.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ln = &self.nodes[loss.0];
        if ln.data.len() != 1 {
            return Err(Error::NonScalarLoss(ln.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(i, node, g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn propagate(&self, i: usize, node: &Node, g: Vec<f64>, grads: &mut [Option<Vec<f64>>], out: &mut Gradients) -> Result<()> {
        let nodes = &self.nodes;
        let mut send = |j: usize, contrib: Vec<f64>| {
            debug_assert!(j < i, "tape record {i} consumes later record {j}");
            if nodes[j].needs_grad {
                add_into(&mut grads[j], contrib);
            }
        };
        let wants = |j: usize| nodes[j].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => out.insert(*id, Tensor::new(&node.shape, g)?),
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                for (j, s) in [(*a, 1.0), (*b, sign)] {
                    if wants(j) {
                        let mut c = reduce_broadcast(&g, &node.shape, &nodes[j].shape);
                        if s != 1.0 {
                            c.iter_mut().for_each(|v| *v *= s);
                        }
                        send(j, c);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (na, nb) = (&nodes[*a], &nodes[*b]);
                if na.shape == nb.shape {
                    if wants(*a) {
                        send(*a, g.iter().zip(&nb.data).map(|(x, y)| x * y).collect());
                    }
                    if wants(*b) {
                        send(*b, g.iter().zip(&na.data).map(|(x, y)| x * y).collect());
                    }
                } else {
                    let sa = broadcast_strides(&na.shape, &node.shape);
                    let sb = broadcast_strides(&nb.shape, &node.shape);
                    let mut ga = vec![0.0; na.data.len()];
                    let mut gb = vec![0.0; nb.data.len()];
                    for_each_broadcast(&node.shape, &sa, &sb, |o, ia, ib| {
                        ga[ia] += g[o] * nb.data[ib];
                        gb[ib] += g[o] * na.data[ia];
                    });
                    if wants(*a) {
                        send(*a, ga);
                    }
                    if wants(*b) {
                        send(*b, gb);
                    }
                }
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|v| v * c).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => send(*a, g),
            Op::Neg(a) => send(*a, g.iter().map(|v| -v).collect()),
            Op::MatMul(a, b) => {
                let (na, nb) = (&nodes[*a], &nodes[*b]);
                let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
                if wants(*a) {
                    // dA = G Bᵀ
                    let mut ga = vec![0.0; m * k];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &nb.data[p * n..(p + 1) * n];
                            ga[r * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    send(*a, ga);
                }
                if wants(*b) {
                    // dB = Aᵀ G
                    let mut gb = vec![0.0; k * n];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let arp = na.data[r * k + p];
                            if arp == 0.0 {
                                continue;
                            }
                            gb[p * n..(p + 1) * n].iter_mut().zip(grow).for_each(|(o, x)| *o += arp * x);
                        }
                    }
                    send(*b, gb);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                let mut ga = vec![0.0; r * c];
                for x in 0..r {
                    for y in 0..c {
                        ga[x * c + y] = g[y * r + x];
                    }
                }
                send(*a, ga);
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = axis_split(&node.shape, *axis);
                let mut parts: Vec<Vec<f64>> = inputs.iter().map(|j| Vec::with_capacity(nodes[*j].data.len())).collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (k, j) in inputs.iter().enumerate() {
                        let chunk = nodes[*j].shape[*axis] * inner;
                        parts[k].extend_from_slice(&g[pos..pos + chunk]);
                        pos += chunk;
                    }
                }
                for (j, part) in inputs.iter().zip(parts) {
                    if wants(*j) {
                        send(*j, part);
                    }
                }
            }
            Op::SliceRows { input, start } => {
                let inner = numel(&nodes[*input].shape[1..]);
                let mut ga = vec![0.0; nodes[*input].data.len()];
                ga[start * inner..start * inner + g.len()].copy_from_slice(&g);
                send(*input, ga);
            }
            Op::Gather { input, indices } => {
                let inner = numel(&nodes[*input].shape[1..]);
                let mut ga = vec![0.0; nodes[*input].data.len()];
                for (r, &src) in indices.iter().enumerate() {
                    ga[src * inner..(src + 1) * inner].iter_mut().zip(&g[r * inner..(r + 1) * inner]).for_each(|(o, x)| *o += x);
                }
                send(*input, ga);
            }
            Op::ScatterAdd { input, index } => {
                let inner = numel(&nodes[*input].shape[1..]);
                let mut ga = Vec::with_capacity(nodes[*input].data.len());
                for &r in index {
                    ga.extend_from_slice(&g[r * inner..(r + 1) * inner]);
                }
                send(*input, ga);
            }
            Op::SegmentSoftmax { input, segments } => {
                let y = &node.data;
                let n_seg = segments.iter().max().map_or(0, |m| m + 1);
                let mut dot = vec![0.0; n_seg];
                for ((&s, gy), yy) in segments.iter().zip(&g).zip(y) {
                    dot[s] += gy * yy;
                }
                let ga = segments.iter().zip(&g).zip(y).map(|((&s, gy), yy)| yy * (gy - dot[s])).collect();
                send(*input, ga);
            }
            Op::Sum { input, axis } | Op::Mean { input, axis } => {
                let s = &nodes[*input].shape;
                let (outer, len, inner) = match axis {
                    None => (1, numel(s), 1),
                    Some(ax) => axis_split(s, *ax),
                };
                let scale = if matches!(node.op, Op::Mean { .. }) { 1.0 / len as f64 } else { 1.0 };
                let mut ga = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for k in 0..inner {
                            ga[(o * len + l) * inner + k] = g[o * inner + k] * scale;
                        }
                    }
                }
                send(*input, ga);
            }
            Op::Pick { input, picks } => {
                let mut ga = vec![0.0; nodes[*input].data.len()];
                for (o, &src) in picks.iter().enumerate() {
                    ga[src] += g[o];
                }
                send(*input, ga);
            }
            Op::Sort { input, perm } => {
                let mut ga = vec![0.0; g.len()];
                for (o, &src) in perm.iter().enumerate() {
                    ga[src] += g[o];
                }
                send(*input, ga);
            }
            Op::Softmax { input, mask } => {
                let y = &node.data;
                let width = *node.shape.last().unwrap_or(&1);
                let mut ga = vec![0.0; y.len()];
                for r in 0..y.len() / width {
                    let row = r * width..(r + 1) * width;
                    let dot: f64 = g[row.clone()].iter().zip(&y[row.clone()]).map(|(a, b)| a * b).sum();
                    for k in row {
                        if mask.as_ref().is_none_or(|m| m[k]) {
                            ga[k] = y[k] * (g[k] - dot);
                        }
                    }
                }
                send(*input, ga);
            }
            Op::LogSoftmax { input, mask } => {
                let y = &node.data;
                let width = *node.shape.last().unwrap_or(&1);
                let allowed = |k: usize| mask.as_ref().is_none_or(|m| m[k]);
                let mut ga = vec![0.0; y.len()];
                for r in 0..y.len() / width {
                    let row = r * width..(r + 1) * width;
                    let gsum: f64 = row.clone().filter(|&k| allowed(k)).map(|k| g[k]).sum();
                    for k in row {
                        if allowed(k) {
                            ga[k] = g[k] - y[k].exp() * gsum;
                        }
                    }
                }
                send(*input, ga);
            }
            Op::Log(a) => send(*a, g.iter().zip(&nodes[*a].data).map(|(d, x)| d / x).collect()),
            Op::Exp(a) => send(*a, g.iter().zip(&node.data).map(|(d, y)| d * y).collect()),
            Op::Relu(a) => send(*a, g.iter().zip(&nodes[*a].data).map(|(d, x)| if *x > 0.0 { *d } else { 0.0 }).collect()),
            Op::Elu(a) => send(
                *a,
                g.iter()
                    .zip(&nodes[*a].data)
                    .zip(&node.data)
                    .map(|((d, x), y)| if *x > 0.0 { *d } else { d * (y + 1.0) })
                    .collect(),
            ),
            Op::LeakyRelu(a, slope) => {
                send(*a, g.iter().zip(&nodes[*a].data).map(|(d, x)| if *x > 0.0 { *d } else { d * slope }).collect())
            }
            Op::L2Normalize { input, norms } => {
                let y = &node.data;
                let width = *node.shape.last().unwrap_or(&1);
                let mut ga = vec![0.0; y.len()];
                for (r, norm) in norms.iter().enumerate() {
                    let row = r * width..(r + 1) * width;
                    let dot: f64 = g[row.clone()].iter().zip(&y[row.clone()]).map(|(a, b)| a * b).sum();
                    for k in row {
                        ga[k] = (g[k] - y[k] * dot) / norm;
                    }
                }
                send(*input, ga);
            }
            Op::Dropout { input, scale } => send(*input, g.iter().zip(scale).map(|(d, s)| d * s).collect()),
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let f = inv_std.len();
                let b = xhat.len() / f;
                let gam = &nodes[*gamma].data;
                let mut dgamma = vec![0.0; f];
                let mut dbeta = vec![0.0; f];
                for r in 0..b {
                    for j in 0..f {
                        dgamma[j] += g[r * f + j] * xhat[r * f + j];
                        dbeta[j] += g[r * f + j];
                    }
                }
                if wants(*x) {
                    let mut dx = vec![0.0; b * f];
                    if *train {
                        // dxhat = g * gamma; dx = inv_std/B (B dxhat - Σdxhat - xhat Σ(dxhat xhat))
                        let bf = b as f64;
                        for j in 0..f {
                            let s1 = dbeta[j] * gam[j];
                            let s2 = dgamma[j] * gam[j];
                            for r in 0..b {
                                let dxh = g[r * f + j] * gam[j];
                                dx[r * f + j] = inv_std[j] / bf * (bf * dxh - s1 - xhat[r * f + j] * s2);
                            }
                        }
                    } else {
                        for r in 0..b {
                            for j in 0..f {
                                dx[r * f + j] = g[r * f + j] * gam[j] * inv_std[j];
                            }
                        }
                    }
                    send(*x, dx);
                }
                if wants(*gamma) {
                    send(*gamma, dgamma);
                }
                if wants(*beta) {
                    send(*beta, dbeta);
                }
            }
        }
        Ok(())
    }
}

/// Sums `g` (shaped `out`) down to `target` by undoing broadcasting.
fn reduce_broadcast(g: &[f64], out: &[usize], target: &[usize]) -> Vec<f64> {
    if out == target {
        return g.to_vec();
    }
    let st = broadcast_strides(target, out);
    let zeros = vec![0; out.len()];
    let mut acc = vec![0.0; numel(target)];
    for_each_broadcast(out, &st, &zeros, |o, it, _| acc[it] += g[o]);
    acc
}
