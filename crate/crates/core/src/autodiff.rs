//! Tensor-level reverse-mode automatic differentiation.
//!
//! Every value on the tape is a 2-D array. Sequence tensors of shape
//! `batch × seq_len × hidden` are stored row-major as `(batch·seq_len) × hidden`
//! and the few ops that care about the sequence structure (attention, pooling)
//! carry `batch`/`seq_len` explicitly.
//!
//! Parameters enter the tape by name through [`Graph::param`]. After
//! [`Graph::backward`] the returned [`GradMap`] holds a gradient for exactly the
//! parameters that were registered as trainable on this tape; anything never
//! touched by the forward pass has no entry at all, which is how task-primary
//! gradient routing stays exact.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{s, Array2, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive, NumAssign};

use crate::error::{Error, Result};

/// Floating point scalar usable by the engine (`f32` for training, `f64` for
/// finite-difference verification).
pub trait Real:
    LinalgScalar
    + Float
    + FromPrimitive
    + NumAssign
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Named gradients produced by a backward pass.
pub type GradMap<T> = BTreeMap<String, Array2<T>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulBt(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, T),
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Array2<T>,
        inv_std: Vec<T>,
    },
    Gelu(NodeId),
    MulConst(NodeId, Array2<T>),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<Array2<T>>,
    },
    MeanPool {
        x: NodeId,
        seq: usize,
        weights: Vec<T>,
    },
    L2Normalize {
        x: NodeId,
        norms: Vec<T>,
    },
    InfoNce {
        z: NodeId,
        zp: NodeId,
        tau: T,
        probs: Array2<T>,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<Option<usize>>,
        probs: Array2<T>,
        count: usize,
    },
}

struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single-use computation tape.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, NodeId)>,
    by_name: HashMap<String, NodeId>,
    frozen_prefixes: Vec<String>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            by_name: HashMap::new(),
            frozen_prefixes: Vec::new(),
        }
    }

    /// Parameters whose name starts with `prefix` enter the tape as constants.
    pub fn freeze_prefix(&mut self, prefix: impl Into<String>) {
        self.frozen_prefixes.push(prefix.into());
    }

    fn is_frozen(&self, name: &str) -> bool {
        self.frozen_prefixes
            .iter()
            .any(|p| name.starts_with(p.as_str()))
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &Array2<T> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> T {
        self.nodes[id.0].value[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Array2<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Registers a named parameter. Registering the same name twice returns
    /// the original node so shared weights accumulate one gradient.
    pub fn param(&mut self, name: &str, value: &Array2<T>) -> NodeId {
        if let Some(&id) = self.by_name.get(name) {
            return id;
        }
        let trainable = !self.is_frozen(name);
        let id = self.push(value.clone(), Op::Leaf, trainable);
        self.by_name.insert(name.to_string(), id);
        if trainable {
            self.params.push((name.to_string(), id));
        }
        id
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.nrows() {
            return Err(Error::shape(format!(
                "matmul {:?} x {:?}",
                av.dim(),
                bv.dim()
            )));
        }
        let out = av.dot(bv);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`, the layout used by every linear map (weights are `out × in`).
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.ncols() {
            return Err(Error::shape(format!(
                "matmul_bt {:?} x {:?}ᵀ",
                av.dim(),
                bv.dim()
            )));
        }
        let out = av.dot(&bv.t());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMulBt(a, b), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dim() != bv.dim() {
            return Err(Error::shape(format!("add {:?} + {:?}", av.dim(), bv.dim())));
        }
        let out = av + bv;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a `1 × m` row vector to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.nrows() != 1 || rv.ncols() != av.ncols() {
            return Err(Error::shape(format!(
                "add_row {:?} + {:?}",
                av.dim(),
                rv.dim()
            )));
        }
        let out = av + rv;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let out = self.value(a) * c;
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tv = self.value(table);
        let (rows, cols) = tv.dim();
        let mut out = Array2::zeros((ids.len(), cols));
        for (r, &id) in ids.iter().enumerate() {
            if id >= rows {
                return Err(Error::shape(format!("gather index {id} >= {rows}")));
            }
            out.row_mut(r).assign(&tv.row(id));
        }
        let rg = self.rg(table);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: T) -> NodeId {
        let xv = self.value(x);
        let n = T::from_usize(xv.ncols()).unwrap();
        let mut xhat = Array2::zeros(xv.dim());
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for (r, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (c, &v) in row.iter().enumerate() {
                xhat[[r, c]] = (v - mean) * is;
            }
        }
        let out = &xhat * self.value(gain) + self.value(bias);
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let c = T::lit(GELU_C);
        let k = T::lit(0.044715);
        let half = T::lit(0.5);
        let out = self
            .value(x)
            .mapv(|v| half * v * (T::one() + (c * (v + k * v * v * v)).tanh()));
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Elementwise product with a constant array (dropout masks).
    pub fn mul_const(&mut self, x: NodeId, mask: Array2<T>) -> Result<NodeId> {
        if self.value(x).dim() != mask.dim() {
            return Err(Error::shape("mul_const mask shape"));
        }
        let out = self.value(x) * &mask;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MulConst(x, mask), rg))
    }

    /// Multi-head scaled dot-product self-attention over `(batch·seq) × hidden`
    /// projections. `key_mask[b·seq + s]` excludes padded keys.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
        key_mask: &[bool],
    ) -> Result<NodeId> {
        let hidden = self.value(q).ncols();
        if !hidden.is_multiple_of(heads) || self.value(q).nrows() != batch * seq {
            return Err(Error::shape("attention dims"));
        }
        let dh = hidden / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = Array2::zeros((batch * seq, hidden));
        let mut probs = Vec::with_capacity(batch * heads);
        for b in 0..batch {
            let rows = b * seq..(b + 1) * seq;
            let mask = &key_mask[rows.clone()];
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qs = qv.slice(s![rows.clone(), cols.clone()]);
                let ks = kv.slice(s![rows.clone(), cols.clone()]);
                let vs = vv.slice(s![rows.clone(), cols.clone()]);
                let mut p = qs.dot(&ks.t()) * scale;
                masked_softmax_rows(&mut p, mask);
                out.slice_mut(s![rows.clone(), cols.clone()])
                    .assign(&p.dot(&vs));
                probs.push(p);
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Masked mean over the sequence axis: `(batch·seq) × h → batch × h`.
    pub fn mean_pool(&mut self, x: NodeId, seq: usize, mask: &[u8]) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.nrows() != mask.len() || seq == 0 || !mask.len().is_multiple_of(seq) {
            return Err(Error::shape("mean_pool mask length"));
        }
        let batch = mask.len() / seq;
        let mut weights = vec![T::zero(); mask.len()];
        let mut out = Array2::zeros((batch, xv.ncols()));
        for b in 0..batch {
            let count = mask[b * seq..(b + 1) * seq]
                .iter()
                .filter(|&&m| m != 0)
                .count();
            if count == 0 {
                return Err(Error::EmptySequence(b));
            }
            let w = T::one() / T::from_usize(count).unwrap();
            for s_ in 0..seq {
                let i = b * seq + s_;
                if mask[i] != 0 {
                    weights[i] = w;
                    out.row_mut(b).scaled_add(w, &xv.row(i));
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::MeanPool { x, seq, weights }, rg))
    }

    /// Row-wise L2 normalisation. Fails on rows with norm `<= eps`.
    pub fn l2_normalize(&mut self, x: NodeId, eps: T) -> Result<NodeId> {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.nrows());
        for mut row in out.rows_mut() {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(n > eps) {
                return Err(Error::DegenerateEmbedding(n.as_f64()));
            }
            row.mapv_inplace(|v| v / n);
            norms.push(n);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::L2Normalize { x, norms }, rg))
    }

    /// InfoNCE with in-batch negatives over `z` (anchors) and `zp` (positives).
    /// Expects row-normalised inputs.
    pub fn info_nce(&mut self, z: NodeId, zp: NodeId, tau: T) -> Result<NodeId> {
        let (zv, pv) = (self.value(z), self.value(zp));
        if zv.dim() != pv.dim() {
            return Err(Error::shape("info_nce anchor/positive shapes differ"));
        }
        if zv.nrows() == 0 {
            return Err(Error::EmptyBatch);
        }
        let mut probs = zv.dot(&pv.t()) / tau;
        let loss = stable_nce_rows(&mut probs);
        let rg = self.rg(z) || self.rg(zp);
        Ok(self.push(
            Array2::from_elem((1, 1), loss),
            Op::InfoNce { z, zp, tau, probs },
            rg,
        ))
    }

    /// Mean cross-entropy over the rows whose label is `Some`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[Option<usize>]) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.nrows() != labels.len() {
            return Err(Error::shape("cross_entropy labels length"));
        }
        let k = lv.ncols();
        let mut probs = lv.clone();
        let mut total = T::zero();
        let mut count = 0usize;
        for (mut row, label) in probs.rows_mut().into_iter().zip(labels) {
            log_softmax_inplace(&mut row);
            if let Some(y) = *label {
                if y >= k {
                    return Err(Error::shape(format!("label {y} >= num classes {k}")));
                }
                total -= row[y];
                count += 1;
            }
            row.mapv_inplace(|v| v.exp());
        }
        if count == 0 {
            return Err(Error::EmptySupervision);
        }
        let loss = total / T::from_usize(count).unwrap();
        let rg = self.rg(logits);
        Ok(self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Reverse pass from a `1 × 1` output.
    pub fn backward(&self, output: NodeId) -> GradMap<T> {
        let mut grads: Vec<Option<Array2<T>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Array2::from_elem(
            self.nodes[output.0].value.dim(),
            T::one(),
        ));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }

        self.params
            .iter()
            .filter(|(_, id)| id.0 <= output.0)
            .filter_map(|(name, id)| grads[id.0].take().map(|g| (name.clone(), g)))
            .collect()
    }

    fn accumulate(&self, grads: &mut [Option<Array2<T>>], id: NodeId, delta: Array2<T>) {
        if !self.rg(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Array2<T>, grads: &mut [Option<Array2<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulBt(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.dot(self.value(*b)));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*row) {
                    self.accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g * *c),
            Op::Gather { table, ids } => {
                if self.rg(*table) {
                    let mut d = Array2::zeros(self.value(*table).dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut dst = d.row_mut(id);
                        dst += &g.row(r);
                    }
                    self.accumulate(grads, *table, d);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                if self.rg(*gain) {
                    let dg = (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *gain, dg);
                }
                if self.rg(*bias) {
                    self.accumulate(grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.rg(*x) {
                    let gv = self.value(*gain);
                    let n = T::from_usize(xhat.ncols()).unwrap();
                    let mut dx = g * gv;
                    for (r, mut row) in dx.rows_mut().into_iter().enumerate() {
                        let xr = xhat.row(r);
                        let sum_d = row.sum();
                        let sum_dx = row.iter().zip(xr.iter()).map(|(&a, &b)| a * b).sum::<T>();
                        let is = inv_std[r];
                        Zip::from(&mut row).and(&xr).for_each(|d, &xh| {
                            *d = is / n * (n * *d - sum_d - xh * sum_dx);
                        });
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Gelu(x) => {
                let c = T::lit(GELU_C);
                let k = T::lit(0.044715);
                let half = T::lit(0.5);
                let three = T::lit(3.0);
                let mut dx = self.value(*x).mapv(|v| {
                    let t = (c * (v + k * v * v * v)).tanh();
                    half * (T::one() + t)
                        + half * v * (T::one() - t * t) * c * (T::one() + three * k * v * v)
                });
                dx *= g;
                self.accumulate(grads, *x, dx);
            }
            Op::MulConst(x, mask) => self.accumulate(grads, *x, g * mask),
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let hidden = qv.ncols();
                let dh = hidden / heads;
                let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
                let mut dq = Array2::zeros(qv.dim());
                let mut dk = Array2::zeros(kv.dim());
                let mut dv = Array2::zeros(vv.dim());
                for b in 0..*batch {
                    let rows = b * seq..(b + 1) * seq;
                    for h in 0..*heads {
                        let cols = h * dh..(h + 1) * dh;
                        let p = &probs[b * heads + h];
                        let go = g.slice(s![rows.clone(), cols.clone()]);
                        let qs = qv.slice(s![rows.clone(), cols.clone()]);
                        let ks = kv.slice(s![rows.clone(), cols.clone()]);
                        let vs = vv.slice(s![rows.clone(), cols.clone()]);
                        dv.slice_mut(s![rows.clone(), cols.clone()])
                            .assign(&p.t().dot(&go));
                        let dp = go.dot(&vs.t());
                        let ds = softmax_backward(p, &dp) * scale;
                        dq.slice_mut(s![rows.clone(), cols.clone()])
                            .assign(&ds.dot(&ks));
                        dk.slice_mut(s![rows.clone(), cols.clone()])
                            .assign(&ds.t().dot(&qs));
                    }
                }
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::MeanPool { x, seq, weights } => {
                let mut dx = Array2::zeros(self.value(*x).dim());
                for (i, &w) in weights.iter().enumerate() {
                    if w != T::zero() {
                        dx.row_mut(i).scaled_add(w, &g.row(i / seq));
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::L2Normalize { x, norms } => {
                let y = &node.value;
                let mut dx = g.clone();
                for (r, mut row) in dx.rows_mut().into_iter().enumerate() {
                    let yr = y.row(r);
                    let dot = yr
                        .iter()
                        .zip(g.row(r).iter())
                        .map(|(&a, &b)| a * b)
                        .sum::<T>();
                    let n = norms[r];
                    Zip::from(&mut row)
                        .and(&yr)
                        .for_each(|d, &yv| *d = (*d - yv * dot) / n);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::InfoNce { z, zp, tau, probs } => {
                let bsz = probs.nrows();
                let upstream = g[[0, 0]];
                let mut ds = probs.clone();
                for i in 0..bsz {
                    ds[[i, i]] -= T::one();
                }
                let c = upstream / (T::from_usize(bsz).unwrap() * *tau);
                ds *= c;
                if self.rg(*z) {
                    self.accumulate(grads, *z, ds.dot(self.value(*zp)));
                }
                if self.rg(*zp) {
                    self.accumulate(grads, *zp, ds.t().dot(self.value(*z)));
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                count,
            } => {
                let c = g[[0, 0]] / T::from_usize(*count).unwrap();
                let mut d = probs.clone();
                for (mut row, label) in d.rows_mut().into_iter().zip(labels) {
                    match label {
                        Some(y) => {
                            row[*y] -= T::one();
                            row.mapv_inplace(|v| v * c);
                        }
                        None => row.fill(T::zero()),
                    }
                }
                self.accumulate(grads, *logits, d);
            }
        }
    }
}

fn masked_softmax_rows<T: Real>(scores: &mut Array2<T>, key_mask: &[bool]) {
    for mut row in scores.rows_mut() {
        let mut max = T::neg_infinity();
        for (j, &v) in row.iter().enumerate() {
            if key_mask[j] && v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for (j, v) in row.iter_mut().enumerate() {
            if key_mask[j] {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = T::zero();
            }
        }
        if sum > T::zero() {
            row.mapv_inplace(|v| v / sum);
        }
    }
}

/// `dS = P ⊙ (dP − rowsum(dP ⊙ P))`.
fn softmax_backward<T: Real>(p: &Array2<T>, dp: &Array2<T>) -> Array2<T> {
    let mut ds = dp.clone();
    for (r, mut row) in ds.rows_mut().into_iter().enumerate() {
        let pr = p.row(r);
        let dot = row.iter().zip(pr.iter()).map(|(&a, &b)| a * b).sum::<T>();
        Zip::from(&mut row)
            .and(&pr)
            .for_each(|d, &pv| *d = pv * (*d - dot));
    }
    ds
}

/// In-place log-softmax of one row; returns the log-sum-exp.
fn log_softmax_inplace<T: Real>(row: &mut ndarray::ArrayViewMut1<T>) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let ln_sum = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
    row.mapv_inplace(|v| (v - max) - ln_sum);
    max + ln_sum
}

/// Converts a similarity matrix into row softmax probabilities in place and
/// returns the mean diagonal negative log-likelihood.
pub(crate) fn stable_nce_rows<T: Real>(sims: &mut Array2<T>) -> T {
    let n = sims.nrows();
    let mut total = T::zero();
    for (i, mut row) in sims.rows_mut().into_iter().enumerate() {
        log_softmax_inplace(&mut row);
        total -= row[i];
        row.mapv_inplace(|v| v.exp());
    }
    total / T::from_usize(n).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn numeric_grad<F: Fn(&Array2<f64>) -> f64>(f: F, x: &Array2<f64>) -> Array2<f64> {
        let eps = 1e-6;
        let mut g = Array2::zeros(x.dim());
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                let mut xp = x.clone();
                xp[[i, j]] += eps;
                let mut xm = x.clone();
                xm[[i, j]] -= eps;
                g[[i, j]] = (f(&xp) - f(&xm)) / (2.0 * eps);
            }
        }
        g
    }

    fn assert_close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) {
        for (x, y) in a.iter().zip(b.iter()) {
            assert!(
                (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())),
                "{x} vs {y}"
            );
        }
    }

    #[test]
    fn matmul_and_layer_norm_grads() {
        let x0 = array![[0.3, -1.2, 0.5], [1.1, 0.4, -0.7]];
        let w = array![[0.2, 0.1, -0.3], [0.5, -0.4, 0.9], [0.05, 0.3, 0.2]];
        let f = |x: &Array2<f64>| {
            let mut g = Graph::new();
            let xn = g.param("x", x);
            let wn = g.constant(w.clone());
            let y = g.matmul_bt(xn, wn).unwrap();
            let gain = g.constant(array![[1.0, 2.0, 0.5]]);
            let bias = g.constant(array![[0.1, 0.0, -0.1]]);
            let ln = g.layer_norm(y, gain, bias, 1e-12);
            let act = g.gelu(ln);
            let prod = g
                .mul_const(act, array![[0.3, -0.2, 0.7], [0.1, 0.9, -0.5]])
                .unwrap();
            let pooled = g.mean_pool(prod, 2, &[1, 1]).unwrap();
            let labels = [Some(1usize)];
            let loss = g.cross_entropy(pooled, &labels).unwrap();
            (g.scalar(loss), g.backward(loss))
        };
        let (_, grads) = f(&x0);
        let num = numeric_grad(|x| f(x).0, &x0);
        assert_close(&grads["x"], &num, 1e-6);
    }

    #[test]
    fn attention_grad_matches_finite_difference() {
        let q0 = array![
            [0.1, 0.4, -0.3, 0.2],
            [0.5, -0.2, 0.3, 0.1],
            [-0.4, 0.2, 0.6, -0.1],
            [0.3, 0.3, -0.2, 0.4]
        ];
        let mask = [true, true, true, false];
        let k0 = q0.mapv(|v| v * 0.7 + 0.1);
        let v0 = q0.mapv(|v| (v * 3.0).sin());
        let f = |q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>| {
            let mut g = Graph::new();
            let qn = g.param("q", q);
            let kn = g.param("k", k);
            let vn = g.param("v", v);
            let a = g.attention(qn, kn, vn, 2, 2, 2, &mask).unwrap();
            let z = g.l2_normalize(a, 1e-12).unwrap();
            let w = g.constant(array![[1.0, -0.5, 0.25, 2.0]]);
            let y = g.matmul_bt(z, w).unwrap();
            let out = g.mean_pool(y, 4, &[1, 1, 1, 0]).unwrap();
            (g.scalar(out), g.backward(out))
        };
        let (_, grads) = f(&q0, &k0, &v0);
        assert_close(&grads["q"], &numeric_grad(|x| f(x, &k0, &v0).0, &q0), 1e-6);
        assert_close(&grads["k"], &numeric_grad(|x| f(&q0, x, &v0).0, &k0), 1e-6);
        assert_close(&grads["v"], &numeric_grad(|x| f(&q0, &k0, x).0, &v0), 1e-6);
    }

    #[test]
    fn info_nce_grad_matches_finite_difference() {
        let z0 = array![[0.3, 0.4, -0.2], [0.1, -0.6, 0.2], [0.7, 0.1, 0.1]];
        let p = array![[0.2, 0.5, -0.1], [0.0, -0.4, 0.3], [0.5, 0.3, -0.2]];
        let f = |z: &Array2<f64>| {
            let mut g = Graph::new();
            let zn = g.param("z", z);
            let pn = g.param("p", &p);
            let zz = g.l2_normalize(zn, 1e-12).unwrap();
            let pp = g.l2_normalize(pn, 1e-12).unwrap();
            let l = g.info_nce(zz, pp, 0.5).unwrap();
            (g.scalar(l), g.backward(l))
        };
        let (_, grads) = f(&z0);
        assert_close(&grads["z"], &numeric_grad(|x| f(x).0, &z0), 1e-6);
    }

    #[test]
    fn unreached_params_get_no_gradient() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.param("a", &array![[1.0]]);
        let _b = g.param("b", &array![[2.0]]);
        let y = g.scale(a, 3.0);
        let grads = g.backward(y);
        assert_eq!(grads["a"][[0, 0]], 3.0);
        assert!(!grads.contains_key("b"));
    }

    #[test]
    fn frozen_prefix_becomes_constant() {
        let mut g: Graph<f64> = Graph::new();
        g.freeze_prefix("enc.");
        let a = g.param("enc.w", &array![[1.0]]);
        let b = g.param("head.w", &array![[2.0]]);
        let y = g.matmul(a, b).unwrap();
        let grads = g.backward(y);
        assert!(!grads.contains_key("enc.w"));
        assert_eq!(grads["head.w"][[0, 0]], 1.0);
    }
}
