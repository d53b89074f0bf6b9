//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Forward code appends nodes to a [`Tape`]; [`Tape::backward`] then walks the
//! nodes in reverse order, accumulating adjoints. Tap nodes are identity
//! operations (up to interventions) registered under a [`TapKey`], so one
//! backward sweep yields the derivative of the output with respect to every
//! tapped neuron at every position.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::neuron::TapKey;
use crate::tensor::{gelu, gelu_grad, gemm, softmax_into, Tensor};

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A contiguous run of rows forming one causal sequence inside a batched matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct AttentionShape {
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// `a · b`
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    /// Identity except at the overridden flat indices, which hold constants.
    Tap(Var, Vec<usize>),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SelectRows(Var, Vec<usize>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<Segment>,
        shape: AttentionShape,
        /// Attention weights per (segment, head), each `len × len` row-major.
        probs: Vec<Vec<f64>>,
    },
    /// Probability of the picked column of each row's softmax.
    SoftmaxPick(Var, Vec<usize>),
    /// Mean cross-entropy of rows against target columns.
    CrossEntropy(Var, Vec<usize>, f64),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records primitive applications in topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    taps: BTreeMap<TapKey, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is accumulated.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = crate::tensor::matmul(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`, e.g. activations `[rows × d]` times a weight stored `[out × d]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = crate::tensor::matmul_t(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMulT(a, b), ng))
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension(format!(
                "elementwise operands {sa:?} and {sb:?} differ"
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::from_parts(self.value(a).shape().to_vec(), data);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::from_parts(self.value(a).shape().to_vec(), data);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let x = self.value(a);
        let out = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|v| v * factor).collect());
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, factor), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| gelu(v)).collect());
        let ng = self.needs(a);
        self.push(out, Op::Gelu(a), ng)
    }

    /// Registers `a` as the tap site `key`. Entries listed in `overrides`
    /// (flat index, value) are replaced by constants: this is how masking
    /// and point interventions are applied.
    pub fn tap(&mut self, key: TapKey, a: Var, overrides: &[(usize, f64)]) -> Result<Var> {
        if self.taps.contains_key(&key) {
            return Err(Error::Config(format!(
                "tap site layer {} {} registered twice",
                key.layer, key.family
            )));
        }
        let mut value = self.value(a).clone();
        let len = value.len();
        let mut fixed = Vec::with_capacity(overrides.len());
        for &(i, v) in overrides {
            if i >= len {
                return Err(Error::Dimension(format!(
                    "tap override index {i} outside {len} values"
                )));
            }
            value.data_mut()[i] = v;
            fixed.push(i);
        }
        let var = self.push(value, Op::Tap(a, fixed), true);
        self.taps.insert(key, var);
        Ok(var)
    }

    pub fn tap_var(&self, key: TapKey) -> Option<Var> {
        self.taps.get(&key).copied()
    }

    pub fn taps(&self) -> impl Iterator<Item = (TapKey, Var)> + '_ {
        self.taps.iter().map(|(k, v)| (*k, *v))
    }

    /// Row lookup: output row `r` is `table[ids[r]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (n, c) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= n {
                return Err(Error::Dimension(format!("gather row {id} of {n}")));
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::from_parts(vec![ids.len(), c], data);
        let ng = self.needs(table);
        Ok(self.push(out, Op::Gather { table, ids: ids.to_vec() }, ng))
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let out = {
            let t = self.value(a);
            let mut data = Vec::with_capacity(rows.len() * t.cols());
            for &r in rows {
                if r >= t.rows() {
                    return Err(Error::Dimension(format!("row {r} of {}", t.rows())));
                }
                data.extend_from_slice(t.row(r));
            }
            Tensor::from_parts(vec![rows.len(), t.cols()], data)
        };
        let ng = self.needs(a);
        Ok(self.push(out, Op::SelectRows(a, rows.to_vec()), ng))
    }

    /// Causal scaled dot-product attention with grouped key/value heads.
    /// `q` is `[rows × heads·head_dim]`, `k` and `v` are `[rows × kv_heads·head_dim]`.
    pub(crate) fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        shape: AttentionShape,
    ) -> Result<Var> {
        let AttentionShape {
            heads,
            kv_heads,
            head_dim,
        } = shape;
        if kv_heads == 0 || heads % kv_heads != 0 {
            return Err(Error::Config(format!(
                "{kv_heads} key/value heads cannot serve {heads} query heads"
            )));
        }
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let rows = qt.rows();
        if qt.cols() != heads * head_dim
            || kt.cols() != kv_heads * head_dim
            || vt.cols() != kv_heads * head_dim
            || kt.rows() != rows
            || vt.rows() != rows
        {
            return Err(Error::Dimension(format!(
                "attention operands q {:?}, k {:?}, v {:?}",
                qt.shape(),
                kt.shape(),
                vt.shape()
            )));
        }
        let group = heads / kv_heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut out = vec![0.0; rows * heads * head_dim];
        let mut probs = Vec::with_capacity(segments.len() * heads);
        let mut scores = Vec::new();
        for seg in segments {
            let n = seg.len;
            for h in 0..heads {
                let g = h / group;
                let mut alpha = vec![0.0; n * n];
                for i in 0..n {
                    let qi = &qt.row(seg.start + i)[h * head_dim..(h + 1) * head_dim];
                    scores.clear();
                    for j in 0..=i {
                        let kj = &kt.row(seg.start + j)[g * head_dim..(g + 1) * head_dim];
                        let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                        scores.push(scale * dot);
                    }
                    softmax_into(&scores, &mut alpha[i * n..i * n + i + 1]);
                    let orow = &mut out[(seg.start + i) * heads * head_dim + h * head_dim..][..head_dim];
                    for j in 0..=i {
                        let a = alpha[i * n + j];
                        let vj = &vt.row(seg.start + j)[g * head_dim..(g + 1) * head_dim];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += a * x;
                        }
                    }
                }
                probs.push(alpha);
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        let value = Tensor::from_parts(vec![rows, heads * head_dim], out);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                shape,
                probs,
            },
            ng,
        ))
    }

    /// For each row `r`, the softmax probability of column `picks[r]`. Output shape `[rows]`.
    pub fn softmax_pick(&mut self, logits: Var, picks: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if picks.len() != t.rows() || picks.iter().any(|&p| p >= t.cols()) {
            return Err(Error::Dimension(format!(
                "cannot pick {} columns from logits {:?}",
                picks.len(),
                t.shape()
            )));
        }
        let mut out = Vec::with_capacity(picks.len());
        let mut buf = vec![0.0; t.cols()];
        for (r, &p) in picks.iter().enumerate() {
            softmax_into(t.row(r), &mut buf);
            out.push(buf[p]);
        }
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::from_parts(vec![picks.len()], out),
            Op::SoftmaxPick(logits, picks.to_vec()),
            ng,
        ))
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.cross_entropy_smoothed(logits, targets, 0.0)
    }

    /// Mean cross-entropy against targets mixed with `eps` of the uniform distribution.
    pub fn cross_entropy_smoothed(&mut self, logits: Var, targets: &[usize], eps: f64) -> Result<Var> {
        let t = self.value(logits);
        if targets.len() != t.rows() || targets.is_empty() || targets.iter().any(|&p| p >= t.cols()) {
            return Err(Error::Dimension(format!(
                "{} targets for logits {:?}",
                targets.len(),
                t.shape()
            )));
        }
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::Range(format!("label smoothing {eps} is outside [0, 1)")));
        }
        let mut loss = 0.0;
        for (r, &y) in targets.iter().enumerate() {
            let row = t.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            loss += lse - (1.0 - eps) * row[y] - eps * mean;
        }
        loss /= targets.len() as f64;
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy(logits, targets.to_vec(), eps),
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if output.0 >= self.nodes.len() {
            return Err(Error::InvalidHandle(output.0));
        }
        if self.value(output).len() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(&node.op, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, op: &Op, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let accumulate = |v: Var, delta: Tensor, grads: &mut [Option<Tensor>]| {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let mut d = vec![0.0; av.len()];
                    gemm(g, false, bv, true, &mut d, false);
                    accumulate(*a, Tensor::from_parts(av.shape().to_vec(), d), grads);
                }
                if self.needs(*b) {
                    let mut d = vec![0.0; bv.len()];
                    gemm(av, true, g, false, &mut d, false);
                    accumulate(*b, Tensor::from_parts(bv.shape().to_vec(), d), grads);
                }
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let mut d = vec![0.0; av.len()];
                    gemm(g, false, bv, false, &mut d, false);
                    accumulate(*a, Tensor::from_parts(av.shape().to_vec(), d), grads);
                }
                if self.needs(*b) {
                    let mut d = vec![0.0; bv.len()];
                    gemm(g, true, av, false, &mut d, false);
                    accumulate(*b, Tensor::from_parts(bv.shape().to_vec(), d), grads);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(*v) {
                        accumulate(*v, g.clone(), grads);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                    accumulate(*a, Tensor::from_parts(av.shape().to_vec(), d), grads);
                }
                if self.needs(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(g, x)| g * x).collect();
                    accumulate(*b, Tensor::from_parts(bv.shape().to_vec(), d), grads);
                }
            }
            Op::Scale(a, f) => {
                if self.needs(*a) {
                    let d = g.data().iter().map(|v| v * f).collect();
                    accumulate(*a, Tensor::from_parts(g.shape().to_vec(), d), grads);
                }
            }
            Op::Gelu(a) => {
                if self.needs(*a) {
                    let x = self.value(*a);
                    let d = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(g, &x)| g * gelu_grad(x))
                        .collect();
                    accumulate(*a, Tensor::from_parts(x.shape().to_vec(), d), grads);
                }
            }
            Op::Tap(a, fixed) => {
                if self.needs(*a) {
                    let mut d = g.clone();
                    for &i in fixed {
                        d.data_mut()[i] = 0.0;
                    }
                    accumulate(*a, d, grads);
                }
            }
            Op::Gather { table, ids } => {
                if self.needs(*table) {
                    let t = self.value(*table);
                    let mut d = Tensor::zeros(t.shape());
                    for (r, &id) in ids.iter().enumerate() {
                        for (x, y) in d.row_mut(id).iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                    accumulate(*table, d, grads);
                }
            }
            Op::SelectRows(a, rows) => {
                if self.needs(*a) {
                    let t = self.value(*a);
                    let mut d = Tensor::zeros(t.shape());
                    for (r, &src) in rows.iter().enumerate() {
                        for (x, y) in d.row_mut(src).iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                    accumulate(*a, d, grads);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                shape,
                probs,
            } => {
                let (dq, dk, dv) = self.attention_backward(*q, *k, *v, segments, shape, probs, g);
                if self.needs(*q) {
                    accumulate(*q, dq, grads);
                }
                if self.needs(*k) {
                    accumulate(*k, dk, grads);
                }
                if self.needs(*v) {
                    accumulate(*v, dv, grads);
                }
            }
            Op::SoftmaxPick(a, picks) => {
                if self.needs(*a) {
                    let t = self.value(*a);
                    let mut d = Tensor::zeros(t.shape());
                    let mut p = vec![0.0; t.cols()];
                    for (r, &y) in picks.iter().enumerate() {
                        softmax_into(t.row(r), &mut p);
                        let py = p[y];
                        let gr = g.data()[r];
                        let drow = d.row_mut(r);
                        for (c, x) in drow.iter_mut().enumerate() {
                            let onehot = if c == y { 1.0 } else { 0.0 };
                            *x = gr * py * (onehot - p[c]);
                        }
                    }
                    accumulate(*a, d, grads);
                }
            }
            Op::CrossEntropy(a, targets, eps) => {
                if self.needs(*a) {
                    let t = self.value(*a);
                    let mut d = Tensor::zeros(t.shape());
                    let scale = g.data()[0] / targets.len() as f64;
                    let spread = eps / t.cols() as f64;
                    for (r, &y) in targets.iter().enumerate() {
                        let drow = d.row_mut(r);
                        softmax_into(t.row(r), drow);
                        drow.iter_mut().for_each(|x| *x -= spread);
                        drow[y] -= 1.0 - eps;
                        drow.iter_mut().for_each(|x| *x *= scale);
                    }
                    accumulate(*a, d, grads);
                }
            }
            Op::Sum(a) => {
                if self.needs(*a) {
                    let t = self.value(*a);
                    let d = Tensor::from_parts(t.shape().to_vec(), vec![g.data()[0]; t.len()]);
                    accumulate(*a, d, grads);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        shape: &AttentionShape,
        probs: &[Vec<f64>],
        g: &Tensor,
    ) -> (Tensor, Tensor, Tensor) {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let AttentionShape {
            heads,
            kv_heads,
            head_dim,
        } = *shape;
        let group = heads / kv_heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut dq = Tensor::zeros(qt.shape());
        let mut dk = Tensor::zeros(kt.shape());
        let mut dv = Tensor::zeros(vt.shape());
        let mut dalpha = Vec::new();
        for (s, seg) in segments.iter().enumerate() {
            let n = seg.len;
            for h in 0..heads {
                let gkv = h / group;
                let alpha = &probs[s * heads + h];
                let qcols = h * head_dim..(h + 1) * head_dim;
                let kcols = gkv * head_dim..(gkv + 1) * head_dim;
                for i in 0..n {
                    let ri = seg.start + i;
                    let go = &g.row(ri)[qcols.clone()];
                    dalpha.clear();
                    for j in 0..=i {
                        let rj = seg.start + j;
                        let a = alpha[i * n + j];
                        let vj = &vt.row(rj)[kcols.clone()];
                        dalpha.push(go.iter().zip(vj).map(|(x, y)| x * y).sum::<f64>());
                        for (d, x) in dv.row_mut(rj)[kcols.clone()].iter_mut().zip(go) {
                            *d += a * x;
                        }
                    }
                    let inner: f64 = (0..=i).map(|j| alpha[i * n + j] * dalpha[j]).sum();
                    for j in 0..=i {
                        let rj = seg.start + j;
                        let ds = alpha[i * n + j] * (dalpha[j] - inner) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &kt.row(rj)[kcols.clone()];
                        for (d, x) in dq.row_mut(ri)[qcols.clone()].iter_mut().zip(kj) {
                            *d += ds * x;
                        }
                        let qi = &qt.row(ri)[qcols.clone()];
                        for (d, x) in dk.row_mut(rj)[kcols.clone()].iter_mut().zip(qi) {
                            *d += ds * x;
                        }
                    }
                }
            }
        }
        (dq, dk, dv)
    }
}

/// Adjoints produced by one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, with zeros when no path reached it.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}

/// Gradient of `output` with respect to every registered tap, as
/// `[positions × width]` matrices. Taps without a path to the output get zeros.
pub fn reverse_sweep(tape: &Tape, output: Var) -> Result<BTreeMap<TapKey, Tensor>> {
    let grads = tape.backward(output)?;
    Ok(tape
        .taps()
        .map(|(key, var)| (key, grads.wrt(tape, var)))
        .collect())
}

/// Central difference `(f(at + step) − f(at − step)) / (2·step)`.
pub fn finite_difference_gradient<F>(mut f: F, at: f64, step: f64) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::Config(format!("finite-difference step {step} must be positive")));
    }
    let hi = f(at + step)?;
    let lo = f(at - step)?;
    if !hi.is_finite() || !lo.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite evaluation around {at}: f(+)={hi}, f(-)={lo}"
        )));
    }
    Ok((hi - lo) / (2.0 * step))
}
