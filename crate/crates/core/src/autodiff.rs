//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in execution order. Each node keeps its
//! forward value and whatever the backward rule needs (inputs are read back from
//! their nodes, extra intermediates are stored in the [`Op`] variant).
//! [`Graph::backward`] walks the tape in reverse and returns a gradient per
//! node; [`Graph::backward_into`] additionally adds the parameter-leaf gradients
//! into a [`ParamStore`], so repeated calls accumulate until
//! [`ParamStore::zero_grad`].

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::params::{GradSet, ParamId, ParamStore};
use crate::tensor::{axis_split, matmul_raw, transpose_raw, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Square(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Transpose(Var),
    Reshape(Var),
    GatherRows { table: Var, ids: Vec<usize> },
    ScatterRows { pieces: Vec<(Var, Vec<usize>)> },
    Pick { x: Var, idx: Vec<usize> },
    SegmentMax { x: Var, argmax: Vec<usize> },
    SegmentMean { x: Var, segments: Vec<(usize, usize)> },
    Sum(Var),
    WeightedSum { x: Var, weights: Vec<f64> },
    BceWithLogits { z: Var, labels: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Recorded computation. Build one per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_leaves: BTreeMap<ParamId, Var>,
    decisions: Vec<usize>,
}

/// Gradients of one scalar with respect to every node of a [`Graph`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free leaf that receives gradients (not tied to a parameter store).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter. Registering the same id twice returns
    /// the same node. Non-trainable parameters become constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_leaves.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.nodes[v.0].param = Some(id);
        self.param_leaves.insert(id, v);
        v
    }

    /// Records discrete choices made outside the tape (e.g. expert routing)
    /// so they take part in [`Graph::kink_signature`].
    pub fn record_decisions(&mut self, choices: &[usize]) {
        self.decisions.extend_from_slice(choices);
    }

    /// Hash of every non-smooth choice in the forward pass: ReLU sign
    /// patterns, max-pool argmaxes and recorded decisions. Two evaluations
    /// with the same signature lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.decisions.hash(&mut h);
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for v in self.nodes[x.0].value.data() {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                Op::SegmentMax { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::shape(op, s, &[0, 0])),
        }
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "transpose")?;
        let out = transpose_raw(self.value(x).data(), r, c);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    // ---- elementwise ----

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, op, rg))
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let vx = self.value(x);
        let t = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|v| f(*v)).collect())
            .expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, Op::Square(x), |v| v * v)
    }

    /// `x[m,n] + bias[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "add_row")?;
        if self.value(bias).numel() != n {
            return Err(Error::shape("add_row", self.shape(x), self.shape(bias)));
        }
        let vx = self.value(x).data();
        let vb = self.value(bias).data();
        let data = (0..m * n).map(|i| vx[i] + vb[i % n]).collect();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::AddRow(x, bias), rg))
    }

    /// `x[m,n] * s[m]` scaling each row by one scalar.
    pub fn mul_col(&mut self, x: Var, s: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "mul_col")?;
        if self.value(s).numel() != m {
            return Err(Error::shape("mul_col", self.shape(x), self.shape(s)));
        }
        let vx = self.value(x).data();
        let vs = self.value(s).data();
        let data = (0..m * n).map(|i| vx[i] * vs[i / n]).collect();
        let rg = self.rg(&[x, s]);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MulCol(x, s), rg))
    }

    // ---- normalisation ----

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.softmax_values(x, axis, false)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.softmax_values(x, axis, true)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::LogSoftmax { x, axis }, rg))
    }

    fn softmax_values(&self, x: Var, axis: usize, log: bool) -> Result<Tensor> {
        let vx = self.value(x);
        if axis >= vx.shape().len() {
            return Err(Error::shape("softmax", vx.shape(), &[axis]));
        }
        if vx.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let (outer, len, inner) = axis_split(vx.shape(), axis);
        let src = vx.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                if log {
                    let lse = sum.ln();
                    for j in 0..len {
                        out[idx(j)] = src[idx(j)] - max - lse;
                    }
                } else {
                    for j in 0..len {
                        out[idx(j)] /= sum;
                    }
                }
            }
        }
        Tensor::new(vx.shape().to_vec(), out)
    }

    /// Layer normalisation over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm", &shape, &[1]))?;
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::shape("layer_norm", &shape, self.shape(gain)));
        }
        let rows = self.value(x).numel() / d;
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    // ---- structural ----

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let chunk = len * inner;
                out.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = self.rg(inputs);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::shape("slice", &shape, &[axis, start, len]));
        }
        let (outer, alen, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(oshape, out)?, Op::Slice { x, axis, start }, rg))
    }

    /// Row gather from a 2-D table. Gradients scatter-add back into the table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "gather_rows")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Vocabulary {
                channel: "<rows>".into(),
                id: bad as u64,
                vocab: v,
            });
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Embedding lookup; out-of-range ids are reported against `channel`.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize], channel: &str) -> Result<Var> {
        self.gather_rows(table, ids).map_err(|e| match e {
            Error::Vocabulary { id, vocab, .. } => Error::Vocabulary {
                channel: channel.to_string(),
                id,
                vocab,
            },
            other => other,
        })
    }

    /// Assembles a `rows×d` tensor whose row `targets[i]` of each piece is the
    /// piece's row `i`. Rows not covered by any piece are zero.
    pub fn scatter_rows(&mut self, pieces: &[(Var, Vec<usize>)], rows: usize, d: usize) -> Result<Var> {
        let mut out = vec![0.0; rows * d];
        for (v, targets) in pieces {
            let (pr, pd) = self.dims2(*v, "scatter_rows")?;
            if pd != d || pr != targets.len() {
                return Err(Error::shape("scatter_rows", self.shape(*v), &[targets.len(), d]));
            }
            let src = self.value(*v).data();
            for (i, &t) in targets.iter().enumerate() {
                if t >= rows {
                    return Err(Error::shape("scatter_rows", &[t], &[rows]));
                }
                out[t * d..(t + 1) * d].copy_from_slice(&src[i * d..(i + 1) * d]);
            }
        }
        let vars: Vec<Var> = pieces.iter().map(|p| p.0).collect();
        let rg = self.rg(&vars);
        Ok(self.push(
            Tensor::new(vec![rows, d], out)?,
            Op::ScatterRows {
                pieces: pieces.to_vec(),
            },
            rg,
        ))
    }

    /// Gathers flat elements into a 1-D tensor.
    pub fn pick(&mut self, x: Var, flat_idx: &[usize]) -> Result<Var> {
        let n = self.value(x).numel();
        if let Some(&bad) = flat_idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape("pick", self.shape(x), &[bad]));
        }
        let src = self.value(x).data();
        let out = flat_idx.iter().map(|&i| src[i]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::vector(out),
            Op::Pick {
                x,
                idx: flat_idx.to_vec(),
            },
            rg,
        ))
    }

    /// Per-segment column max of `x[rows,d]`; segment `s` covers rows
    /// `start..start+len`. Ties go to the lowest row.
    pub fn segment_max(&mut self, x: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let (rows, d) = self.dims2(x, "segment_max")?;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(segments.len() * d);
        let mut argmax = Vec::with_capacity(segments.len() * d);
        for &(start, len) in segments {
            if len == 0 || start + len > rows {
                return Err(Error::shape("segment_max", &[rows, d], &[start, len]));
            }
            for j in 0..d {
                let mut best = start;
                for r in start + 1..start + len {
                    if src[r * d + j] > src[best * d + j] {
                        best = r;
                    }
                }
                argmax.push(best * d + j);
                out.push(src[best * d + j]);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![segments.len(), d], out)?,
            Op::SegmentMax { x, argmax },
            rg,
        ))
    }

    /// Max over the first `len` rows of `x[N,d]`, giving `[1,d]`.
    pub fn max_pool_over_time(&mut self, x: Var, len: usize) -> Result<Var> {
        self.segment_max(x, &[(0, len)])
    }

    pub fn segment_mean(&mut self, x: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let (rows, d) = self.dims2(x, "segment_mean")?;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(segments.len() * d);
        for &(start, len) in segments {
            if len == 0 || start + len > rows {
                return Err(Error::shape("segment_mean", &[rows, d], &[start, len]));
            }
            for j in 0..d {
                let s: f64 = (start..start + len).map(|r| src[r * d + j]).sum();
                out.push(s / len as f64);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![segments.len(), d], out)?,
            Op::SegmentMean {
                x,
                segments: segments.to_vec(),
            },
            rg,
        ))
    }

    // ---- reductions and losses ----

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let weights = vec![1.0 / n; self.value(x).numel()];
        self.weighted_sum(x, &weights).expect("matching length")
    }

    /// `Σ_i w_i x_i` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        if weights.len() != self.value(x).numel() {
            return Err(Error::shape("weighted_sum", self.shape(x), &[weights.len()]));
        }
        let s = self.value(x).data().iter().zip(weights).map(|(a, w)| a * w).sum();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Elementwise binary cross-entropy on raw scores.
    pub fn bce_with_logits(&mut self, z: Var, labels: &[f64]) -> Result<Var> {
        if labels.len() != self.value(z).numel() {
            return Err(Error::shape("bce_with_logits", self.shape(z), &[labels.len()]));
        }
        let out: Vec<f64> = self
            .value(z)
            .data()
            .iter()
            .zip(labels)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .collect();
        let rg = self.rg(&[z]);
        Ok(self.push(
            Tensor::new(self.shape(z).to_vec(), out)?,
            Op::BceWithLogits {
                z,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Stacks scalars into a 1-D tensor.
    pub fn stack(&mut self, scalars: &[Var]) -> Result<Var> {
        let flat: Vec<Var> = scalars
            .iter()
            .map(|&s| {
                if self.value(s).is_scalar() {
                    self.reshape(s, &[1])
                } else {
                    Err(Error::shape("stack", self.shape(s), &[1]))
                }
            })
            .collect::<Result<_>>()?;
        self.concat(&flat, 0)
    }

    // ---- backward ----

    /// Reverse pass from a scalar. The graph stays intact, so several
    /// backward passes from different roots are allowed.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(self.shape(loss).to_vec(), vec![1.0])?);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(go) = grads[idx].take() else { continue };
            self.propagate(node, &go, &mut grads);
            grads[idx] = Some(go);
        }
        Ok(Gradients { grads })
    }

    /// Parameter gradients of `loss`, aligned with a store of `len` parameters.
    pub fn param_grads(&self, loss: Var, len: usize) -> Result<GradSet> {
        let g = self.backward(loss)?;
        Ok(self.collect_param_grads(&g, len))
    }

    fn collect_param_grads(&self, g: &Gradients, len: usize) -> GradSet {
        let mut set = GradSet::empty(len);
        for (&pid, &v) in &self.param_leaves {
            if let Some(t) = g.get(v) {
                if pid.0 < len {
                    set.0[pid.0] = Some(t.clone());
                }
            }
        }
        set
    }

    /// Backward pass that also accumulates parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let g = self.backward(loss)?;
        store.accumulate(&self.collect_param_grads(&g, store.len()));
        Ok(g)
    }

    fn propagate(&self, node: &Node, go: &Tensor, grads: &mut [Option<Tensor>]) {
        let g = go.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, data: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let shape = self.nodes[v.0].value.shape();
            match &mut grads[v.0] {
                Some(t) => {
                    for (a, b) in t.data_mut().iter_mut().zip(&data) {
                        *a += *b;
                    }
                }
                slot @ None => *slot = Some(Tensor::new(shape.to_vec(), data).expect("grad shape")),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().expect("2d");
                let n = self.nodes[b.0].value.shape()[1];
                if wants(*a) {
                    let bt = transpose_raw(val(*b), k, n);
                    acc(*a, matmul_raw(g, &bt, m, n, k));
                }
                if wants(*b) {
                    let at = transpose_raw(val(*a), m, k);
                    acc(*b, matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, g.iter().zip(val(*b)).map(|(x, y)| x * y).collect());
                }
                if wants(*b) {
                    acc(*b, g.iter().zip(val(*a)).map(|(x, y)| x * y).collect());
                }
            }
            Op::AddRow(x, bias) => {
                acc(*x, g.to_vec());
                if wants(*bias) {
                    let n = val(*bias).len();
                    let mut gb = vec![0.0; n];
                    for (i, v) in g.iter().enumerate() {
                        gb[i % n] += v;
                    }
                    acc(*bias, gb);
                }
            }
            Op::MulCol(x, s) => {
                let vs = val(*s);
                let n = g.len() / vs.len();
                if wants(*x) {
                    acc(*x, g.iter().enumerate().map(|(i, v)| v * vs[i / n]).collect());
                }
                if wants(*s) {
                    let vx = val(*x);
                    let mut gs = vec![0.0; vs.len()];
                    for (i, v) in g.iter().enumerate() {
                        gs[i / n] += v * vx[i];
                    }
                    acc(*s, gs);
                }
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|v| v * c).collect()),
            Op::Relu(x) => acc(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect(),
            ),
            Op::Square(x) => acc(*x, g.iter().zip(val(*x)).map(|(gv, xv)| 2.0 * xv * gv).collect()),
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..len {
                            gx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::LogSoftmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let total: f64 = (0..len).map(|j| g[idx(j)]).sum();
                        for j in 0..len {
                            gx[idx(j)] = g[idx(j)] - y[idx(j)].exp() * total;
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = val(*gain).len();
                let gamma = val(*gain);
                if wants(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for (r, is) in inv_std.iter().enumerate() {
                        let row = r * d..(r + 1) * d;
                        let gh: Vec<f64> = g[row.clone()].iter().zip(gamma).map(|(a, b)| a * b).collect();
                        let mean_gh = gh.iter().sum::<f64>() / d as f64;
                        let mean_ghx =
                            gh.iter().zip(&xhat[row.clone()]).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] = is * (gh[j] - mean_gh - xhat[r * d + j] * mean_ghx);
                        }
                    }
                    acc(*x, gx);
                }
                if wants(*gain) {
                    let mut gg = vec![0.0; d];
                    for (i, v) in g.iter().enumerate() {
                        gg[i % d] += v * xhat[i];
                    }
                    acc(*gain, gg);
                }
                if wants(*bias) {
                    let mut gb = vec![0.0; d];
                    for (i, v) in g.iter().enumerate() {
                        gb[i % d] += v;
                    }
                    acc(*bias, gb);
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = axis_split(node.value.shape(), *axis);
                let mut parts: Vec<Vec<f64>> = inputs
                    .iter()
                    .map(|v| Vec::with_capacity(self.nodes[v.0].value.numel()))
                    .collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (k, v) in inputs.iter().enumerate() {
                        let chunk = self.nodes[v.0].value.shape()[*axis] * inner;
                        parts[k].extend_from_slice(&g[pos..pos + chunk]);
                        pos += chunk;
                    }
                }
                for (v, p) in inputs.iter().zip(parts) {
                    acc(*v, p);
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.nodes[x.0].value.shape();
                let (outer, alen, inner) = axis_split(xs, *axis);
                let len = node.value.shape()[*axis];
                let mut gx = vec![0.0; self.nodes[x.0].value.numel()];
                for o in 0..outer {
                    let base = (o * alen + start) * inner;
                    gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*x, gx);
            }
            Op::Transpose(x) => {
                let (r, c) = self.nodes[x.0].value.dims2().expect("2d");
                acc(*x, transpose_raw(g, c, r));
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::GatherRows { table, ids } => {
                let d = self.nodes[table.0].value.shape()[1];
                let mut gt = vec![0.0; self.nodes[table.0].value.numel()];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[i * d + j];
                    }
                }
                acc(*table, gt);
            }
            Op::ScatterRows { pieces } => {
                let d = node.value.shape()[1];
                for (v, targets) in pieces {
                    if !wants(*v) {
                        continue;
                    }
                    let mut gp = Vec::with_capacity(targets.len() * d);
                    for &t in targets {
                        gp.extend_from_slice(&g[t * d..(t + 1) * d]);
                    }
                    acc(*v, gp);
                }
            }
            Op::Pick { x, idx } => {
                let mut gx = vec![0.0; self.nodes[x.0].value.numel()];
                for (k, &i) in idx.iter().enumerate() {
                    gx[i] += g[k];
                }
                acc(*x, gx);
            }
            Op::SegmentMax { x, argmax } => {
                let mut gx = vec![0.0; self.nodes[x.0].value.numel()];
                for (k, &i) in argmax.iter().enumerate() {
                    gx[i] += g[k];
                }
                acc(*x, gx);
            }
            Op::SegmentMean { x, segments } => {
                let d = node.value.shape()[1];
                let mut gx = vec![0.0; self.nodes[x.0].value.numel()];
                for (s, &(start, len)) in segments.iter().enumerate() {
                    for r in start..start + len {
                        for j in 0..d {
                            gx[r * d + j] += g[s * d + j] / len as f64;
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.nodes[x.0].value.numel()]),
            Op::WeightedSum { x, weights } => acc(*x, weights.iter().map(|w| w * g[0]).collect()),
            Op::BceWithLogits { z, labels } => {
                let vz = val(*z);
                acc(
                    *z,
                    g.iter()
                        .zip(vz.iter().zip(labels))
                        .map(|(gv, (&z, &y))| gv * (sigmoid(z) - y))
                        .collect(),
                );
            }
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
