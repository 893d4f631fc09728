//! Dense f64 tensors with tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every tensor created during one forward pass and records
//! each operation together with its backward rule. Calling [`Tape::backward`]
//! on a scalar replays the recorded ops in reverse and accumulates
//! `d scalar / d node` into every node, so the gradient with respect to any
//! intermediate (hidden states, attention matrices, inputs) can be read back
//! directly — no graph surgery.
//!
//! Tapes are rebuilt per forward pass (define-by-run) and are confined to one
//! thread; independent tapes may run in parallel.

use crate::error::{CaligError, Result};

/// Large negative value used to mask attention logits. Finite on purpose so
/// softmax and its backward stay NaN-free.
pub const MASK_NEG: f64 = -1.0e30;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

/// Dense n-dimensional array of f64 in row-major order, plus an optional
/// gradient buffer of the same length.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub requires_grad: bool,
    #[serde(skip)]
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "shape {:?} does not match {} values",
            shape,
            values.len()
        );
        Tensor { shape, values, requires_grad: false, grad: None }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![], vec![v])
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Row-major index into a 2-D tensor.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.values[i * self.shape[1] + j]
    }

    /// Row-major index into a 3-D tensor.
    pub fn at3(&self, i: usize, j: usize, k: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 3);
        self.values[(i * self.shape[1] + j) * self.shape[2] + k]
    }
}

/// One recorded operation: which inputs produced which output, and enough
/// metadata to run the backward rule.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    Transpose { x: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    AddBias { x: TensorId, bias: TensorId },
    Scale { x: TensorId, c: f64 },
    SoftmaxLastDim { x: TensorId },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, eps: f64 },
    Gelu { x: TensorId },
    Gather { table: TensorId, ids: Vec<usize> },
    Concat { parts: Vec<TensorId> },
    SliceRows { x: TensorId, start: usize },
    SumAxis { x: TensorId, axis: usize },
    Pick { x: TensorId, index: usize },
    Reshape { x: TensorId },
    SplitHeads { x: TensorId, heads: usize },
    MergeHeads { x: TensorId },
    CrossEntropy { logits: TensorId, target: usize },
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// Ordered record of operations; inputs always precede their outputs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input tensor that does not require a gradient.
    pub fn leaf(&mut self, t: Tensor) -> TensorId {
        self.push(t, Op::Leaf)
    }

    /// Record an input tensor whose gradient should be retained.
    pub fn param(&mut self, mut t: Tensor) -> TensorId {
        t.requires_grad = true;
        self.push(t, Op::Leaf)
    }

    /// Mark an already-recorded tensor so its gradient is retained.
    pub fn watch(&mut self, id: TensorId) {
        self.nodes[id.0].tensor.requires_grad = true;
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].tensor.values
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].tensor.shape
    }

    /// Gradient of the last backward target with respect to this tensor.
    /// `None` if backward has not run or no gradient flowed here.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    /// Drop all gradient buffers so backward can run again from scratch.
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.tensor.grad = None;
        }
    }

    fn push(&mut self, t: Tensor, op: Op) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { tensor: t, op });
        id
    }

    fn accumulate(&mut self, id: TensorId, contrib: &[f64]) {
        let node = &mut self.nodes[id.0];
        debug_assert_eq!(contrib.len(), node.tensor.numel());
        match &mut node.tensor.grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi += ci;
                }
            }
            None => node.tensor.grad = Some(contrib.to_vec()),
        }
    }

    // ---- ops -----------------------------------------------------------

    /// Matrix product over the last two axes. Leading batch axes must match
    /// exactly; the encoder never needs more general broadcasting.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2]
        {
            return Err(CaligError::Shape { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(CaligError::Shape { op: "matmul", lhs: sa, rhs: sb });
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);

        let av = self.values(a);
        let bv = self.values(b);
        let mut out = vec![0.0; batch * m * n];
        for t in 0..batch {
            let ao = t * m * k;
            let bo = t * k * n;
            let oo = t * m * n;
            matmul_slice(&av[ao..ao + m * k], &bv[bo..bo + k * n], &mut out[oo..oo + m * n], m, k, n);
        }
        Ok(self.push(Tensor::new(out_shape, out), Op::Matmul { a, b }))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(CaligError::Shape { op: "transpose", lhs: s, rhs: vec![] });
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch: usize = s[..s.len() - 2].iter().product();
        let xv = self.values(x);
        let mut out = vec![0.0; xv.len()];
        for t in 0..batch {
            let o = t * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[o + j * r + i] = xv[o + i * c + j];
                }
            }
        }
        let mut os = s.clone();
        let l = os.len();
        os.swap(l - 2, l - 1);
        Ok(self.push(Tensor::new(os, out), Op::Transpose { x }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(CaligError::Shape {
                op: name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out), op))
    }

    /// Broadcast-add a vector along the last axis: `x[.., j] + bias[j]`.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(bias).to_vec();
        if sb.len() != 1 || sx.is_empty() || sx[sx.len() - 1] != sb[0] {
            return Err(CaligError::Shape { op: "add_bias", lhs: sx, rhs: sb });
        }
        let n = sb[0];
        let bv = self.values(bias).to_vec();
        let out: Vec<f64> = self
            .values(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i % n])
            .collect();
        Ok(self.push(Tensor::new(sx, out), Op::AddBias { x, bias }))
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let out: Vec<f64> = self.values(x).iter().map(|&v| c * v).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, out), Op::Scale { x, c })
    }

    /// Numerically stabilized softmax over the last axis.
    pub fn softmax_lastdim(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || s[s.len() - 1] == 0 {
            return Err(CaligError::Shape { op: "softmax_lastdim", lhs: s, rhs: vec![] });
        }
        let d = s[s.len() - 1];
        let xv = self.values(x);
        let mut out = vec![0.0; xv.len()];
        for row in 0..xv.len() / d {
            let o = row * d;
            let slice = &xv[o..o + d];
            let max = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..d {
                let e = (slice[j] - max).exp();
                out[o + j] = e;
                sum += e;
            }
            for j in 0..d {
                out[o + j] /= sum;
            }
        }
        Ok(self.push(Tensor::new(s, out), Op::SoftmaxLastDim { x }))
    }

    /// Per-slice normalization over the last axis followed by an affine map.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or(CaligError::Shape { op: "layer_norm", lhs: s.clone(), rhs: vec![] })?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(CaligError::Shape {
                op: "layer_norm",
                lhs: s,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let xv = self.values(x);
        let gv = self.values(gamma).to_vec();
        let bv = self.values(beta).to_vec();
        let mut out = vec![0.0; xv.len()];
        for row in 0..xv.len() / d {
            let o = row * d;
            let slice = &xv[o..o + d];
            let mean = slice.iter().sum::<f64>() / d as f64;
            let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[o + j] = (slice[j] - mean) * inv_std * gv[j] + bv[j];
            }
        }
        Ok(self.push(Tensor::new(s, out), Op::LayerNorm { x, gamma, beta, eps }))
    }

    /// Exact Gaussian-CDF GELU: `0.5 x (1 + erf(x / sqrt(2)))`.
    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let out: Vec<f64> = self.values(x).iter().map(|&v| gelu_val(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, out), Op::Gelu { x })
    }

    /// Row lookup: `out[t, :] = table[ids[t], :]`. Backward scatter-adds into
    /// the table; ids themselves are not differentiable.
    pub fn gather(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(CaligError::Shape { op: "gather", lhs: s, rhs: vec![ids.len()] });
        }
        let (rows, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(CaligError::Input(format!(
                "gather index {bad} out of range for table with {rows} rows"
            )));
        }
        let tv = self.values(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out),
            Op::Gather { table, ids: ids.to_vec() },
        ))
    }

    /// Concatenate along axis 0. Trailing dimensions must agree.
    pub fn concat(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(CaligError::Contract("concat of zero tensors".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(CaligError::Shape { op: "concat", lhs: first, rhs: s.to_vec() });
            }
            rows += s[0];
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.values(p));
        }
        let mut shape = first;
        shape[0] = rows;
        Ok(self.push(Tensor::new(shape, out), Op::Concat { parts: parts.to_vec() }))
    }

    /// Contiguous row range along axis 0: `x[start .. start + len]`.
    pub fn slice_rows(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || start + len > s[0] {
            return Err(CaligError::Contract(format!(
                "slice_rows [{start}, {}) out of range for shape {s:?}",
                start + len
            )));
        }
        let stride: usize = s[1..].iter().product();
        let out = self.values(x)[start * stride..(start + len) * stride].to_vec();
        let mut shape = s;
        shape[0] = len;
        Ok(self.push(Tensor::new(shape, out), Op::SliceRows { x, start }))
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(CaligError::Contract(format!(
                "sum_axis axis {axis} out of range for shape {s:?}"
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let mid = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let xv = self.values(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                for i in 0..inner {
                    out[o * inner + i] += xv[(o * mid + m) * inner + i];
                }
            }
        }
        let mut shape = s.clone();
        shape.remove(axis);
        Ok(self.push(Tensor::new(shape, out), Op::SumAxis { x, axis }))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let mut id = x;
        while !self.shape(id).is_empty() {
            id = self.sum_axis(id, 0)?;
        }
        Ok(id)
    }

    /// Select one entry by flat index, as a scalar.
    pub fn pick(&mut self, x: TensorId, index: usize) -> Result<TensorId> {
        let n = self.tensor(x).numel();
        if index >= n {
            return Err(CaligError::Contract(format!(
                "pick index {index} out of range for {n} elements"
            )));
        }
        let v = self.values(x)[index];
        Ok(self.push(Tensor::scalar(v), Op::Pick { x, index }))
    }

    /// Reinterpret the row-major buffer under a new shape (same numel).
    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let n: usize = shape.iter().product();
        if n != self.tensor(x).numel() {
            return Err(CaligError::Shape {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let out = self.values(x).to_vec();
        Ok(self.push(Tensor::new(shape, out), Op::Reshape { x }))
    }

    /// `[s, h*dk] -> [h, s, dk]`: expose per-head views of a packed projection.
    pub fn split_heads(&mut self, x: TensorId, heads: usize) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || !s[1].is_multiple_of(heads) {
            return Err(CaligError::Shape { op: "split_heads", lhs: s, rhs: vec![heads] });
        }
        let (seq, d) = (s[0], s[1]);
        let dk = d / heads;
        let xv = self.values(x);
        let mut out = vec![0.0; xv.len()];
        for h in 0..heads {
            for t in 0..seq {
                for j in 0..dk {
                    out[(h * seq + t) * dk + j] = xv[t * d + h * dk + j];
                }
            }
        }
        Ok(self.push(Tensor::new(vec![heads, seq, dk], out), Op::SplitHeads { x, heads }))
    }

    /// `[h, s, dk] -> [s, h*dk]`: inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(CaligError::Shape { op: "merge_heads", lhs: s, rhs: vec![] });
        }
        let (heads, seq, dk) = (s[0], s[1], s[2]);
        let xv = self.values(x);
        let mut out = vec![0.0; xv.len()];
        for h in 0..heads {
            for t in 0..seq {
                for j in 0..dk {
                    out[t * heads * dk + h * dk + j] = xv[(h * seq + t) * dk + j];
                }
            }
        }
        Ok(self.push(Tensor::new(vec![seq, heads * dk], out), Op::MergeHeads { x }))
    }

    /// Stable cross-entropy of a logit vector against one target class:
    /// `logsumexp(logits) - logits[target]`.
    pub fn cross_entropy(&mut self, logits: TensorId, target: usize) -> Result<TensorId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 1 || target >= s[0] {
            return Err(CaligError::Contract(format!(
                "cross_entropy: logits shape {s:?}, target {target}"
            )));
        }
        let lv = self.values(logits);
        let max = lv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + lv.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - lv[target];
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, target }))
    }

    // ---- backward ------------------------------------------------------

    /// Populate gradients of `scalar` with respect to every ancestor.
    /// Gradients from any previous backward call are cleared first, so
    /// repeated calls are deterministic and identical.
    pub fn backward(&mut self, scalar: TensorId) -> Result<()> {
        if self.tensor(scalar).numel() != 1 {
            return Err(CaligError::Contract(format!(
                "backward requires a scalar, got shape {:?}",
                self.shape(scalar)
            )));
        }
        self.reset_grads();
        self.nodes[scalar.0].tensor.grad = Some(vec![1.0]);

        for idx in (0..=scalar.0).rev() {
            let Some(d_out) = self.nodes[idx].tensor.grad.clone() else {
                continue;
            };
            let op = self.nodes[idx].op.clone();
            self.backward_op(idx, &op, &d_out);
        }
        Ok(())
    }

    fn backward_op(&mut self, out_idx: usize, op: &Op, d_out: &[f64]) {
        match op {
            Op::Leaf => {}

            Op::Matmul { a, b } => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch: usize = sa[..sa.len() - 2].iter().product();
                let av = self.values(*a).to_vec();
                let bv = self.values(*b).to_vec();
                // d_a = d_out @ b^T ; d_b = a^T @ d_out, per batch slice
                let mut d_a = vec![0.0; av.len()];
                let mut d_b = vec![0.0; bv.len()];
                for t in 0..batch {
                    let (ao, bo, oo) = (t * m * k, t * k * n, t * m * n);
                    let d_slice = &d_out[oo..oo + m * n];
                    matmul_a_bt(d_slice, &bv[bo..bo + k * n], &mut d_a[ao..ao + m * k], m, n, k);
                    matmul_at_b(&av[ao..ao + m * k], d_slice, &mut d_b[bo..bo + k * n], m, k, n);
                }
                self.accumulate(*a, &d_a);
                self.accumulate(*b, &d_b);
            }

            Op::Transpose { x } => {
                let so = self.shape(TensorId(out_idx)).to_vec();
                let (r, c) = (so[so.len() - 2], so[so.len() - 1]);
                let batch: usize = so[..so.len() - 2].iter().product();
                let mut d_x = vec![0.0; d_out.len()];
                for t in 0..batch {
                    let o = t * r * c;
                    for i in 0..r {
                        for j in 0..c {
                            d_x[o + j * r + i] = d_out[o + i * c + j];
                        }
                    }
                }
                self.accumulate(*x, &d_x);
            }

            Op::Add { a, b } => {
                self.accumulate(*a, d_out);
                self.accumulate(*b, d_out);
            }

            Op::Sub { a, b } => {
                self.accumulate(*a, d_out);
                let neg: Vec<f64> = d_out.iter().map(|v| -v).collect();
                self.accumulate(*b, &neg);
            }

            Op::Mul { a, b } => {
                let d_a: Vec<f64> = d_out.iter().zip(self.values(*b)).map(|(d, v)| d * v).collect();
                let d_b: Vec<f64> = d_out.iter().zip(self.values(*a)).map(|(d, v)| d * v).collect();
                self.accumulate(*a, &d_a);
                self.accumulate(*b, &d_b);
            }

            Op::AddBias { x, bias } => {
                self.accumulate(*x, d_out);
                let n = self.tensor(*bias).numel();
                let mut d_b = vec![0.0; n];
                for (i, d) in d_out.iter().enumerate() {
                    d_b[i % n] += d;
                }
                self.accumulate(*bias, &d_b);
            }

            Op::Scale { x, c } => {
                let d_x: Vec<f64> = d_out.iter().map(|d| c * d).collect();
                self.accumulate(*x, &d_x);
            }

            Op::SoftmaxLastDim { x } => {
                let out = &self.nodes[out_idx].tensor;
                let d = *out.shape.last().unwrap();
                let ov = out.values.clone();
                let mut d_x = vec![0.0; ov.len()];
                for row in 0..ov.len() / d {
                    let o = row * d;
                    let dot: f64 = (0..d).map(|j| d_out[o + j] * ov[o + j]).sum();
                    for j in 0..d {
                        d_x[o + j] = ov[o + j] * (d_out[o + j] - dot);
                    }
                }
                self.accumulate(*x, &d_x);
            }

            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = self.values(*x).to_vec();
                let gv = self.values(*gamma).to_vec();
                let d = gv.len();
                let rows = xv.len() / d;
                let mut d_x = vec![0.0; xv.len()];
                let mut d_g = vec![0.0; d];
                let mut d_b = vec![0.0; d];
                for row in 0..rows {
                    let o = row * d;
                    let slice = &xv[o..o + d];
                    let mean = slice.iter().sum::<f64>() / d as f64;
                    let var =
                        slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = slice.iter().map(|v| (v - mean) * inv_std).collect();
                    let d_y = &d_out[o..o + d];
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let dxh = d_y[j] * gv[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xhat[j];
                        d_g[j] += d_y[j] * xhat[j];
                        d_b[j] += d_y[j];
                    }
                    mean_dxhat /= d as f64;
                    mean_dxhat_xhat /= d as f64;
                    for j in 0..d {
                        let dxh = d_y[j] * gv[j];
                        d_x[o + j] = inv_std * (dxh - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                self.accumulate(*x, &d_x);
                self.accumulate(*gamma, &d_g);
                self.accumulate(*beta, &d_b);
            }

            Op::Gelu { x } => {
                let d_x: Vec<f64> = d_out
                    .iter()
                    .zip(self.values(*x))
                    .map(|(d, &v)| d * gelu_grad(v))
                    .collect();
                self.accumulate(*x, &d_x);
            }

            Op::Gather { table, ids } => {
                let s = self.shape(*table).to_vec();
                let d = s[1];
                let mut d_t = vec![0.0; s[0] * d];
                for (t, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        d_t[i * d + j] += d_out[t * d + j];
                    }
                }
                self.accumulate(*table, &d_t);
            }

            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.tensor(p).numel();
                    let d_p = d_out[offset..offset + n].to_vec();
                    self.accumulate(p, &d_p);
                    offset += n;
                }
            }

            Op::SliceRows { x, start } => {
                let s = self.shape(*x).to_vec();
                let stride: usize = s[1..].iter().product();
                let mut d_x = vec![0.0; self.tensor(*x).numel()];
                d_x[start * stride..start * stride + d_out.len()].copy_from_slice(d_out);
                self.accumulate(*x, &d_x);
            }

            Op::SumAxis { x, axis } => {
                let s = self.shape(*x).to_vec();
                let outer: usize = s[..*axis].iter().product();
                let mid = s[*axis];
                let inner: usize = s[*axis + 1..].iter().product();
                let mut d_x = vec![0.0; self.tensor(*x).numel()];
                for o in 0..outer {
                    for m in 0..mid {
                        for i in 0..inner {
                            d_x[(o * mid + m) * inner + i] = d_out[o * inner + i];
                        }
                    }
                }
                self.accumulate(*x, &d_x);
            }

            Op::Pick { x, index } => {
                let mut d_x = vec![0.0; self.tensor(*x).numel()];
                d_x[*index] = d_out[0];
                self.accumulate(*x, &d_x);
            }

            Op::Reshape { x } => {
                self.accumulate(*x, d_out);
            }

            Op::SplitHeads { x, heads } => {
                let s = self.shape(*x).to_vec();
                let (seq, d) = (s[0], s[1]);
                let dk = d / heads;
                let mut d_x = vec![0.0; seq * d];
                for h in 0..*heads {
                    for t in 0..seq {
                        for j in 0..dk {
                            d_x[t * d + h * dk + j] = d_out[(h * seq + t) * dk + j];
                        }
                    }
                }
                self.accumulate(*x, &d_x);
            }

            Op::MergeHeads { x } => {
                let s = self.shape(*x).to_vec();
                let (heads, seq, dk) = (s[0], s[1], s[2]);
                let mut d_x = vec![0.0; heads * seq * dk];
                for h in 0..heads {
                    for t in 0..seq {
                        for j in 0..dk {
                            d_x[(h * seq + t) * dk + j] = d_out[t * heads * dk + h * dk + j];
                        }
                    }
                }
                self.accumulate(*x, &d_x);
            }

            Op::CrossEntropy { logits, target } => {
                let lv = self.values(*logits).to_vec();
                let max = lv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = lv.iter().map(|&v| (v - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                let mut d_l: Vec<f64> = exps.iter().map(|e| d_out[0] * e / sum).collect();
                d_l[*target] -= d_out[0];
                self.accumulate(*logits, &d_l);
            }
        }
    }
}

fn gelu_val(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// out[m,n] = a[m,k] @ b[k,n], accumulating into `out` (caller zeroes).
fn matmul_slice(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
}

/// out[m,k] += a[m,n] @ b[k,n]^T
fn matmul_a_bt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        for p in 0..k {
            let mut acc = 0.0;
            for j in 0..n {
                acc += a[i * n + j] * b[p * n + j];
            }
            out[i * k + p] += acc;
        }
    }
}

/// out[k,n] += a[m,k]^T @ b[m,n]
fn matmul_at_b(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[i * n..(i + 1) * n];
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
}
