//! Reverse-mode autodiff over an explicitly recorded computation graph.
//!
//! Define-by-run: each op evaluates eagerly and records its parents; a
//! single `backward` pass walks the tape in reverse. Values are f64
//! throughout. Every differentiable op here is covered by a
//! finite-difference check (see `gradcheck`).

use crate::error::{Result, StaError};
use crate::tensor::Tensor;

/// Sentinel gather index that reads as 0.0 and receives no gradient
/// (used for zero padding in convolution index maps).
pub const PAD: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRowBroadcast(NodeId, NodeId),
    MulRowBroadcast(NodeId, NodeId),
    MulScalarNode(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Gelu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Softmax(NodeId, usize),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
    },
    Sum(NodeId),
    Mean(NodeId),
    GatherRows {
        src: NodeId,
        indices: Vec<usize>,
    },
    GatherFlat {
        src: NodeId,
        indices: Vec<usize>,
    },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows {
        src: NodeId,
        start: usize,
        len: usize,
    },
    SliceCols {
        src: NodeId,
        start: usize,
        len: usize,
    },
    Transpose(NodeId),
    Reshape(NodeId),
    L2NormalizeRows(NodeId),
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
}

/// Recorded computation graph. Single-threaded per graph; distinct graphs
/// are independent.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
}

const LOG_FLOOR: f64 = 1e-300;

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        debug_assert!(
            values.iter().all(|v| v.is_finite()),
            "non-finite forward value in {:?}",
            op
        );
        self.nodes.push(Node { op, shape, values });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(Op::Leaf, t.shape.clone(), t.values.clone())
    }

    pub fn leaf_from(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<NodeId> {
        let t = Tensor::from_vec(shape, values)?;
        Ok(self.leaf(&t))
    }

    pub fn scalar_leaf(&mut self, v: f64) -> NodeId {
        self.push(Op::Leaf, vec![1], vec![v])
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn value_scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].values[0]
    }

    /// Gradient of the last `backward` target wrt this node.
    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.grads[id.0]
    }

    fn dims2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(StaError::shape(op, format!("expected 2-D, got {:?}", s)));
        }
        Ok((s[0], s[1]))
    }

    // ── binary ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(StaError::shape(
                "matmul",
                format!("inner extents disagree: {:?} x {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = matmul_raw(self.values(a), self.values(b), m, k, n);
        Ok(self.push(Op::Matmul(a, b), vec![m, n], out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Add(a, b), shape, out))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let out: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Sub(a, b), shape, out))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Mul(a, b), shape, out))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(StaError::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    /// `[n,d] + [d]` (or `[1,d]`): add `b` to every row of `a`.
    pub fn add_row_broadcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, d) = self.dims2(a, "add_row_broadcast")?;
        if self.values(b).len() != d {
            return Err(StaError::shape(
                "add_row_broadcast",
                format!("row has {} cols, addend has {} values", d, self.values(b).len()),
            ));
        }
        let mut out = self.values(a).to_vec();
        let bv = self.values(b).to_vec();
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] += bv[j];
            }
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::AddRowBroadcast(a, b), shape, out))
    }

    /// `[n,d] ⊙ [d]`: scale every row of `a` elementwise by `b`.
    pub fn mul_row_broadcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, d) = self.dims2(a, "mul_row_broadcast")?;
        if self.values(b).len() != d {
            return Err(StaError::shape(
                "mul_row_broadcast",
                format!("row has {} cols, factor has {} values", d, self.values(b).len()),
            ));
        }
        let mut out = self.values(a).to_vec();
        let bv = self.values(b).to_vec();
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] *= bv[j];
            }
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::MulRowBroadcast(a, b), shape, out))
    }

    /// Multiply every element of `a` by the single value held in node `s`.
    pub fn mul_scalar_node(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.values(s).len() != 1 {
            return Err(StaError::shape(
                "mul_scalar_node",
                format!("scale node must hold 1 value, has {}", self.values(s).len()),
            ));
        }
        let sv = self.value_scalar(s);
        let out: Vec<f64> = self.values(a).iter().map(|x| x * sv).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::MulScalarNode(a, s), shape, out))
    }

    // ── unary ops ───────────────────────────────────────────────────

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out: Vec<f64> = self.values(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Scale(a, c), shape, out)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let out: Vec<f64> = self.values(a).iter().map(|x| x + c).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::AddScalar(a), shape, out)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let out: Vec<f64> = self.values(a).iter().map(|&x| gelu_fwd(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Gelu(a), shape, out)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let out: Vec<f64> = self.values(a).iter().map(|x| x.exp()).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Exp(a), shape, out)
    }

    /// Natural log, floored at 1e-300 so exact zeros from probability
    /// products cannot poison the forward pass.
    pub fn log(&mut self, a: NodeId) -> NodeId {
        let out: Vec<f64> = self.values(a).iter().map(|x| x.max(LOG_FLOOR).ln()).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Log(a), shape, out)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(StaError::invalid(
                "softmax",
                format!("axis {} out of range for shape {:?}", axis, shape),
            ));
        }
        let mut out = self.values(a).to_vec();
        for_each_lane(&shape, axis, |offset, stride, len| {
            let mut mx = f64::NEG_INFINITY;
            for i in 0..len {
                mx = mx.max(out[offset + i * stride]);
            }
            let mut z = 0.0;
            for i in 0..len {
                let e = (out[offset + i * stride] - mx).exp();
                out[offset + i * stride] = e;
                z += e;
            }
            for i in 0..len {
                out[offset + i * stride] /= z;
            }
        });
        Ok(self.push(Op::Softmax(a, axis), shape, out))
    }

    /// Layer normalization over the last axis with per-channel gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| StaError::shape("layer_norm", "0-d input"))?;
        if d == 0 {
            return Err(StaError::shape("layer_norm", "normalized axis extent is 0"));
        }
        if self.values(gain).len() != d || self.values(bias).len() != d {
            return Err(StaError::shape(
                "layer_norm",
                format!(
                    "gain/bias must have {} values, got {}/{}",
                    d,
                    self.values(gain).len(),
                    self.values(bias).len()
                ),
            ));
        }
        let rows = self.values(x).len() / d;
        let mut out = vec![0.0; rows * d];
        {
            let xv = self.values(x);
            let gv = self.values(gain);
            let bv = self.values(bias);
            for r in 0..rows {
                let row = &xv[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for j in 0..d {
                    out[r * d + j] = (row[j] - mean) * inv * gv[j] + bv[j];
                }
            }
        }
        Ok(self.push(Op::LayerNorm { x, gain, bias, eps }, shape, out))
    }

    /// Mean of `-log softmax(logits)[i, target_i]` over rows.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (n, c) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != n {
            return Err(StaError::shape(
                "cross_entropy",
                format!("{} logit rows vs {} targets", n, targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(StaError::invalid(
                "cross_entropy",
                format!("target {} out of range [0,{})", bad, c),
            ));
        }
        let lv = self.values(logits);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &lv[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
            total += lse - row[t];
        }
        let out = total / n as f64;
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            vec![1],
            vec![out],
        ))
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.values(a).iter().sum();
        self.push(Op::Sum(a), vec![1], vec![s])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.values(a).len();
        let s: f64 = self.values(a).iter().sum();
        self.push(Op::Mean(a), vec![1], vec![s / n as f64])
    }

    // ── indexing / layout ───────────────────────────────────────────

    /// Row lookup into a 2-D table (embedding gather). Gradients
    /// scatter-add back into the table.
    pub fn gather_rows(&mut self, src: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (n, d) = self.dims2(src, "gather_rows")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(StaError::invalid(
                "gather_rows",
                format!("row index {} out of range [0,{})", bad, n),
            ));
        }
        let sv = self.values(src);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&sv[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            Op::GatherRows {
                src,
                indices: indices.to_vec(),
            },
            vec![indices.len(), d],
            out,
        ))
    }

    /// Flat-index gather; `PAD` entries read 0.0. Used for im2col.
    pub fn gather_flat(&mut self, src: NodeId, indices: &[usize], out_shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = out_shape.iter().product();
        if numel != indices.len() {
            return Err(StaError::shape(
                "gather_flat",
                format!("out shape {:?} vs {} indices", out_shape, indices.len()),
            ));
        }
        let src_len = self.values(src).len();
        if let Some(&bad) = indices.iter().find(|&&i| i != PAD && i >= src_len) {
            return Err(StaError::invalid(
                "gather_flat",
                format!("flat index {} out of range [0,{})", bad, src_len),
            ));
        }
        let sv = self.values(src);
        let out: Vec<f64> = indices
            .iter()
            .map(|&i| if i == PAD { 0.0 } else { sv[i] })
            .collect();
        Ok(self.push(
            Op::GatherFlat {
                src,
                indices: indices.to_vec(),
            },
            out_shape,
            out,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(StaError::invalid("concat_rows", "no parts"));
        }
        let (_, d) = self.dims2(parts[0], "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (n, dp) = self.dims2(p, "concat_rows")?;
            if dp != d {
                return Err(StaError::shape(
                    "concat_rows",
                    format!("column counts differ: {} vs {}", d, dp),
                ));
            }
            rows += n;
        }
        let mut out = Vec::with_capacity(rows * d);
        for &p in parts {
            out.extend_from_slice(self.values(p));
        }
        Ok(self.push(Op::ConcatRows(parts.to_vec()), vec![rows, d], out))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(StaError::invalid("concat_cols", "no parts"));
        }
        let (n, _) = self.dims2(parts[0], "concat_cols")?;
        let mut d_total = 0;
        for &p in parts {
            let (np, dp) = self.dims2(p, "concat_cols")?;
            if np != n {
                return Err(StaError::shape(
                    "concat_cols",
                    format!("row counts differ: {} vs {}", n, np),
                ));
            }
            d_total += dp;
        }
        let mut out = vec![0.0; n * d_total];
        let mut col = 0;
        for &p in parts {
            let (_, dp) = self.dims2(p, "concat_cols")?;
            let pv = self.values(p).to_vec();
            for i in 0..n {
                out[i * d_total + col..i * d_total + col + dp]
                    .copy_from_slice(&pv[i * dp..(i + 1) * dp]);
            }
            col += dp;
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), vec![n, d_total], out))
    }

    pub fn slice_rows(&mut self, src: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (n, d) = self.dims2(src, "slice_rows")?;
        if start + len > n {
            return Err(StaError::invalid(
                "slice_rows",
                format!("rows [{},{}) out of range [0,{})", start, start + len, n),
            ));
        }
        let out = self.values(src)[start * d..(start + len) * d].to_vec();
        Ok(self.push(Op::SliceRows { src, start, len }, vec![len, d], out))
    }

    pub fn slice_cols(&mut self, src: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (n, d) = self.dims2(src, "slice_cols")?;
        if start + len > d {
            return Err(StaError::invalid(
                "slice_cols",
                format!("cols [{},{}) out of range [0,{})", start, start + len, d),
            ));
        }
        let sv = self.values(src);
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&sv[i * d + start..i * d + start + len]);
        }
        Ok(self.push(Op::SliceCols { src, start, len }, vec![n, len], out))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (n, d) = self.dims2(a, "transpose")?;
        let av = self.values(a);
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                out[j * n + i] = av[i * d + j];
            }
        }
        Ok(self.push(Op::Transpose(a), vec![d, n], out))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.values(a).len() {
            return Err(StaError::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(a), shape),
            ));
        }
        let out = self.values(a).to_vec();
        Ok(self.push(Op::Reshape(a), shape, out))
    }

    /// Normalize each row to unit L2 norm. Rejects rows with norm below 1e-30.
    pub fn l2_normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (n, d) = self.dims2(a, "l2_normalize_rows")?;
        let av = self.values(a);
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &av[i * d..(i + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-30 {
                return Err(StaError::invalid(
                    "l2_normalize_rows",
                    format!("row {} has zero norm before normalization", i),
                ));
            }
            for j in 0..d {
                out[i * d + j] = row[j] / norm;
            }
        }
        Ok(self.push(Op::L2NormalizeRows(a), vec![n, d], out))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse pass from a scalar node. Gradients afterwards via [`Graph::grad`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.values(loss).len() != 1 {
            return Err(StaError::invalid(
                "backward",
                format!("target must be scalar, has shape {:?}", self.shape(loss)),
            ));
        }
        self.grads = self.nodes.iter().map(|n| vec![0.0; n.values.len()]).collect();
        self.grads[loss.0][0] = 1.0;

        for idx in (0..=loss.0).rev() {
            if self.grads[idx].iter().all(|&g| g == 0.0) {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            let up = std::mem::take(&mut self.grads[idx]);
            self.apply_backward(idx, &op, &up);
            self.grads[idx] = up;
        }
        Ok(())
    }

    fn apply_backward(&mut self, idx: usize, op: &Op, up: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                // dA = dC·Bᵀ
                let bv = &self.nodes[b.0].values;
                let av = &self.nodes[a.0].values;
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let u = up[i * n + j];
                        if u == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            da[i * k + p] += u * bv[p * n + j];
                        }
                    }
                }
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let x = av[i * k + p];
                        if x == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[p * n + j] += x * up[i * n + j];
                        }
                    }
                }
                add_into(&mut self.grads[a.0], &da);
                add_into(&mut self.grads[b.0], &db);
            }
            Op::Add(a, b) => {
                add_into(&mut self.grads[a.0], up);
                add_into(&mut self.grads[b.0], up);
            }
            Op::Sub(a, b) => {
                add_into(&mut self.grads[a.0], up);
                for (g, u) in self.grads[b.0].iter_mut().zip(up) {
                    *g -= u;
                }
            }
            Op::Mul(a, b) => {
                let av = self.nodes[a.0].values.clone();
                let bv = self.nodes[b.0].values.clone();
                for ((g, u), y) in self.grads[a.0].iter_mut().zip(up).zip(&bv) {
                    *g += u * y;
                }
                for ((g, u), x) in self.grads[b.0].iter_mut().zip(up).zip(&av) {
                    *g += u * x;
                }
            }
            Op::AddRowBroadcast(a, b) => {
                add_into(&mut self.grads[a.0], up);
                let d = self.nodes[b.0].values.len();
                let rows = up.len() / d;
                for i in 0..rows {
                    for j in 0..d {
                        self.grads[b.0][j] += up[i * d + j];
                    }
                }
            }
            Op::MulRowBroadcast(a, b) => {
                let d = self.nodes[b.0].values.len();
                let rows = up.len() / d;
                let av = self.nodes[a.0].values.clone();
                let bv = self.nodes[b.0].values.clone();
                for i in 0..rows {
                    for j in 0..d {
                        self.grads[a.0][i * d + j] += up[i * d + j] * bv[j];
                        self.grads[b.0][j] += up[i * d + j] * av[i * d + j];
                    }
                }
            }
            Op::MulScalarNode(a, s) => {
                let sv = self.nodes[s.0].values[0];
                let av = self.nodes[a.0].values.clone();
                for (g, u) in self.grads[a.0].iter_mut().zip(up) {
                    *g += u * sv;
                }
                let ds: f64 = up.iter().zip(&av).map(|(u, x)| u * x).sum();
                self.grads[s.0][0] += ds;
            }
            Op::Scale(a, c) => {
                for (g, u) in self.grads[a.0].iter_mut().zip(up) {
                    *g += u * c;
                }
            }
            Op::AddScalar(a) => add_into(&mut self.grads[a.0], up),
            Op::Gelu(a) => {
                let av = self.nodes[a.0].values.clone();
                for ((g, u), &x) in self.grads[a.0].iter_mut().zip(up).zip(&av) {
                    *g += u * gelu_grad(x);
                }
            }
            Op::Exp(a) => {
                let yv = self.nodes[idx].values.clone();
                for ((g, u), y) in self.grads[a.0].iter_mut().zip(up).zip(&yv) {
                    *g += u * y;
                }
            }
            Op::Log(a) => {
                let av = self.nodes[a.0].values.clone();
                for ((g, u), &x) in self.grads[a.0].iter_mut().zip(up).zip(&av) {
                    *g += u / x.max(LOG_FLOOR);
                }
            }
            Op::Softmax(a, axis) => {
                let shape = self.nodes[idx].shape.clone();
                let yv = self.nodes[idx].values.clone();
                let mut da = vec![0.0; yv.len()];
                for_each_lane(&shape, *axis, |offset, stride, len| {
                    let mut dot = 0.0;
                    for i in 0..len {
                        let p = offset + i * stride;
                        dot += up[p] * yv[p];
                    }
                    for i in 0..len {
                        let p = offset + i * stride;
                        da[p] = yv[p] * (up[p] - dot);
                    }
                });
                add_into(&mut self.grads[a.0], &da);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let d = *self.nodes[x.0].shape.last().unwrap();
                let rows = self.nodes[x.0].values.len() / d;
                let xv = self.nodes[x.0].values.clone();
                let gv = self.nodes[gain.0].values.clone();
                let mut dx = vec![0.0; rows * d];
                let mut dg = vec![0.0; d];
                let mut dbv = vec![0.0; d];
                for r in 0..rows {
                    let row = &xv[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let urow = &up[r * d..(r + 1) * d];
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv;
                        let dxhat = urow[j] * gv[j];
                        dbv[j] += urow[j];
                        dg[j] += urow[j] * xhat;
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat;
                    }
                    mean_dxhat /= d as f64;
                    mean_dxhat_xhat /= d as f64;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv;
                        let dxhat = urow[j] * gv[j];
                        dx[r * d + j] = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
                add_into(&mut self.grads[x.0], &dx);
                add_into(&mut self.grads[gain.0], &dg);
                add_into(&mut self.grads[bias.0], &dbv);
            }
            Op::CrossEntropy { logits, targets } => {
                let (n, c) = (
                    self.nodes[logits.0].shape[0],
                    self.nodes[logits.0].shape[1],
                );
                let lv = self.nodes[logits.0].values.clone();
                let u = up[0];
                let mut dl = vec![0.0; n * c];
                for (i, &t) in targets.iter().enumerate() {
                    let row = &lv[i * c..(i + 1) * c];
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                    for j in 0..c {
                        let p = (row[j] - mx).exp() / z;
                        let one = if j == t { 1.0 } else { 0.0 };
                        dl[i * c + j] = u * (p - one) / n as f64;
                    }
                }
                add_into(&mut self.grads[logits.0], &dl);
            }
            Op::Sum(a) => {
                let u = up[0];
                for g in self.grads[a.0].iter_mut() {
                    *g += u;
                }
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].values.len();
                let u = up[0] / n as f64;
                for g in self.grads[a.0].iter_mut() {
                    *g += u;
                }
            }
            Op::GatherRows { src, indices } => {
                let d = self.nodes[src.0].shape[1];
                for (i, &row) in indices.iter().enumerate() {
                    for j in 0..d {
                        self.grads[src.0][row * d + j] += up[i * d + j];
                    }
                }
            }
            Op::GatherFlat { src, indices } => {
                for (k, &i) in indices.iter().enumerate() {
                    if i != PAD {
                        self.grads[src.0][i] += up[k];
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].values.len();
                    add_into(&mut self.grads[p.0], &up[offset..offset + len]);
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let n = self.nodes[parts[0].0].shape[0];
                let d_total: usize = parts.iter().map(|p| self.nodes[p.0].shape[1]).sum();
                let mut col = 0;
                for &p in parts {
                    let dp = self.nodes[p.0].shape[1];
                    for i in 0..n {
                        for j in 0..dp {
                            self.grads[p.0][i * dp + j] += up[i * d_total + col + j];
                        }
                    }
                    col += dp;
                }
            }
            Op::SliceRows { src, start, len } => {
                let d = self.nodes[src.0].shape[1];
                add_into(
                    &mut self.grads[src.0][start * d..(start + len) * d],
                    up,
                );
            }
            Op::SliceCols { src, start, len } => {
                let (n, d) = (self.nodes[src.0].shape[0], self.nodes[src.0].shape[1]);
                for i in 0..n {
                    for j in 0..*len {
                        self.grads[src.0][i * d + start + j] += up[i * len + j];
                    }
                }
            }
            Op::Transpose(a) => {
                let (n, d) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                for i in 0..n {
                    for j in 0..d {
                        self.grads[a.0][i * d + j] += up[j * n + i];
                    }
                }
            }
            Op::Reshape(a) => add_into(&mut self.grads[a.0], up),
            Op::L2NormalizeRows(a) => {
                let (n, d) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let av = self.nodes[a.0].values.clone();
                let yv = self.nodes[idx].values.clone();
                for i in 0..n {
                    let row = &av[i * d..(i + 1) * d];
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let yrow = &yv[i * d..(i + 1) * d];
                    let urow = &up[i * d..(i + 1) * d];
                    let dot: f64 = urow.iter().zip(yrow).map(|(u, y)| u * y).sum();
                    for j in 0..d {
                        self.grads[a.0][i * d + j] += (urow[j] - dot * yrow[j]) / norm;
                    }
                }
            }
        }
    }

    // ── composites ──────────────────────────────────────────────────

    /// Mean squared error between two same-shape nodes.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += x * brow[j];
            }
        }
    }
    c
}

/// Visit every 1-D lane along `axis` of a row-major array: calls
/// `f(offset, stride, len)` once per lane.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            f(o * len * inner + i, inner, len);
        }
    }
}

fn gelu_fwd(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}
