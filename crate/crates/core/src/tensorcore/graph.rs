//! Reverse-mode differentiation over a define-by-run graph.
//!
//! A [`Graph`] owns every node created during one forward pass. Nodes are
//! appended in evaluation order, so the creation order is a topological order
//! and [`Graph::backward`] is a single reverse sweep. Each operation records
//! its parents and whatever it needs for the local derivative (the entmax
//! outputs of an attention block, the normalized rows of a layer norm, ...).
//!
//! Gradients accumulate: calling `backward` twice adds both passes into the
//! stored gradients until [`Graph::zero_grad`] is called.

use super::linalg::Cholesky;
use super::tensor::{dot, matmul_nt_into, matmul_tn_into, Tensor};
use crate::entmax::{entmax_into, entmax_jvp_into, EntmaxConfig};
use crate::error::{MladError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index(i: usize) -> NodeId {
        NodeId(i)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Exp,
    Log,
    Sqrt,
    Neg,
    Scale(f64),
    Recip,
    Square,
    /// `max(0,x) + min(0, a·(exp(x/a) − 1))`
    Celu(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// A contiguous block of rows `[start, start + len)` belonging to one window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    /// Segments for consecutive blocks of the given lengths.
    pub fn packed(lengths: impl IntoIterator<Item = usize>) -> Vec<Segment> {
        let mut start = 0;
        lengths
            .into_iter()
            .map(|len| {
                let s = Segment { start, len };
                start += len;
                s
            })
            .collect()
    }
}

struct AttentionState {
    q: NodeId,
    k: NodeId,
    v: NodeId,
    segments: Vec<Segment>,
    heads: usize,
    cfg: EntmaxConfig,
    /// Entmax weights, per segment then per head, each `len×len` row-major.
    weights: Vec<f64>,
    /// Inverted-dropout multipliers in the same layout as `weights`.
    keep: Option<Vec<f64>>,
}

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Unary(UnaryOp, NodeId),
    Binary(BinaryOp, NodeId, NodeId),
    Transpose(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    RowSum(NodeId),
    SelectCol(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    Diag(NodeId),
    RowEntmax(NodeId, f64),
    LogSumExpRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SegmentMean(NodeId, Vec<Segment>),
    Attention(Box<AttentionState>),
    Mahalanobis {
        d: NodeId,
        s: NodeId,
        solved: Vec<f64>,
    },
    LogDetSpd {
        s: NodeId,
        inverse: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> MladError {
    MladError::Dimension {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn finite(op: &str, shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(Tensor::from_raw(shape, data))
    } else {
        Err(MladError::NonFinite(op.to_string()))
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() == 2 {
        Ok((t.shape()[0], t.shape()[1]))
    } else {
        Err(MladError::Dimension {
            op,
            left: t.shape().to_vec(),
            right: vec![],
        })
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient of `id`; zeros if nothing has flowed into it.
    pub fn grad(&self, id: NodeId) -> Tensor {
        let node = &self.nodes[id.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(node.value.shape()))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Entmax weights recorded by an attention node, in segment-then-head
    /// order, each block `len×len`.
    pub fn attention_weights(&self, id: NodeId) -> Option<&[f64]> {
        match &self.nodes[id.0].op {
            Op::Attention(st) => Some(&st.weights),
            _ => None,
        }
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    pub fn unary(&mut self, op: UnaryOp, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        let domain = |detail: &str| MladError::NumericDomain {
            op: "elementwise",
            detail: detail.to_string(),
        };
        match op {
            UnaryOp::Log if x.data().iter().any(|&v| v <= 0.0) => {
                return Err(domain("log of a non-positive value"))
            }
            UnaryOp::Sqrt if x.data().iter().any(|&v| v < 0.0) => {
                return Err(domain("sqrt of a negative value"))
            }
            UnaryOp::Recip if x.data().contains(&0.0) => {
                return Err(domain("reciprocal of zero"))
            }
            UnaryOp::Celu(a) if !(a > 0.0) => return Err(domain("celu alpha must be positive")),
            _ => {}
        }
        let f: Box<dyn Fn(f64) -> f64> = match op {
            UnaryOp::Exp => Box::new(f64::exp),
            UnaryOp::Log => Box::new(f64::ln),
            UnaryOp::Sqrt => Box::new(f64::sqrt),
            UnaryOp::Neg => Box::new(|v| -v),
            UnaryOp::Scale(c) => Box::new(move |v| c * v),
            UnaryOp::Recip => Box::new(|v| 1.0 / v),
            UnaryOp::Square => Box::new(|v| v * v),
            UnaryOp::Celu(a) => Box::new(move |v| celu(v, a)),
        };
        let data = x.data().iter().map(|&v| f(v)).collect();
        let value = finite("elementwise", x.shape().to_vec(), data)?;
        let ng = self.needs(&[a]);
        Ok(self.push(value, Op::Unary(op, a), ng))
    }

    pub fn binary(&mut self, op: BinaryOp, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        let shape = if x.shape() == y.shape() || y.numel() == 1 {
            x.shape().to_vec()
        } else if x.numel() == 1 {
            y.shape().to_vec()
        } else {
            return Err(dim_err("elementwise", x, y));
        };
        let n: usize = shape.iter().product();
        let xa = |i: usize| if x.numel() == 1 { x.data()[0] } else { x.data()[i] };
        let yb = |i: usize| if y.numel() == 1 { y.data()[0] } else { y.data()[i] };
        if op == BinaryOp::Div && (0..n).any(|i| yb(i) == 0.0) {
            return Err(MladError::NumericDomain {
                op: "elementwise",
                detail: "division by zero".into(),
            });
        }
        let data = (0..n)
            .map(|i| match op {
                BinaryOp::Add => xa(i) + yb(i),
                BinaryOp::Sub => xa(i) - yb(i),
                BinaryOp::Mul => xa(i) * yb(i),
                BinaryOp::Div => xa(i) / yb(i),
            })
            .collect();
        let value = finite("elementwise", shape, data)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, Op::Binary(op, a, b), ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.unary(UnaryOp::Scale(c), a)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        require_matrix("transpose", self.value(a))?;
        let value = self.value(a).transpose();
        let ng = self.needs(&[a]);
        Ok(self.push(value, Op::Transpose(a), ng))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).data().iter().sum();
        let value = finite("sum", vec![], vec![s])?;
        let ng = self.needs(&[a]);
        Ok(self.push(value, Op::SumAll(a), ng))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        let s = x.data().iter().sum::<f64>() / x.numel() as f64;
        let value = finite("mean", vec![], vec![s])?;
        let ng = self.needs(&[a]);
        Ok(self.push(value, Op::MeanAll(a), ng))
    }

    /// `r×c → r×1`
    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        let (r, _) = require_matrix("row_sum", x)?;
        let data = (0..r).map(|i| x.row(i).iter().sum()).collect();
        let value = finite("row_sum", vec![r, 1], data)?;
        let ng = self.needs(&[a]);
        Ok(self.push(value, Op::RowSum(a), ng))
    }

    /// Column `k` of a matrix, as `r×1`.
    pub fn select_col(&mut self, a: NodeId, k: usize) -> Result<NodeId> {
        let x = self.value(a);
        let (r, c) = require_matrix("select_col", x)?;
        if k >= c {
            return Err(MladError::Dimension {
                op: "select_col",
                left: x.shape().to_vec(),
                right: vec![k],
            });
        }
        let data = (0..r).map(|i| x.get(i, k)).collect();
        let value = Tensor::from_raw(vec![r, 1], data);
        let ng = self.needs(&[a]);
        Ok(self.push(value, Op::SelectCol(a, k), ng))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = self.value(*parts.first().ok_or_else(|| {
            MladError::Contract("concat_cols of nothing".into())
        })?);
        let (r, _) = require_matrix("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            let (pr, pc) = require_matrix("concat_cols", t)?;
            if pr != r {
                return Err(dim_err("concat_cols", first, t));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::from_raw(vec![r, total], data);
        let ng = self.needs(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Diagonal of a square matrix, as `m×1`.
    pub fn diag(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        let (r, c) = require_matrix("diag", x)?;
        if r != c {
            return Err(dim_err("diag", x, x));
        }
        let data = (0..r).map(|i| x.get(i, i)).collect();
        let value = Tensor::from_raw(vec![r, 1], data);
        let ng = self.needs(&[a]);
        Ok(self.push(value, Op::Diag(a), ng))
    }

    /// α-entmax applied to every row.
    pub fn row_entmax(&mut self, a: NodeId, cfg: &EntmaxConfig) -> Result<NodeId> {
        cfg.validate()?;
        let x = self.value(a);
        let (r, c) = require_matrix("row_entmax", x)?;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            entmax_into(x.row(i), cfg, &mut data[i * c..(i + 1) * c]);
        }
        let value = finite("row_entmax", vec![r, c], data)?;
        let ng = self.needs(&[a]);
        Ok(self.push(value, Op::RowEntmax(a, cfg.alpha), ng))
    }

    /// Numerically stable `log Σ_j exp(x_ij)` per row, `r×c → r×1`.
    pub fn logsumexp_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        let (r, _) = require_matrix("logsumexp_rows", x)?;
        let data = (0..r).map(|i| logsumexp(x.row(i))).collect();
        let value = finite("logsumexp_rows", vec![r, 1], data)?;
        let ng = self.needs(&[a]);
        Ok(self.push(value, Op::LogSumExpRows(a), ng))
    }

    /// Per-row normalization to zero mean and unit variance followed by an
    /// affine map with `gain` and `bias` (both `1×c`).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let xv = self.value(x);
        let (r, c) = require_matrix("layer_norm", xv)?;
        let (g, b) = (self.value(gain), self.value(bias));
        if g.numel() != c || b.numel() != c {
            return Err(dim_err("layer_norm", xv, g));
        }
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = xv.row(i);
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..c {
                let h = (row[j] - mu) * inv;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let value = finite("layer_norm", vec![r, c], out)?;
        let ng = self.needs(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Mean of each segment's rows: `rows×c → segments×c`.
    pub fn segment_mean(&mut self, a: NodeId, segments: &[Segment]) -> Result<NodeId> {
        let x = self.value(a);
        let (r, c) = require_matrix("segment_mean", x)?;
        check_segments("segment_mean", segments, r)?;
        let mut data = vec![0.0; segments.len() * c];
        for (s, seg) in segments.iter().enumerate() {
            let out = &mut data[s * c..(s + 1) * c];
            for i in seg.start..seg.start + seg.len {
                for (o, v) in out.iter_mut().zip(x.row(i)) {
                    *o += v;
                }
            }
            let inv = 1.0 / seg.len as f64;
            out.iter_mut().for_each(|o| *o *= inv);
        }
        let value = finite("segment_mean", vec![segments.len(), c], data)?;
        let ng = self.needs(&[a]);
        Ok(self.push(value, Op::SegmentMean(a, segments.to_vec()), ng))
    }

    /// Number of attention weights a call with these segments and heads records.
    pub fn attention_weight_count(segments: &[Segment], heads: usize) -> usize {
        segments.iter().map(|s| heads * s.len * s.len).sum()
    }

    /// Multi-head scaled dot-product attention with entmax weights, applied
    /// independently inside every segment. `keep`, when present, multiplies
    /// the weights elementwise (inverted dropout) and must have
    /// [`Graph::attention_weight_count`] entries.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        segments: &[Segment],
        heads: usize,
        cfg: &EntmaxConfig,
        keep: Option<Vec<f64>>,
    ) -> Result<NodeId> {
        cfg.validate()?;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = require_matrix("attention", qv)?;
        if kv.shape() != qv.shape() || vv.shape() != qv.shape() {
            return Err(dim_err("attention", qv, kv));
        }
        if heads == 0 || d % heads != 0 {
            return Err(MladError::Config(format!(
                "{heads} heads do not divide model width {d}"
            )));
        }
        check_segments("attention", segments, rows)?;
        let count = Graph::attention_weight_count(segments, heads);
        if let Some(mask) = &keep {
            if mask.len() != count {
                return Err(MladError::Dimension {
                    op: "attention dropout",
                    left: vec![mask.len()],
                    right: vec![count],
                });
            }
        }
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut weights = vec![0.0; count];
        let mut out = vec![0.0; rows * d];
        let mut scores = Vec::new();
        let mut off = 0;
        for seg in segments {
            let l = seg.len;
            scores.resize(l, 0.0);
            for h in 0..heads {
                let c0 = h * dk;
                for i in 0..l {
                    let qi = &qd[(seg.start + i) * d + c0..(seg.start + i) * d + c0 + dk];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kj = &kd[(seg.start + j) * d + c0..(seg.start + j) * d + c0 + dk];
                        *s = dot(qi, kj) * scale;
                    }
                    let w = &mut weights[off + i * l..off + (i + 1) * l];
                    entmax_into(&scores, cfg, w);
                    let orow = &mut out[(seg.start + i) * d + c0..(seg.start + i) * d + c0 + dk];
                    for j in 0..l {
                        let mut wij = w[j];
                        if let Some(mask) = &keep {
                            wij *= mask[off + i * l + j];
                        }
                        if wij == 0.0 {
                            continue;
                        }
                        let vj = &vd[(seg.start + j) * d + c0..(seg.start + j) * d + c0 + dk];
                        for (o, vv) in orow.iter_mut().zip(vj) {
                            *o += wij * vv;
                        }
                    }
                }
                off += l * l;
            }
        }
        let value = finite("attention", vec![rows, d], out)?;
        let ng = self.needs(&[q, k, v]);
        Ok(self.push(
            value,
            Op::Attention(Box::new(AttentionState {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                cfg: *cfg,
                weights,
                keep,
            })),
            ng,
        ))
    }

    /// Row-wise squared Mahalanobis norms `d_iᵀ S⁻¹ d_i` for `D: n×m` and a
    /// symmetric positive-definite `S: m×m`, computed by Cholesky solves.
    pub fn mahalanobis(&mut self, d: NodeId, s: NodeId) -> Result<NodeId> {
        let (dv, sv) = (self.value(d), self.value(s));
        let (n, m) = require_matrix("mahalanobis", dv)?;
        if sv.shape() != [m, m] {
            return Err(dim_err("mahalanobis", dv, sv));
        }
        let chol = Cholesky::factor(sv.data(), m).ok_or_else(|| MladError::NumericDomain {
            op: "mahalanobis",
            detail: "matrix is not positive definite".into(),
        })?;
        let mut solved = dv.data().to_vec();
        let mut out = vec![0.0; n];
        for i in 0..n {
            let z = &mut solved[i * m..(i + 1) * m];
            chol.solve(z);
            out[i] = dot(z, dv.row(i));
        }
        let value = finite("mahalanobis", vec![n, 1], out)?;
        let ng = self.needs(&[d, s]);
        Ok(self.push(value, Op::Mahalanobis { d, s, solved }, ng))
    }

    /// `log|S|` of a symmetric positive-definite matrix.
    pub fn logdet_spd(&mut self, s: NodeId) -> Result<NodeId> {
        let sv = self.value(s);
        let (m, c) = require_matrix("logdet_spd", sv)?;
        if m != c {
            return Err(dim_err("logdet_spd", sv, sv));
        }
        let chol = Cholesky::factor(sv.data(), m).ok_or_else(|| MladError::NumericDomain {
            op: "logdet_spd",
            detail: "matrix is not positive definite".into(),
        })?;
        let value = finite("logdet_spd", vec![], vec![chol.log_det()])?;
        let inverse = chol.inverse();
        let ng = self.needs(&[s]);
        Ok(self.push(value, Op::LogDetSpd { s, inverse }, ng))
    }

    /// Accumulates `∂root/∂node` into every node that leads to `root`.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(MladError::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut pending: Vec<Option<Vec<f64>>> = Vec::new();
        pending.resize_with(root.0 + 1, || None);
        pending[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = pending[i].take() else {
                continue;
            };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut pending);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(&g)
                    .for_each(|(a, b)| *a += b),
                None => node.grad = Some(Tensor::from_raw(node.value.shape().to_vec(), g)),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], pending: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        macro_rules! buf {
            ($id:expr) => {
                slot(nodes, pending, $id)
            };
        }
        let val = |id: NodeId| &nodes[id.0].value;
        let y = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if let Some(ga) = buf!(*a) {
                    matmul_nt_into(g, bv.data(), ga, m, n, k);
                }
                if let Some(gb) = buf!(*b) {
                    matmul_tn_into(av.data(), g, gb, m, k, n);
                }
            }
            Op::Unary(op, a) => {
                let x = val(*a).data();
                if let Some(ga) = buf!(*a) {
                    for (j, gj) in g.iter().enumerate() {
                        let d = match *op {
                            UnaryOp::Exp => y.data()[j],
                            UnaryOp::Log => 1.0 / x[j],
                            UnaryOp::Sqrt => 0.5 / y.data()[j],
                            UnaryOp::Neg => -1.0,
                            UnaryOp::Scale(c) => c,
                            UnaryOp::Recip => -y.data()[j] * y.data()[j],
                            UnaryOp::Square => 2.0 * x[j],
                            UnaryOp::Celu(alpha) => {
                                if x[j] > 0.0 {
                                    1.0
                                } else {
                                    (x[j] / alpha).exp()
                                }
                            }
                        };
                        ga[j] += gj * d;
                    }
                }
            }
            Op::Binary(op, a, b) => {
                let (xa, xb) = (val(*a).data(), val(*b).data());
                let at = |s: &[f64], j: usize| if s.len() == 1 { s[0] } else { s[j] };
                if let Some(ga) = buf!(*a) {
                    let bcast = ga.len() == 1 && g.len() > 1;
                    for (j, gj) in g.iter().enumerate() {
                        let d = match op {
                            BinaryOp::Add | BinaryOp::Sub => 1.0,
                            BinaryOp::Mul => at(xb, j),
                            BinaryOp::Div => 1.0 / at(xb, j),
                        };
                        ga[if bcast { 0 } else { j }] += gj * d;
                    }
                }
                if let Some(gb) = buf!(*b) {
                    let bcast = gb.len() == 1 && g.len() > 1;
                    for (j, gj) in g.iter().enumerate() {
                        let d = match op {
                            BinaryOp::Add => 1.0,
                            BinaryOp::Sub => -1.0,
                            BinaryOp::Mul => at(xa, j),
                            BinaryOp::Div => {
                                let bj = at(xb, j);
                                -at(xa, j) / (bj * bj)
                            }
                        };
                        gb[if bcast { 0 } else { j }] += gj * d;
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (val(*a).rows(), val(*a).cols());
                if let Some(ga) = buf!(*a) {
                    for p in 0..r {
                        for q in 0..c {
                            ga[p * c + q] += g[q * r + p];
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(ga) = buf!(*a) {
                    ga.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::MeanAll(a) => {
                if let Some(ga) = buf!(*a) {
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|v| *v += s);
                }
            }
            Op::RowSum(a) => {
                let c = val(*a).cols();
                if let Some(ga) = buf!(*a) {
                    for (row, gi) in ga.chunks_mut(c).zip(g) {
                        row.iter_mut().for_each(|v| *v += gi);
                    }
                }
            }
            Op::SelectCol(a, k) => {
                let c = val(*a).cols();
                if let Some(ga) = buf!(*a) {
                    for (i, gi) in g.iter().enumerate() {
                        ga[i * c + k] += gi;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let mut col0 = 0;
                for p in parts {
                    let w = val(*p).cols();
                    if let Some(gp) = buf!(*p) {
                        for (i, row) in gp.chunks_mut(w).enumerate() {
                            for (j, v) in row.iter_mut().enumerate() {
                                *v += g[i * total + col0 + j];
                            }
                        }
                    }
                    col0 += w;
                }
            }
            Op::Diag(a) => {
                let m = val(*a).cols();
                if let Some(ga) = buf!(*a) {
                    for (i, gi) in g.iter().enumerate() {
                        ga[i * m + i] += gi;
                    }
                }
            }
            Op::RowEntmax(a, alpha) => {
                let c = y.cols();
                if let Some(ga) = buf!(*a) {
                    let mut tmp = vec![0.0; c];
                    for (r, grow) in g.chunks(c).enumerate() {
                        entmax_jvp_into(y.row(r), *alpha, grow, &mut tmp);
                        for (o, t) in ga[r * c..(r + 1) * c].iter_mut().zip(&tmp) {
                            *o += t;
                        }
                    }
                }
            }
            Op::LogSumExpRows(a) => {
                let x = val(*a);
                let c = x.cols();
                if let Some(ga) = buf!(*a) {
                    for (r, gi) in g.iter().enumerate() {
                        let lse = y.data()[r];
                        for (o, xv) in ga[r * c..(r + 1) * c].iter_mut().zip(x.row(r)) {
                            *o += gi * (xv - lse).exp();
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = y.cols();
                let gainv = val(*gain).data();
                if let Some(gb) = buf!(*bias) {
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                }
                if let Some(gg) = buf!(*gain) {
                    for (row, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += row[j] * hrow[j];
                        }
                    }
                }
                if let Some(gx) = buf!(*x) {
                    let mut dh = vec![0.0; c];
                    for (r, (row, hrow)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        for j in 0..c {
                            dh[j] = row[j] * gainv[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dhh = dot(&dh, hrow) / c as f64;
                        let inv = inv_std[r];
                        for j in 0..c {
                            gx[r * c + j] += inv * (dh[j] - mean_dh - hrow[j] * mean_dhh);
                        }
                    }
                }
            }
            Op::SegmentMean(a, segments) => {
                let c = y.cols();
                if let Some(ga) = buf!(*a) {
                    for (s, seg) in segments.iter().enumerate() {
                        let inv = 1.0 / seg.len as f64;
                        let gs = &g[s * c..(s + 1) * c];
                        for i in seg.start..seg.start + seg.len {
                            for (o, v) in ga[i * c..(i + 1) * c].iter_mut().zip(gs) {
                                *o += v * inv;
                            }
                        }
                    }
                }
            }
            Op::Attention(st) => self.attention_backward(st, g, pending),
            Op::Mahalanobis { d, s, solved } => {
                let m = val(*s).cols();
                if let Some(gd) = buf!(*d) {
                    for (i, gi) in g.iter().enumerate() {
                        for j in 0..m {
                            gd[i * m + j] += 2.0 * gi * solved[i * m + j];
                        }
                    }
                }
                if let Some(gs) = buf!(*s) {
                    for (i, gi) in g.iter().enumerate() {
                        let z = &solved[i * m..(i + 1) * m];
                        for a in 0..m {
                            let za = gi * z[a];
                            for b in 0..m {
                                gs[a * m + b] -= za * z[b];
                            }
                        }
                    }
                }
            }
            Op::LogDetSpd { s, inverse } => {
                if let Some(gs) = buf!(*s) {
                    gs.iter_mut().zip(inverse).for_each(|(o, v)| *o += g[0] * v);
                }
            }
        }
    }

    fn attention_backward(&self, st: &AttentionState, g: &[f64], pending: &mut [Option<Vec<f64>>]) {
        let (qv, kv, vv) = (self.value(st.q), self.value(st.k), self.value(st.v));
        let d = qv.cols();
        let dk = d / st.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let take = |pending: &mut [Option<Vec<f64>>], id: NodeId| -> Option<Vec<f64>> {
            if self.nodes[id.0].needs_grad {
                Some(
                    pending[id.0]
                        .take()
                        .unwrap_or_else(|| vec![0.0; self.nodes[id.0].value.numel()]),
                )
            } else {
                None
            }
        };
        // q, k and v may alias one node; accumulate into a shared buffer then.
        let mut gq = take(pending, st.q);
        let mut gk = if st.k == st.q { None } else { take(pending, st.k) };
        let mut gv = if st.v == st.q || st.v == st.k {
            None
        } else {
            take(pending, st.v)
        };
        let mut dw = Vec::new();
        let mut ds = Vec::new();
        let mut off = 0;
        for seg in &st.segments {
            let l = seg.len;
            dw.resize(l, 0.0);
            ds.resize(l, 0.0);
            for h in 0..st.heads {
                let c0 = h * dk;
                let row = |r: usize| (seg.start + r) * d + c0;
                for i in 0..l {
                    let gi = &g[row(i)..row(i) + dk];
                    let w = &st.weights[off + i * l..off + (i + 1) * l];
                    for j in 0..l {
                        let keep = st.keep.as_ref().map_or(1.0, |m| m[off + i * l + j]);
                        dw[j] = if keep == 0.0 {
                            0.0
                        } else {
                            keep * dot(gi, &vv.data()[row(j)..row(j) + dk])
                        };
                        let wij = w[j] * keep;
                        if wij != 0.0 {
                            let target = if st.v == st.q {
                                gq.as_mut()
                            } else if st.v == st.k {
                                gk.as_mut()
                            } else {
                                gv.as_mut()
                            };
                            if let Some(gvb) = target {
                                for (o, gg) in gvb[row(j)..row(j) + dk].iter_mut().zip(gi) {
                                    *o += wij * gg;
                                }
                            }
                        }
                    }
                    entmax_jvp_into(w, st.cfg.alpha, &dw, &mut ds);
                    let qi_start = row(i);
                    for j in 0..l {
                        let sij = ds[j] * scale;
                        if sij == 0.0 {
                            continue;
                        }
                        if let Some(gqb) = gq.as_mut() {
                            for c in 0..dk {
                                gqb[qi_start + c] += sij * kv.data()[row(j) + c];
                            }
                        }
                        let target = if st.k == st.q { gq.as_mut() } else { gk.as_mut() };
                        if let Some(gkb) = target {
                            for c in 0..dk {
                                gkb[row(j) + c] += sij * qv.data()[qi_start + c];
                            }
                        }
                    }
                }
                off += l * l;
            }
        }
        if let Some(b) = gq {
            pending[st.q.0] = Some(b);
        }
        if let Some(b) = gk {
            pending[st.k.0] = Some(b);
        }
        if let Some(b) = gv {
            pending[st.v.0] = Some(b);
        }
    }
}

fn slot<'a>(nodes: &[Node], pending: &'a mut [Option<Vec<f64>>], id: NodeId) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[id.0];
    if !node.needs_grad {
        return None;
    }
    Some(pending[id.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
}

fn check_segments(op: &'static str, segments: &[Segment], rows: usize) -> Result<()> {
    let ok = segments
        .iter()
        .all(|s| s.len > 0 && s.start + s.len <= rows);
    if ok {
        Ok(())
    } else {
        Err(MladError::Dimension {
            op,
            left: vec![rows],
            right: segments.iter().map(|s| s.start + s.len).collect(),
        })
    }
}

pub fn celu(x: f64, alpha: f64) -> f64 {
    x.max(0.0) + (alpha * ((x / alpha).exp() - 1.0)).min(0.0)
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
