//! Dense f64 tensors with reverse-mode autodiff on a linear tape.
//!
//! Every forward op records a node; `Tape::backward` from a scalar output
//! fills each reachable node's gradient slot. Gradients are accumulated in
//! a fixed order (reverse node-creation index), so repeated backward passes
//! over the same graph are bit-identical.

use statrs::function::erf::erf;
use thiserror::Error;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {detail}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        detail: String,
    },
    #[error("{op}: index {index} out of range (limit {limit})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("{op}: non-finite value produced at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("backward requires a scalar output, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLen { len: usize, shape: Vec<usize> },
    #[error("finite-difference probe produced non-finite f at coordinate {coord}")]
    NonFiniteProbe { coord: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::DataLen {
                len: data.len(),
                shape,
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Rows of a 2-D tensor (a 1-D tensor counts as a single row).
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1]
        } else {
            self.shape.first().copied().unwrap_or(0)
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// C = A · B, or A · Bᵀ when `transpose_b`.
    Matmul { transpose_b: bool },
    /// Elementwise add; rhs may be a row vector broadcast over rows.
    Add,
    /// Elementwise multiply; rhs may be a row vector broadcast over rows.
    Mul,
    SoftmaxRows,
    /// Per-row normalization (x − mean) / sqrt(var + eps). Gain/bias are
    /// separate Mul/Add nodes.
    LayerNorm,
    Gelu,
    /// Output row t = table row ids[t]; the table is the single input.
    EmbedLookup { ids: Vec<usize> },
    SliceRows { start: usize },
    SliceCols { start: usize, len: usize },
    ConcatCols,
    Scale { factor: f64 },
    /// y = x with y[positions[j]] = vals[j]; inputs are [x, vals].
    ReplaceElems { positions: Vec<usize> },
    /// Scalar sum of the selected flat elements.
    SelectSum { indices: Vec<usize> },
    Ln,
    /// Scalar Σ|x| (subgradient sign(x), sign(0) = 0).
    SumAbs,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul { .. } => "matmul",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::SoftmaxRows => "softmax-rows",
            Op::LayerNorm => "layer-normalize",
            Op::Gelu => "gelu",
            Op::EmbedLookup { .. } => "embed-lookup",
            Op::SliceRows { .. } => "slice-rows",
            Op::SliceCols { .. } => "slice-cols",
            Op::ConcatCols => "concat-cols",
            Op::Scale { .. } => "scale",
            Op::ReplaceElems { .. } => "replace-elems",
            Op::SelectSum { .. } => "select-sum",
            Op::Ln => "ln",
            Op::SumAbs => "sum-abs",
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    grad: Vec<f64>,
}

/// Single-threaded computation graph. Independent tapes share no state, so
/// separate forward passes may run on separate threads freely.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub fn gelu_scalar(x: f64) -> f64 {
    x * 0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    let phi_cdf = 0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2));
    let phi_pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi_cdf + x * phi_pdf
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> Result<NodeId> {
        let name = op.name();
        if let Some(i) = value.data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: name, index: i });
        }
        let n = value.len();
        self.nodes.push(Node {
            op,
            inputs,
            value,
            grad: vec![0.0; n],
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Leaf, vec![], value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, false)
    }

    /// A · Bᵀ with B stored row-major as [n, k].
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape.len() != 2 || bv.shape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: av.shape.clone(),
                rhs: bv.shape.clone(),
            });
        }
        let (m, k) = (av.shape[0], av.shape[1]);
        let (bk, n) = if transpose_b {
            (bv.shape[1], bv.shape[0])
        } else {
            (bv.shape[0], bv.shape[1])
        };
        if k != bk {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: av.shape.clone(),
                rhs: bv.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                if transpose_b {
                    for p in 0..k {
                        acc += av.data[i * k + p] * bv.data[j * k + p];
                    }
                } else {
                    for p in 0..k {
                        acc += av.data[i * k + p] * bv.data[p * n + j];
                    }
                }
                out[i * n + j] = acc;
            }
        }
        self.push(
            Op::Matmul { transpose_b },
            vec![a, b],
            Tensor::new(vec![m, n], out)?,
        )
    }

    fn broadcast_ok(lhs: &Tensor, rhs: &Tensor) -> bool {
        lhs.shape == rhs.shape || (lhs.shape.len() == 2 && rhs.len() == lhs.shape[1])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !Self::broadcast_ok(av, bv) {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: av.shape.clone(),
                rhs: bv.shape.clone(),
            });
        }
        let c = bv.len();
        let out: Vec<f64> = av
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv.data[i % c])
            .collect();
        let shape = av.shape.clone();
        self.push(Op::Add, vec![a, b], Tensor::new(shape, out)?)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !Self::broadcast_ok(av, bv) {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: av.shape.clone(),
                rhs: bv.shape.clone(),
            });
        }
        let c = bv.len();
        let out: Vec<f64> = av
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v * bv.data[i % c])
            .collect();
        let shape = av.shape.clone();
        self.push(Op::Mul, vec![a, b], Tensor::new(shape, out)?)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let av = &self.nodes[a.0].value;
        let (r, c) = (av.rows(), av.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &av.data[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - mx).exp();
                out[i * c + j] = e;
                z += e;
            }
            for j in 0..c {
                out[i * c + j] /= z;
            }
        }
        let shape = av.shape.clone();
        self.push(Op::SoftmaxRows, vec![a], Tensor::new(shape, out)?)
    }

    pub fn layer_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let av = &self.nodes[a.0].value;
        let (r, c) = (av.rows(), av.cols());
        if c == 0 {
            return Err(TensorError::InvalidShape {
                op: "layer-normalize",
                shape: av.shape.clone(),
                detail: "zero-width rows".into(),
            });
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &av.data[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * inv;
            }
        }
        let shape = av.shape.clone();
        self.push(Op::LayerNorm, vec![a], Tensor::new(shape, out)?)
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let av = &self.nodes[a.0].value;
        let out: Vec<f64> = av.data.iter().map(|&x| gelu_scalar(x)).collect();
        let shape = av.shape.clone();
        self.push(Op::Gelu, vec![a], Tensor::new(shape, out)?)
    }

    pub fn embed_lookup(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tv = &self.nodes[table.0].value;
        if tv.shape.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "embed-lookup",
                shape: tv.shape.clone(),
                detail: "table must be 2-D".into(),
            });
        }
        let (v, d) = (tv.shape[0], tv.shape[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "embed-lookup",
                    index: id,
                    limit: v,
                });
            }
            out.extend_from_slice(&tv.data[id * d..(id + 1) * d]);
        }
        self.push(
            Op::EmbedLookup { ids: ids.to_vec() },
            vec![table],
            Tensor::new(vec![ids.len(), d], out)?,
        )
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let av = &self.nodes[a.0].value;
        let (r, c) = (av.rows(), av.cols());
        if start + len > r {
            return Err(TensorError::IndexOutOfRange {
                op: "slice-rows",
                index: start + len,
                limit: r,
            });
        }
        let out = av.data[start * c..(start + len) * c].to_vec();
        self.push(
            Op::SliceRows { start },
            vec![a],
            Tensor::new(vec![len, c], out)?,
        )
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let av = &self.nodes[a.0].value;
        let (r, c) = (av.rows(), av.cols());
        if start + len > c {
            return Err(TensorError::IndexOutOfRange {
                op: "slice-cols",
                index: start + len,
                limit: c,
            });
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&av.data[i * c + start..i * c + start + len]);
        }
        self.push(
            Op::SliceCols { start, len },
            vec![a],
            Tensor::new(vec![r, len], out)?,
        )
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "concat-cols",
                shape: vec![],
                detail: "no inputs".into(),
            });
        }
        let r = self.nodes[parts[0].0].value.rows();
        let mut total = 0;
        for &p in parts {
            let pv = &self.nodes[p.0].value;
            if pv.rows() != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat-cols",
                    lhs: self.nodes[parts[0].0].value.shape.clone(),
                    rhs: pv.shape.clone(),
                });
            }
            total += pv.cols();
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let pv = &self.nodes[p.0].value;
                let c = pv.cols();
                out.extend_from_slice(&pv.data[i * c..(i + 1) * c]);
            }
        }
        self.push(
            Op::ConcatCols,
            parts.to_vec(),
            Tensor::new(vec![r, total], out)?,
        )
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let av = &self.nodes[a.0].value;
        let out: Vec<f64> = av.data.iter().map(|v| v * factor).collect();
        let shape = av.shape.clone();
        self.push(Op::Scale { factor }, vec![a], Tensor::new(shape, out)?)
    }

    /// Returns x with the listed flat positions replaced by the elements of
    /// `vals` (a leaf whose gradient slot then carries ∂out/∂value).
    pub fn replace_elems(&mut self, x: NodeId, vals: NodeId, positions: &[usize]) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let vv = &self.nodes[vals.0].value;
        if vv.len() != positions.len() {
            return Err(TensorError::ShapeMismatch {
                op: "replace-elems",
                lhs: vec![positions.len()],
                rhs: vv.shape.clone(),
            });
        }
        let mut out = xv.data.clone();
        for (j, &p) in positions.iter().enumerate() {
            if p >= out.len() {
                return Err(TensorError::IndexOutOfRange {
                    op: "replace-elems",
                    index: p,
                    limit: out.len(),
                });
            }
            out[p] = vv.data[j];
        }
        let shape = xv.shape.clone();
        self.push(
            Op::ReplaceElems {
                positions: positions.to_vec(),
            },
            vec![x, vals],
            Tensor::new(shape, out)?,
        )
    }

    pub fn select_sum(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let av = &self.nodes[a.0].value;
        let mut acc = 0.0;
        for &i in indices {
            if i >= av.len() {
                return Err(TensorError::IndexOutOfRange {
                    op: "select-sum",
                    index: i,
                    limit: av.len(),
                });
            }
            acc += av.data[i];
        }
        self.push(
            Op::SelectSum {
                indices: indices.to_vec(),
            },
            vec![a],
            Tensor::scalar(acc),
        )
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        let av = &self.nodes[a.0].value;
        let out: Vec<f64> = av.data.iter().map(|v| v.ln()).collect();
        let shape = av.shape.clone();
        self.push(Op::Ln, vec![a], Tensor::new(shape, out)?)
    }

    pub fn sum_abs(&mut self, a: NodeId) -> Result<NodeId> {
        let av = &self.nodes[a.0].value;
        let acc: f64 = av.data.iter().map(|v| v.abs()).sum();
        self.push(Op::SumAbs, vec![a], Tensor::scalar(acc))
    }

    /// Reverse pass from a scalar output. Every gradient slot is zeroed
    /// first, so repeated calls on the same tape are bit-identical.
    pub fn backward(&mut self, out: NodeId) -> Result<()> {
        if !self.nodes[out.0].value.is_scalar() {
            return Err(TensorError::NotScalar {
                shape: self.nodes[out.0].value.shape.clone(),
            });
        }
        for node in &mut self.nodes {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.nodes[out.0].grad[0] = 1.0;
        for idx in (0..=out.0).rev() {
            if self.nodes[idx].grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            self.backprop_node(idx);
        }
        Ok(())
    }

    fn backprop_node(&mut self, idx: usize) {
        let op = self.nodes[idx].op.clone();
        let inputs = self.nodes[idx].inputs.clone();
        let grad = std::mem::take(&mut self.nodes[idx].grad);
        let value = std::mem::take(&mut self.nodes[idx].value.data);
        match &op {
            Op::Leaf => {}
            Op::Matmul { transpose_b } => {
                let (a, b) = (inputs[0], inputs[1]);
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                let (m, k) = (av.shape[0], av.shape[1]);
                let n = if *transpose_b { bv.shape[0] } else { bv.shape[1] };
                if *transpose_b {
                    // dA = dC · B ; dB = dCᵀ · A
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += grad[i * n + j] * bv.data[j * k + p];
                            }
                            self.nodes[a.0].grad[i * k + p] += acc;
                        }
                    }
                    for j in 0..n {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += grad[i * n + j] * av.data[i * k + p];
                            }
                            self.nodes[b.0].grad[j * k + p] += acc;
                        }
                    }
                } else {
                    // dA = dC · Bᵀ ; dB = Aᵀ · dC
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += grad[i * n + j] * bv.data[p * n + j];
                            }
                            self.nodes[a.0].grad[i * k + p] += acc;
                        }
                    }
                    for p in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += av.data[i * k + p] * grad[i * n + j];
                            }
                            self.nodes[b.0].grad[p * n + j] += acc;
                        }
                    }
                }
            }
            Op::Add => {
                let (a, b) = (inputs[0], inputs[1]);
                let c = self.nodes[b.0].value.len();
                for (i, g) in grad.iter().enumerate() {
                    self.nodes[a.0].grad[i] += g;
                }
                for (i, g) in grad.iter().enumerate() {
                    self.nodes[b.0].grad[i % c] += g;
                }
            }
            Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                let av = self.nodes[a.0].value.data.clone();
                let bv = self.nodes[b.0].value.data.clone();
                let c = bv.len();
                for (i, g) in grad.iter().enumerate() {
                    self.nodes[a.0].grad[i] += g * bv[i % c];
                }
                for (i, g) in grad.iter().enumerate() {
                    self.nodes[b.0].grad[i % c] += g * av[i];
                }
            }
            Op::SoftmaxRows => {
                let a = inputs[0];
                let c = self.nodes[a.0].value.cols();
                let r = value.len() / c;
                for i in 0..r {
                    let y = &value[i * c..(i + 1) * c];
                    let dy = &grad[i * c..(i + 1) * c];
                    let dot: f64 = y.iter().zip(dy).map(|(yj, dj)| yj * dj).sum();
                    for j in 0..c {
                        self.nodes[a.0].grad[i * c + j] += y[j] * (dy[j] - dot);
                    }
                }
            }
            Op::LayerNorm => {
                let a = inputs[0];
                let av = self.nodes[a.0].value.clone();
                let c = av.cols();
                let r = av.rows();
                for i in 0..r {
                    let x = &av.data[i * c..(i + 1) * c];
                    let y = &value[i * c..(i + 1) * c];
                    let dy = &grad[i * c..(i + 1) * c];
                    let mean = x.iter().sum::<f64>() / c as f64;
                    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let mean_dy = dy.iter().sum::<f64>() / c as f64;
                    let mean_dy_y: f64 =
                        dy.iter().zip(y).map(|(d, yj)| d * yj).sum::<f64>() / c as f64;
                    for j in 0..c {
                        self.nodes[a.0].grad[i * c + j] +=
                            inv * (dy[j] - mean_dy - y[j] * mean_dy_y);
                    }
                }
            }
            Op::Gelu => {
                let a = inputs[0];
                let av = self.nodes[a.0].value.data.clone();
                for (i, g) in grad.iter().enumerate() {
                    self.nodes[a.0].grad[i] += g * gelu_grad_scalar(av[i]);
                }
            }
            Op::EmbedLookup { ids } => {
                let table = inputs[0];
                let d = value.len() / ids.len().max(1);
                for (t, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        self.nodes[table.0].grad[id * d + j] += grad[t * d + j];
                    }
                }
            }
            Op::SliceRows { start } => {
                let a = inputs[0];
                let c = self.nodes[a.0].value.cols();
                for (i, g) in grad.iter().enumerate() {
                    self.nodes[a.0].grad[start * c + i] += g;
                }
            }
            Op::SliceCols { start, len } => {
                let a = inputs[0];
                let c = self.nodes[a.0].value.cols();
                let r = self.nodes[a.0].value.rows();
                for i in 0..r {
                    for j in 0..*len {
                        self.nodes[a.0].grad[i * c + start + j] += grad[i * len + j];
                    }
                }
            }
            Op::ConcatCols => {
                let total: usize = inputs
                    .iter()
                    .map(|&p| self.nodes[p.0].value.cols())
                    .sum();
                let r = value.len() / total;
                let mut offset = 0;
                for &p in &inputs {
                    let c = self.nodes[p.0].value.cols();
                    for i in 0..r {
                        for j in 0..c {
                            self.nodes[p.0].grad[i * c + j] += grad[i * total + offset + j];
                        }
                    }
                    offset += c;
                }
            }
            Op::Scale { factor } => {
                let a = inputs[0];
                for (i, g) in grad.iter().enumerate() {
                    self.nodes[a.0].grad[i] += g * factor;
                }
            }
            Op::ReplaceElems { positions } => {
                let (x, vals) = (inputs[0], inputs[1]);
                let mut replaced = vec![false; grad.len()];
                for &p in positions {
                    replaced[p] = true;
                }
                for (i, g) in grad.iter().enumerate() {
                    if !replaced[i] {
                        self.nodes[x.0].grad[i] += g;
                    }
                }
                for (j, &p) in positions.iter().enumerate() {
                    self.nodes[vals.0].grad[j] += grad[p];
                }
            }
            Op::SelectSum { indices } => {
                let a = inputs[0];
                let g = grad[0];
                for &i in indices {
                    self.nodes[a.0].grad[i] += g;
                }
            }
            Op::Ln => {
                let a = inputs[0];
                let av = self.nodes[a.0].value.data.clone();
                for (i, g) in grad.iter().enumerate() {
                    self.nodes[a.0].grad[i] += g / av[i];
                }
            }
            Op::SumAbs => {
                let a = inputs[0];
                let av = self.nodes[a.0].value.data.clone();
                let g = grad[0];
                for (i, &x) in av.iter().enumerate() {
                    self.nodes[a.0].grad[i] += g * x.signum() * (x != 0.0) as u8 as f64;
                }
            }
        }
        self.nodes[idx].grad = grad;
        self.nodes[idx].value.data = value;
    }
}

/// Max over coordinates of |analytic − central-difference| / max(|analytic|, 1e-12)
/// for a scalar tape function of one leaf tensor.
pub fn finite_difference_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(t.clone())?;
        let out = f(&mut tape, x)?;
        if !tape.value(out).is_scalar() {
            return Err(TensorError::NotScalar {
                shape: tape.value(out).shape.clone(),
            });
        }
        Ok(tape.value(out).data[0])
    };

    let mut tape = Tape::new();
    let x = tape.leaf(point.clone())?;
    let out = f(&mut tape, x)?;
    tape.backward(out)?;
    let analytic = tape.grad(x).to_vec();

    let mut max_err: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data[i] += step;
        let mut minus = point.clone();
        minus.data[i] -= step;
        let (fp, fm) = (eval(&plus)?, eval(&minus)?);
        if !fp.is_finite() || !fm.is_finite() {
            return Err(TensorError::NonFiniteProbe { coord: i });
        }
        let cd = (fp - fm) / (2.0 * step);
        let err = (analytic[i] - cd).abs() / analytic[i].abs().max(1e-12);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn matmul_shape_algebra() {
        let mut tape = Tape::new();
        let a = tape
            .leaf(Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap())
            .unwrap();
        let b = tape
            .leaf(Tensor::new(vec![3, 2], vec![1., 0., 0., 1., 1., 1.]).unwrap())
            .unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape, vec![2, 2]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3])).unwrap();
        let b = tape.leaf(Tensor::zeros(vec![2, 2])).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn softmax_symmetry_and_row_sums() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![1, 2], vec![0., 0.]).unwrap()).unwrap();
        let s = tape.softmax_rows(a).unwrap();
        assert_eq!(tape.value(s).data, vec![0.5, 0.5]);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, vec![5, 9]);
        let mut tape = Tape::new();
        let a = tape.leaf(x).unwrap();
        let s = tape.softmax_rows(a).unwrap();
        let v = tape.value(s);
        for i in 0..5 {
            let row = &v.data[i * 9..(i + 1) * 9];
            assert!(row.iter().all(|&p| p >= 0.0));
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn gelu_zero_is_zero() {
        assert_eq!(gelu_scalar(0.0), 0.0);
    }

    #[test]
    fn backward_affine_and_square() {
        // f = 3n + 2 at n = 1
        let mut tape = Tape::new();
        let n = tape.leaf(Tensor::scalar(1.0)).unwrap();
        let s = tape.scale(n, 3.0).unwrap();
        let two = tape.leaf(Tensor::scalar(2.0)).unwrap();
        let f = tape.add(s, two).unwrap();
        tape.backward(f).unwrap();
        assert_eq!(tape.grad(n), &[3.0]);

        // f = n² at n = 0.5
        let mut tape = Tape::new();
        let n = tape.leaf(Tensor::scalar(0.5)).unwrap();
        let f = tape.mul(n, n).unwrap();
        tape.backward(f).unwrap();
        assert_eq!(tape.grad(n), &[1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 2])).unwrap();
        assert!(matches!(
            tape.backward(a),
            Err(TensorError::NotScalar { .. })
        ));
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, vec![4, 4]);
        let w = rand_tensor(&mut rng, vec![4, 4]);
        let mut tape = Tape::new();
        let xn = tape.leaf(x).unwrap();
        let wn = tape.leaf(w).unwrap();
        let h = tape.matmul(xn, wn).unwrap();
        let g = tape.gelu(h).unwrap();
        let s = tape.softmax_rows(g).unwrap();
        let out = tape.select_sum(s, &[0, 5, 10]).unwrap();
        tape.backward(out).unwrap();
        let g1 = tape.grad(xn).to_vec();
        tape.backward(out).unwrap();
        assert_eq!(g1, tape.grad(xn));
    }

    #[test]
    fn fd_reference_examples() {
        // f(x) = x·x summed, point [1,2]: analytic gradient [2,4]
        let point = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let err = finite_difference_check(
            |tape, x| {
                let sq = tape.mul(x, x)?;
                tape.select_sum(sq, &[0, 1])
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-8, "err = {err}");

        // constant f: exact zero both ways
        let err = finite_difference_check(
            |tape, _x| tape.leaf(Tensor::scalar(4.25)),
            &point,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);

        // linear f: FD is exact once the step is a power of two, so the
        // perturbed sums round to nothing
        let err = finite_difference_check(
            |tape, x| tape.select_sum(x, &[0, 1]),
            &point,
            0.0009765625,
        )
        .unwrap();
        assert!(err <= 1e-12, "err = {err}");
    }

    // Every supported op against central finite differences.
    #[test]
    fn gradcheck_all_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let step = 1e-5;
        let tol = 1e-4;

        let check = |name: &str,
                     point: &Tensor,
                     f: &dyn Fn(&mut Tape, NodeId) -> Result<NodeId>| {
            let err = finite_difference_check(f, point, step).unwrap();
            assert!(err <= tol, "{name}: max rel err {err}");
        };

        let x34 = rand_tensor(&mut rng, vec![3, 4]);
        let w45 = rand_tensor(&mut rng, vec![4, 5]);
        let w54 = rand_tensor(&mut rng, vec![5, 4]);
        let row4 = rand_tensor(&mut rng, vec![4]);

        // matmul (both operands, both layouts)
        let w = w45.clone();
        check("matmul-a", &x34, &|tape, x| {
            let wn = tape.leaf(w.clone())?;
            let c = tape.matmul(x, wn)?;
            tape.select_sum(c, &(0..15).collect::<Vec<_>>())
        });
        let xa = x34.clone();
        check("matmul-b", &w45, &|tape, w| {
            let xn = tape.leaf(xa.clone())?;
            let c = tape.matmul(xn, w)?;
            tape.select_sum(c, &(0..15).collect::<Vec<_>>())
        });
        let w = w54.clone();
        check("matmul-nt", &x34, &|tape, x| {
            let wn = tape.leaf(w.clone())?;
            let c = tape.matmul_nt(x, wn)?;
            tape.select_sum(c, &(0..15).collect::<Vec<_>>())
        });
        let xa = x34.clone();
        check("matmul-nt-b", &w54, &|tape, w| {
            let xn = tape.leaf(xa.clone())?;
            let c = tape.matmul_nt(xn, w)?;
            tape.select_sum(c, &(0..15).collect::<Vec<_>>())
        });

        // add / mul, same-shape and row-broadcast
        let other = rand_tensor(&mut rng, vec![3, 4]);
        let o = other.clone();
        check("add", &x34, &|tape, x| {
            let on = tape.leaf(o.clone())?;
            let s = tape.add(x, on)?;
            tape.select_sum(s, &(0..12).collect::<Vec<_>>())
        });
        let r = row4.clone();
        check("add-broadcast", &x34, &|tape, x| {
            let rn = tape.leaf(r.clone())?;
            let s = tape.add(x, rn)?;
            tape.select_sum(s, &(0..12).collect::<Vec<_>>())
        });
        let xa = x34.clone();
        check("add-broadcast-rhs", &row4, &|tape, r| {
            let xn = tape.leaf(xa.clone())?;
            let s = tape.add(xn, r)?;
            tape.select_sum(s, &(0..12).collect::<Vec<_>>())
        });
        let o = other.clone();
        check("mul", &x34, &|tape, x| {
            let on = tape.leaf(o.clone())?;
            let s = tape.mul(x, on)?;
            tape.select_sum(s, &(0..12).collect::<Vec<_>>())
        });
        let r = row4.clone();
        check("mul-broadcast", &x34, &|tape, x| {
            let rn = tape.leaf(r.clone())?;
            let s = tape.mul(x, rn)?;
            tape.select_sum(s, &(0..12).collect::<Vec<_>>())
        });
        let xa = x34.clone();
        check("mul-broadcast-rhs", &row4, &|tape, r| {
            let xn = tape.leaf(xa.clone())?;
            let s = tape.mul(xn, r)?;
            tape.select_sum(s, &(0..12).collect::<Vec<_>>())
        });

        // row-wise nonlinearities; weight the output so the scalar mixes rows
        let wt: Vec<f64> = (0..12).map(|i| 0.3 + 0.1 * i as f64).collect();
        let wt2 = wt.clone();
        check("softmax-rows", &x34, &|tape, x| {
            let s = tape.softmax_rows(x)?;
            let w = tape.leaf(Tensor::new(vec![3, 4], wt2.clone())?)?;
            let m = tape.mul(s, w)?;
            tape.select_sum(m, &(0..12).collect::<Vec<_>>())
        });
        let wt2 = wt.clone();
        check("layer-normalize", &x34, &|tape, x| {
            let s = tape.layer_norm(x)?;
            let w = tape.leaf(Tensor::new(vec![3, 4], wt2.clone())?)?;
            let m = tape.mul(s, w)?;
            tape.select_sum(m, &(0..12).collect::<Vec<_>>())
        });
        check("gelu", &x34, &|tape, x| {
            let s = tape.gelu(x)?;
            tape.select_sum(s, &(0..12).collect::<Vec<_>>())
        });

        // embed-lookup (gradient w.r.t. the table, repeated ids included)
        let table = rand_tensor(&mut rng, vec![6, 3]);
        check("embed-lookup", &table, &|tape, t| {
            let e = tape.embed_lookup(t, &[1, 4, 1, 0])?;
            tape.select_sum(e, &(0..12).collect::<Vec<_>>())
        });

        // slices and concat
        check("slice-rows", &x34, &|tape, x| {
            let s = tape.slice_rows(x, 1, 2)?;
            tape.select_sum(s, &(0..8).collect::<Vec<_>>())
        });
        check("slice-cols", &x34, &|tape, x| {
            let s = tape.slice_cols(x, 1, 2)?;
            tape.select_sum(s, &(0..6).collect::<Vec<_>>())
        });
        check("concat-cols", &x34, &|tape, x| {
            let a = tape.slice_cols(x, 0, 2)?;
            let b = tape.slice_cols(x, 2, 2)?;
            let c = tape.concat_cols(&[b, a])?;
            let sq = tape.mul(c, c)?;
            tape.select_sum(sq, &(0..12).collect::<Vec<_>>())
        });

        check("scale", &x34, &|tape, x| {
            let s = tape.scale(x, -1.7)?;
            tape.select_sum(s, &(0..12).collect::<Vec<_>>())
        });

        // replace-elems: gradient through both the base and the patch values
        let vals = rand_tensor(&mut rng, vec![2]);
        let v = vals.clone();
        check("replace-elems-base", &x34, &|tape, x| {
            let vn = tape.leaf(v.clone())?;
            let r = tape.replace_elems(x, vn, &[2, 7])?;
            let sq = tape.mul(r, r)?;
            tape.select_sum(sq, &(0..12).collect::<Vec<_>>())
        });
        let base = x34.clone();
        check("replace-elems-vals", &vals, &|tape, v| {
            let xn = tape.leaf(base.clone())?;
            let r = tape.replace_elems(xn, v, &[2, 7])?;
            let sq = tape.mul(r, r)?;
            tape.select_sum(sq, &(0..12).collect::<Vec<_>>())
        });

        // ln on strictly positive input
        let pos = Tensor::new(
            vec![1, 4],
            (0..4).map(|i| 0.4 + 0.3 * i as f64).collect(),
        )
        .unwrap();
        check("ln", &pos, &|tape, x| {
            let l = tape.ln(x)?;
            tape.select_sum(l, &(0..4).collect::<Vec<_>>())
        });

        // sum-abs away from the kink
        check("sum-abs", &x34, &|tape, x| tape.sum_abs(x));
    }

    #[test]
    fn two_layer_mlp_matches_finite_differences() {
        // random 2-layer MLP, relative error ≤ 1e-4 with step 1e-5
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w1 = rand_tensor(&mut rng, vec![4, 8]);
        let b1 = rand_tensor(&mut rng, vec![8]);
        let w2 = rand_tensor(&mut rng, vec![8, 3]);
        let x = rand_tensor(&mut rng, vec![1, 4]);
        let err = finite_difference_check(
            |tape, x| {
                let w1n = tape.leaf(w1.clone())?;
                let b1n = tape.leaf(b1.clone())?;
                let w2n = tape.leaf(w2.clone())?;
                let h = tape.matmul(x, w1n)?;
                let h = tape.add(h, b1n)?;
                let h = tape.gelu(h)?;
                let o = tape.matmul(h, w2n)?;
                let s = tape.softmax_rows(o)?;
                tape.select_sum(s, &[0])
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "err = {err}");
    }

    #[test]
    fn non_finite_forward_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![1, 2], vec![-1.0, 2.0]).unwrap()).unwrap();
        let err = tape.ln(a).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
    }
}
