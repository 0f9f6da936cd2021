//! Dense tensors on a reverse-mode differentiation tape.
//!
//! A [`Graph`] records every primitive application in topological order; a
//! [`TensorId`] is a handle into it. Calling [`Graph::backward`] on a scalar
//! node walks the tape once in reverse and accumulates exact gradients into
//! every `requires_grad` leaf. One graph serves one forward/backward pass on
//! one thread; independent graphs may run on separate threads.
//!
//! Everything is double precision and row-major. The only broadcasting is
//! bias-vector addition over rows.

use crate::error::{Result, SmtaError};
use crate::kernels;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TensorId(usize);

/// A plain dense tensor living outside any graph (parameters, inputs).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Build a tensor, validating shape/data agreement and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(SmtaError::Config(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(SmtaError::Dimension {
                op: "tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(SmtaError::Numeric("non-finite value in tensor data".into()));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// A 1 x d row vector.
    pub fn row(data: Vec<f64>) -> Result<Self> {
        let d = data.len();
        Self::new(vec![1, d], data)
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Self::new(vec![1, 1], vec![v])
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Self::new(shape, vec![0.0; numel])
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<f64>>) {
        self.grad = grad;
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }
}

/// Named, ordered collection of parameter tensors. Names are unique; this is
/// what the optimizer, the checkpoint format, and the gradient checker walk.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(SmtaError::Config(format!("duplicate parameter name {name}")));
        }
        self.entries.push((name.to_string(), tensor.with_grad()));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.data.len()).sum()
    }

    /// Insert every parameter into `graph` as a grad-tracked leaf.
    pub fn bind(&self, graph: &mut Graph) -> BoundParams {
        let ids = self
            .entries
            .iter()
            .map(|(n, t)| (n.clone(), graph.leaf(t)))
            .collect();
        BoundParams { ids }
    }
}

/// Parameter names resolved to leaf ids inside one graph.
pub struct BoundParams {
    ids: Vec<(String, TensorId)>,
}

impl BoundParams {
    pub fn id(&self, name: &str) -> TensorId {
        self.ids
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    /// Collect (name, gradient) pairs after a backward pass.
    pub fn grads<'g>(&self, graph: &'g Graph) -> Vec<(&str, &'g [f64])> {
        self.ids
            .iter()
            .map(|(n, id)| (n.as_str(), graph.grad(*id).expect("missing leaf gradient")))
            .collect()
    }
}

enum Op {
    Leaf,
    /// a[m,k] . b[k,n]
    MatMul { a: TensorId, b: TensorId },
    /// a[m,k] . bT with b[n,k]
    MatMulNt { a: TensorId, b: TensorId },
    /// elementwise, same shape
    Add { a: TensorId, b: TensorId },
    /// bias [1,d] broadcast over the rows of a
    AddBias { a: TensorId, bias: TensorId },
    /// elementwise product, same shape
    Mul { a: TensorId, b: TensorId },
    Scale { a: TensorId, factor: f64 },
    Relu { a: TensorId },
    Sigmoid { a: TensorId },
    SoftmaxRows { a: TensorId },
    LayerNorm { a: TensorId, gain: TensorId, bias: TensorId, eps: f64 },
    /// mean over each consecutive group of `block` rows
    BlockMeanRows { a: TensorId, block: usize },
    Sum { a: TensorId },
    ConcatRows { parts: Vec<TensorId> },
    ConcatCols { parts: Vec<TensorId> },
    /// output row r = input row idx[r]; backward scatter-adds
    GatherRows { a: TensorId, idx: Vec<usize> },
    Reshape { a: TensorId },
    /// Row blocks of q attend to matching row blocks of k/v.
    /// Cached `weights` is [q_rows x kv_block], row-stochastic.
    BlockAttention {
        q: TensorId,
        k: TensorId,
        v: TensorId,
        q_block: usize,
        kv_block: usize,
        weights: Vec<f64>,
    },
    /// Mean binary cross-entropy of predictions [n,1] against fixed labels.
    BceLoss { pred: TensorId, labels: Vec<f64> },
}

/// Reverse-mode tape. Nodes are appended in topological order, so one reverse
/// sweep visits each exactly once.
pub struct Graph {
    ops: Vec<Op>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f64>>,
    grads: Vec<Option<Vec<f64>>>,
    requires: Vec<bool>,
    /// Transpose scratch reused across backward steps.
    scratch: Vec<f64>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            ops: Vec::new(),
            shapes: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            requires: Vec::new(),
            scratch: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.values[id.0]
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    fn rows(&self, id: TensorId) -> usize {
        self.shapes[id.0][0]
    }

    fn cols(&self, id: TensorId) -> usize {
        self.shapes[id.0].get(1).copied().unwrap_or(1)
    }

    fn is_matrix(&self, id: TensorId) -> bool {
        self.shapes[id.0].len() == 2
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, requires: bool) -> TensorId {
        let id = TensorId(self.ops.len());
        self.ops.push(op);
        self.shapes.push(shape);
        self.values.push(data);
        self.grads.push(None);
        self.requires.push(requires);
        id
    }

    fn check_finite(&self, op: &'static str, data: &[f64]) -> Result<()> {
        if data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(SmtaError::Numeric(format!("{op} produced a non-finite value")))
        }
    }

    /// Insert a leaf node carrying `tensor`'s value and grad requirement.
    pub fn leaf(&mut self, tensor: &Tensor) -> TensorId {
        self.push(
            Op::Leaf,
            tensor.shape.clone(),
            tensor.data.clone(),
            tensor.requires_grad,
        )
    }

    /// Constant leaf that never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> TensorId {
        self.push(Op::Leaf, shape, data, false)
    }

    fn dim_error(&self, op: &'static str, a: TensorId, b: TensorId) -> SmtaError {
        SmtaError::Dimension {
            op,
            lhs: self.shapes[a.0].clone(),
            rhs: self.shapes[b.0].clone(),
        }
    }

    /// Standard matrix product.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if !self.is_matrix(a) || !self.is_matrix(b) || self.cols(a) != self.rows(b) {
            return Err(self.dim_error("matmul", a, b));
        }
        let (m, k, n) = (self.rows(a), self.cols(a), self.cols(b));
        let data = kernels::gemm_nn(&self.values[a.0], &self.values[b.0], m, k, n);
        self.check_finite("matmul", &data)?;
        let req = self.requires[a.0] || self.requires[b.0];
        Ok(self.push(Op::MatMul { a, b }, vec![m, n], data, req))
    }

    /// a . bT, with b given as [n, k]. Used to apply out x in weight matrices
    /// to row-major activations.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if !self.is_matrix(a) || !self.is_matrix(b) || self.cols(a) != self.cols(b) {
            return Err(self.dim_error("matmul_nt", a, b));
        }
        let (m, k, n) = (self.rows(a), self.cols(a), self.rows(b));
        let data = kernels::gemm_nt(&self.values[a.0], &self.values[b.0], m, k, n);
        self.check_finite("matmul_nt", &data)?;
        let req = self.requires[a.0] || self.requires[b.0];
        Ok(self.push(Op::MatMulNt { a, b }, vec![m, n], data, req))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shapes[a.0] != self.shapes[b.0] {
            return Err(self.dim_error("add", a, b));
        }
        let data: Vec<f64> = self.values[a.0]
            .iter()
            .zip(&self.values[b.0])
            .map(|(x, y)| x + y)
            .collect();
        self.check_finite("add", &data)?;
        let req = self.requires[a.0] || self.requires[b.0];
        let shape = self.shapes[a.0].clone();
        Ok(self.push(Op::Add { a, b }, shape, data, req))
    }

    /// Add a [1, d] bias row to every row of a.
    pub fn add_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        if !self.is_matrix(a) || self.rows(bias) != 1 || self.cols(bias) != self.cols(a) {
            return Err(self.dim_error("add_bias", a, bias));
        }
        let d = self.cols(a);
        let bias_row = &self.values[bias.0];
        let data: Vec<f64> = self.values[a.0]
            .chunks_exact(d)
            .flat_map(|row| row.iter().zip(bias_row).map(|(x, y)| x + y))
            .collect();
        self.check_finite("add_bias", &data)?;
        let req = self.requires[a.0] || self.requires[bias.0];
        let shape = self.shapes[a.0].clone();
        Ok(self.push(Op::AddBias { a, bias }, shape, data, req))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shapes[a.0] != self.shapes[b.0] {
            return Err(self.dim_error("mul", a, b));
        }
        let data: Vec<f64> = self.values[a.0]
            .iter()
            .zip(&self.values[b.0])
            .map(|(x, y)| x * y)
            .collect();
        self.check_finite("mul", &data)?;
        let req = self.requires[a.0] || self.requires[b.0];
        let shape = self.shapes[a.0].clone();
        Ok(self.push(Op::Mul { a, b }, shape, data, req))
    }

    pub fn scale(&mut self, a: TensorId, factor: f64) -> Result<TensorId> {
        let data: Vec<f64> = self.values[a.0].iter().map(|x| x * factor).collect();
        self.check_finite("scale", &data)?;
        let req = self.requires[a.0];
        let shape = self.shapes[a.0].clone();
        Ok(self.push(Op::Scale { a, factor }, shape, data, req))
    }

    /// Elementwise max(0, x). Subgradient at 0 is 0.
    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.values[a.0].iter().map(|&x| x.max(0.0)).collect();
        let req = self.requires[a.0];
        let shape = self.shapes[a.0].clone();
        Ok(self.push(Op::Relu { a }, shape, data, req))
    }

    /// Numerically stable logistic function, elementwise.
    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.values[a.0].iter().map(|&x| stable_sigmoid(x)).collect();
        let req = self.requires[a.0];
        let shape = self.shapes[a.0].clone();
        Ok(self.push(Op::Sigmoid { a }, shape, data, req))
    }

    /// Per-row exp-normalization with max subtraction. Rows sum to 1.
    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        if !self.is_matrix(a) {
            return Err(SmtaError::Dimension {
                op: "softmax_rows",
                lhs: self.shapes[a.0].clone(),
                rhs: vec![],
            });
        }
        let d = self.cols(a);
        let mut data = Vec::with_capacity(self.values[a.0].len());
        for row in self.values[a.0].chunks_exact(d) {
            softmax_row_into(row, &mut data);
        }
        self.check_finite("softmax_rows", &data)?;
        let req = self.requires[a.0];
        let shape = self.shapes[a.0].clone();
        Ok(self.push(Op::SoftmaxRows { a }, shape, data, req))
    }

    /// Row-wise standardization followed by gain/bias, as in post-norm
    /// transformer blocks. `gain` and `bias` are [1, d].
    pub fn layer_norm(
        &mut self,
        a: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let d = self.cols(a);
        if !self.is_matrix(a) || self.cols(gain) != d || self.cols(bias) != d {
            return Err(self.dim_error("layer_norm", a, gain));
        }
        let gain_row = &self.values[gain.0];
        let bias_row = &self.values[bias.0];
        let mut data = Vec::with_capacity(self.values[a.0].len());
        for row in self.values[a.0].chunks_exact(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                data.push((row[j] - mean) * inv_std * gain_row[j] + bias_row[j]);
            }
        }
        self.check_finite("layer_norm", &data)?;
        let req = self.requires[a.0] || self.requires[gain.0] || self.requires[bias.0];
        let shape = self.shapes[a.0].clone();
        Ok(self.push(Op::LayerNorm { a, gain, bias, eps }, shape, data, req))
    }

    /// Mean over each consecutive group of `block` rows; [g*block, d] -> [g, d].
    pub fn block_mean_rows(&mut self, a: TensorId, block: usize) -> Result<TensorId> {
        let rows = self.rows(a);
        if block == 0 || rows == 0 {
            return Err(SmtaError::EmptySequence("block_mean_rows"));
        }
        if !rows.is_multiple_of(block) {
            return Err(SmtaError::Dimension {
                op: "block_mean_rows",
                lhs: self.shapes[a.0].clone(),
                rhs: vec![block],
            });
        }
        let d = self.cols(a);
        let groups = rows / block;
        let mut data = vec![0.0; groups * d];
        for g in 0..groups {
            let out = &mut data[g * d..(g + 1) * d];
            for r in 0..block {
                let row = &self.values[a.0][(g * block + r) * d..(g * block + r + 1) * d];
                kernels::add_assign(out, row);
            }
            for v in out.iter_mut() {
                *v /= block as f64;
            }
        }
        let req = self.requires[a.0];
        Ok(self.push(Op::BlockMeanRows { a, block }, vec![groups, d], data, req))
    }

    /// Mean across the time axis of a [t, d] sequence, one output row.
    pub fn mean_over_time(&mut self, a: TensorId) -> Result<TensorId> {
        let t = self.rows(a);
        if t == 0 {
            return Err(SmtaError::EmptySequence("mean_over_time"));
        }
        self.block_mean_rows(a, t)
    }

    /// Sum of all entries, as a [1, 1] scalar.
    pub fn sum(&mut self, a: TensorId) -> Result<TensorId> {
        let s: f64 = self.values[a.0].iter().sum();
        self.check_finite("sum", &[s])?;
        let req = self.requires[a.0];
        Ok(self.push(Op::Sum { a }, vec![1, 1], vec![s], req))
    }

    /// Stack matrices vertically. All parts must share a column count.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(SmtaError::EmptySequence("concat_rows"));
        }
        let d = self.cols(parts[0]);
        let mut rows = 0;
        for &p in parts {
            if self.cols(p) != d {
                return Err(self.dim_error("concat_rows", parts[0], p));
            }
            rows += self.rows(p);
        }
        let mut data = Vec::with_capacity(rows * d);
        for &p in parts {
            data.extend_from_slice(&self.values[p.0]);
        }
        let req = parts.iter().any(|&p| self.requires[p.0]);
        Ok(self.push(Op::ConcatRows { parts: parts.to_vec() }, vec![rows, d], data, req))
    }

    /// Stack matrices horizontally. All parts must share a row count.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(SmtaError::EmptySequence("concat_cols"));
        }
        let rows = self.rows(parts[0]);
        let mut width = 0;
        for &p in parts {
            if self.rows(p) != rows {
                return Err(self.dim_error("concat_cols", parts[0], p));
            }
            width += self.cols(p);
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                let c = self.cols(p);
                data.extend_from_slice(&self.values[p.0][r * c..(r + 1) * c]);
            }
        }
        let req = parts.iter().any(|&p| self.requires[p.0]);
        Ok(self.push(Op::ConcatCols { parts: parts.to_vec() }, vec![rows, width], data, req))
    }

    /// Reorder (or select) rows; output row r is input row idx[r].
    pub fn gather_rows(&mut self, a: TensorId, idx: Vec<usize>) -> Result<TensorId> {
        let rows = self.rows(a);
        if idx.iter().any(|&i| i >= rows) {
            return Err(SmtaError::Dimension {
                op: "gather_rows",
                lhs: self.shapes[a.0].clone(),
                rhs: vec![idx.len()],
            });
        }
        let d = self.cols(a);
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in &idx {
            data.extend_from_slice(&self.values[a.0][i * d..(i + 1) * d]);
        }
        let req = self.requires[a.0];
        let out_rows = idx.len();
        Ok(self.push(Op::GatherRows { a, idx }, vec![out_rows, d], data, req))
    }

    /// Reinterpret the row-major buffer under a new shape.
    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.values[a.0].len() || shape.contains(&0) {
            return Err(SmtaError::Dimension {
                op: "reshape",
                lhs: self.shapes[a.0].clone(),
                rhs: shape,
            });
        }
        let data = self.values[a.0].clone();
        let req = self.requires[a.0];
        Ok(self.push(Op::Reshape { a }, shape, data, req))
    }

    /// Scaled dot-product attention over paired row blocks.
    ///
    /// q is [g*q_block, d]; k and v are [g*kv_block, d] for the same number of
    /// groups g. Rows of q in group i attend only to k/v rows of group i, with
    /// logits scaled by 1/sqrt(d). With g = 1 this is plain attention.
    pub fn block_attention(
        &mut self,
        q: TensorId,
        k: TensorId,
        v: TensorId,
        q_block: usize,
        kv_block: usize,
    ) -> Result<TensorId> {
        let d = self.cols(q);
        if self.cols(k) != d || self.cols(v) != d {
            return Err(self.dim_error("block_attention", q, k));
        }
        if self.rows(k) != self.rows(v) {
            return Err(self.dim_error("block_attention", k, v));
        }
        if q_block == 0 || kv_block == 0 || !self.rows(q).is_multiple_of(q_block) {
            return Err(SmtaError::Config(format!(
                "invalid attention blocking q_block={q_block} kv_block={kv_block}"
            )));
        }
        let groups = self.rows(q) / q_block;
        if self.rows(k) != groups * kv_block {
            return Err(self.dim_error("block_attention", q, k));
        }

        let scale = 1.0 / (d as f64).sqrt();
        let q_rows = self.rows(q);
        let mut weights = vec![0.0; q_rows * kv_block];
        let mut data = vec![0.0; q_rows * d];
        {
            let qv = &self.values[q.0];
            let kv = &self.values[k.0];
            let vv = &self.values[v.0];
            let mut logits = vec![0.0; q_block * kv_block];
            let mut scratch = Vec::new();
            for g in 0..groups {
                let qb = &qv[g * q_block * d..(g + 1) * q_block * d];
                let kb = &kv[g * kv_block * d..(g + 1) * kv_block * d];
                let vb = &vv[g * kv_block * d..(g + 1) * kv_block * d];
                // logits [q_block x kv_block] = qb . kbT * scale
                logits.fill(0.0);
                kernels::gemm_nt_acc(qb, kb, q_block, d, kv_block, &mut scratch, &mut logits);
                for l in logits.iter_mut() {
                    *l *= scale;
                }
                let w = &mut weights[g * q_block * kv_block..(g + 1) * q_block * kv_block];
                for (row, wrow) in logits.chunks_exact(kv_block).zip(w.chunks_exact_mut(kv_block)) {
                    softmax_row_to(row, wrow);
                }
                kernels::gemm_nn_acc(
                    w,
                    vb,
                    q_block,
                    kv_block,
                    d,
                    &mut data[g * q_block * d..(g + 1) * q_block * d],
                );
            }
        }
        self.check_finite("block_attention", &data)?;
        let req = self.requires[q.0] || self.requires[k.0] || self.requires[v.0];
        Ok(self.push(
            Op::BlockAttention { q, k, v, q_block, kv_block, weights },
            vec![q_rows, d],
            data,
            req,
        ))
    }

    /// The row-stochastic weight matrix cached by a [`Graph::block_attention`]
    /// node: [q_rows x kv_block].
    pub fn attention_weights(&self, id: TensorId) -> Option<(&[f64], usize)> {
        match &self.ops[id.0] {
            Op::BlockAttention { weights, kv_block, .. } => Some((weights, *kv_block)),
            _ => None,
        }
    }

    /// Mean binary cross-entropy of predictions [n, 1] against labels,
    /// with predictions clamped to [1e-7, 1 - 1e-7].
    pub fn bce_loss(&mut self, pred: TensorId, labels: &[f64]) -> Result<TensorId> {
        if self.values[pred.0].len() != labels.len() {
            return Err(SmtaError::Dimension {
                op: "bce_loss",
                lhs: self.shapes[pred.0].clone(),
                rhs: vec![labels.len()],
            });
        }
        let n = labels.len() as f64;
        let mut acc = 0.0;
        for (&p, &y) in self.values[pred.0].iter().zip(labels) {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            acc -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
        let loss = acc / n;
        self.check_finite("bce_loss", &[loss])?;
        let req = self.requires[pred.0];
        Ok(self.push(
            Op::BceLoss { pred, labels: labels.to_vec() },
            vec![1, 1],
            vec![loss],
            req,
        ))
    }

    /// Reverse sweep from a scalar node. Gradients accumulate additively into
    /// `requires_grad` leaves; repeated calls without a fresh graph add up.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.values[loss.0].len() != 1 {
            return Err(SmtaError::NotScalar {
                op: "backward",
                shape: self.shapes[loss.0].clone(),
            });
        }
        // Every requires_grad leaf ends up with a grad buffer, reachable or not.
        for i in 0..self.ops.len() {
            if matches!(self.ops[i], Op::Leaf) && self.requires[i] && self.grads[i].is_none() {
                self.grads[i] = Some(vec![0.0; self.values[i].len()]);
            }
        }
        let mut seed = self.grads[loss.0].take().unwrap_or_else(|| vec![0.0; 1]);
        seed[0] += 1.0;
        self.grads[loss.0] = Some(seed);

        for i in (0..=loss.0).rev() {
            if matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            // Intermediate grads are dead once propagated; freeing them keeps
            // peak memory near the live frontier instead of the whole tape.
        }
        Ok(())
    }

    fn accumulate(&mut self, target: TensorId, contribution: &[f64]) {
        if !self.requires[target.0] {
            return;
        }
        match &mut self.grads[target.0] {
            Some(buf) => kernels::add_assign(buf, contribution),
            slot @ None => *slot = Some(contribution.to_vec()),
        }
    }

    fn accumulate_owned(&mut self, target: TensorId, contribution: Vec<f64>) {
        if !self.requires[target.0] {
            return;
        }
        match &mut self.grads[target.0] {
            Some(buf) => kernels::add_assign(buf, &contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    /// Gradient buffer for `target`, created zeroed on first touch. Split
    /// borrow so callers can keep reading `values` while writing gradients.
    fn grad_buffer<'s>(
        grads: &'s mut [Option<Vec<f64>>],
        values: &[Vec<f64>],
        target: TensorId,
    ) -> &'s mut Vec<f64> {
        grads[target.0].get_or_insert_with(|| vec![0.0; values[target.0].len()])
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let op = std::mem::replace(&mut self.ops[i], Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                // gemm straight into the gradient buffers; the big backward
                // products dominate memory traffic
                let (m, k) = (self.rows(*a), self.cols(*a));
                let n = self.cols(*b);
                let values = &self.values;
                let grads = &mut self.grads;
                if self.requires[a.0] {
                    // dA += G . BT
                    let buf = Self::grad_buffer(grads, values, *a);
                    kernels::gemm_nt_acc(g, &values[b.0], m, n, k, &mut self.scratch, buf);
                }
                if self.requires[b.0] {
                    // dB += AT . G
                    let buf = Self::grad_buffer(grads, values, *b);
                    kernels::gemm_tn_acc(&values[a.0], g, m, k, n, buf);
                }
            }
            Op::MatMulNt { a, b } => {
                // y = A . BT, A [m,k], B [n,k]
                let (m, k) = (self.rows(*a), self.cols(*a));
                let n = self.rows(*b);
                let values = &self.values;
                let grads = &mut self.grads;
                if self.requires[a.0] {
                    // dA += G . B
                    let buf = Self::grad_buffer(grads, values, *a);
                    kernels::gemm_nn_acc(g, &values[b.0], m, n, k, buf);
                }
                if self.requires[b.0] {
                    // dB += GT . A
                    let buf = Self::grad_buffer(grads, values, *b);
                    kernels::gemm_tn_acc(g, &values[a.0], m, n, k, buf);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::AddBias { a, bias } => {
                self.accumulate(*a, g);
                if self.requires[bias.0] {
                    let d = self.cols(*bias);
                    let mut db = vec![0.0; d];
                    for row in g.chunks_exact(d) {
                        kernels::add_assign(&mut db, row);
                    }
                    self.accumulate_owned(*bias, db);
                }
            }
            Op::Mul { a, b } => {
                if self.requires[a.0] {
                    let da: Vec<f64> =
                        g.iter().zip(&self.values[b.0]).map(|(gv, bv)| gv * bv).collect();
                    self.accumulate_owned(*a, da);
                }
                if self.requires[b.0] {
                    let db: Vec<f64> =
                        g.iter().zip(&self.values[a.0]).map(|(gv, av)| gv * av).collect();
                    self.accumulate_owned(*b, db);
                }
            }
            Op::Scale { a, factor } => {
                let da: Vec<f64> = g.iter().map(|gv| gv * factor).collect();
                self.accumulate_owned(*a, da);
            }
            Op::Relu { a } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.values[a.0])
                    .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate_owned(*a, da);
            }
            Op::Sigmoid { a } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.values[i])
                    .map(|(gv, &s)| gv * s * (1.0 - s))
                    .collect();
                self.accumulate_owned(*a, da);
            }
            Op::SoftmaxRows { a } => {
                // Exact Jacobian-vector product per row:
                // dx = s .* (g - <g, s>)
                let d = self.cols(*a);
                let mut da = Vec::with_capacity(g.len());
                for (grow, srow) in g.chunks_exact(d).zip(self.values[i].chunks_exact(d)) {
                    let dot: f64 = grow.iter().zip(srow).map(|(gv, sv)| gv * sv).sum();
                    da.extend(grow.iter().zip(srow).map(|(gv, sv)| sv * (gv - dot)));
                }
                self.accumulate_owned(*a, da);
            }
            Op::LayerNorm { a, gain, bias, eps } => {
                let d = self.cols(*a);
                let df = d as f64;
                let gain_row = self.values[gain.0].clone();
                let mut da = vec![0.0; g.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for (r, (grow, xrow)) in g
                    .chunks_exact(d)
                    .zip(self.values[a.0].chunks_exact(d))
                    .enumerate()
                {
                    let mean = xrow.iter().sum::<f64>() / df;
                    let var = xrow.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / df;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xrow.iter().map(|&x| (x - mean) * inv_std).collect();
                    for j in 0..d {
                        dgain[j] += grow[j] * xhat[j];
                        dbias[j] += grow[j];
                    }
                    let dxhat: Vec<f64> =
                        grow.iter().zip(&gain_row).map(|(gv, ga)| gv * ga).collect();
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 =
                        dxhat.iter().zip(&xhat).map(|(dx, xh)| dx * xh).sum();
                    let out = &mut da[r * d..(r + 1) * d];
                    for j in 0..d {
                        out[j] = inv_std / df * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                self.accumulate_owned(*a, da);
                self.accumulate_owned(*gain, dgain);
                self.accumulate_owned(*bias, dbias);
            }
            Op::BlockMeanRows { a, block } => {
                let d = self.cols(*a);
                let inv = 1.0 / *block as f64;
                let rows = self.rows(*a);
                let mut da = vec![0.0; rows * d];
                for r in 0..rows {
                    let grow = &g[(r / block) * d..(r / block + 1) * d];
                    for j in 0..d {
                        da[r * d + j] = grow[j] * inv;
                    }
                }
                self.accumulate_owned(*a, da);
            }
            Op::Sum { a } => {
                let da = vec![g[0]; self.values[a.0].len()];
                self.accumulate_owned(*a, da);
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.values[p.0].len();
                    if self.requires[p.0] {
                        let part = g[offset..offset + len].to_vec();
                        self.accumulate_owned(p, part);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols { parts } => {
                let rows = self.rows(parts[0]);
                let total_width: usize = parts.iter().map(|&p| self.cols(p)).sum();
                let mut col_offset = 0;
                for &p in parts {
                    let c = self.cols(p);
                    if self.requires[p.0] {
                        let mut part = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            let start = r * total_width + col_offset;
                            part.extend_from_slice(&g[start..start + c]);
                        }
                        self.accumulate_owned(p, part);
                    }
                    col_offset += c;
                }
            }
            Op::GatherRows { a, idx } => {
                let d = self.cols(*a);
                let mut da = vec![0.0; self.values[a.0].len()];
                for (r, &src) in idx.iter().enumerate() {
                    kernels::add_assign(&mut da[src * d..(src + 1) * d], &g[r * d..(r + 1) * d]);
                }
                self.accumulate_owned(*a, da);
            }
            Op::Reshape { a } => {
                self.accumulate(*a, g);
            }
            Op::BlockAttention { q, k, v, q_block, kv_block, weights } => {
                let d = self.cols(*q);
                let scale = 1.0 / (d as f64).sqrt();
                let groups = self.rows(*q) / q_block;
                let mut dq = vec![0.0; self.values[q.0].len()];
                let mut dk = vec![0.0; self.values[k.0].len()];
                let mut dv = vec![0.0; self.values[v.0].len()];
                let qv = &self.values[q.0];
                let kv = &self.values[k.0];
                let vv = &self.values[v.0];
                let mut dw = vec![0.0; q_block * kv_block];
                let mut dlogits = vec![0.0; q_block * kv_block];
                let mut scratch = Vec::new();
                for gi in 0..groups {
                    let qb = &qv[gi * q_block * d..(gi + 1) * q_block * d];
                    let kb = &kv[gi * kv_block * d..(gi + 1) * kv_block * d];
                    let vb = &vv[gi * kv_block * d..(gi + 1) * kv_block * d];
                    let wb = &weights[gi * q_block * kv_block..(gi + 1) * q_block * kv_block];
                    let gb = &g[gi * q_block * d..(gi + 1) * q_block * d];
                    // dV += WT . G
                    kernels::gemm_tn_acc(
                        wb,
                        gb,
                        *q_block,
                        *kv_block,
                        d,
                        &mut dv[gi * kv_block * d..(gi + 1) * kv_block * d],
                    );
                    // dW = G . VT
                    dw.fill(0.0);
                    kernels::gemm_nt_acc(gb, vb, *q_block, d, *kv_block, &mut scratch, &mut dw);
                    // softmax JVP back to logits, then scale
                    for r in 0..*q_block {
                        let wrow = &wb[r * kv_block..(r + 1) * kv_block];
                        let dwrow = &dw[r * kv_block..(r + 1) * kv_block];
                        let dot: f64 = wrow.iter().zip(dwrow).map(|(w, dwv)| w * dwv).sum();
                        let out = &mut dlogits[r * kv_block..(r + 1) * kv_block];
                        for j in 0..*kv_block {
                            out[j] = wrow[j] * (dwrow[j] - dot) * scale;
                        }
                    }
                    // dQ += dLogits . K ; dK += dLogitsT . Q
                    kernels::gemm_nn_acc(
                        &dlogits,
                        kb,
                        *q_block,
                        *kv_block,
                        d,
                        &mut dq[gi * q_block * d..(gi + 1) * q_block * d],
                    );
                    kernels::gemm_tn_acc(
                        &dlogits,
                        qb,
                        *q_block,
                        *kv_block,
                        d,
                        &mut dk[gi * kv_block * d..(gi + 1) * kv_block * d],
                    );
                }
                self.accumulate_owned(*q, dq);
                self.accumulate_owned(*k, dk);
                self.accumulate_owned(*v, dv);
            }
            Op::BceLoss { pred, labels } => {
                let n = labels.len() as f64;
                let da: Vec<f64> = self.values[pred.0]
                    .iter()
                    .zip(labels)
                    .map(|(&p, &y)| {
                        if p <= BCE_CLAMP || p >= 1.0 - BCE_CLAMP {
                            0.0
                        } else {
                            g[0] * (p - y) / (p * (1.0 - p) * n)
                        }
                    })
                    .collect();
                self.accumulate_owned(*pred, da);
            }
        }
        self.ops[i] = op;
    }
}

const BCE_CLAMP: f64 = 1e-7;

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_row_into(row: &[f64], out: &mut Vec<f64>) {
    let start = out.len();
    out.resize(start + row.len(), 0.0);
    let slice = &mut out[start..];
    softmax_row_to(row, slice);
}

fn softmax_row_to(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - max).exp();
        sum += e;
        *o = e;
    }
    for v in out.iter_mut() {
        *v /= sum;
    }
}

/// Max relative error between analytic gradients and central finite
/// differences over every entry of every parameter.
///
/// `f` must build a scalar loss from the bound parameters; it is re-run for
/// each perturbed evaluation, so it has to be deterministic.
pub fn grad_check<F>(f: F, params: &ParamSet, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &BoundParams) -> Result<TensorId>,
{
    let eval = |p: &ParamSet| -> Result<f64> {
        let mut graph = Graph::new();
        let bound = p.bind(&mut graph);
        let loss = f(&mut graph, &bound)?;
        let v = graph.value(loss)[0];
        if !v.is_finite() {
            return Err(SmtaError::Numeric("non-finite loss in grad_check".into()));
        }
        Ok(v)
    };

    // Analytic pass.
    let mut graph = Graph::new();
    let bound = params.bind(&mut graph);
    let loss = f(&mut graph, &bound)?;
    graph.backward(loss)?;
    let analytic: Vec<(String, Vec<f64>)> = bound
        .grads(&graph)
        .into_iter()
        .map(|(n, g)| (n.to_string(), g.to_vec()))
        .collect();
    drop(graph);

    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for (name, grads) in &analytic {
        for (j, &a) in grads.iter().enumerate() {
            let orig = probe.get(name).unwrap().data()[j];
            probe.get_mut(name).unwrap().data_mut()[j] = orig + eps;
            let up = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[j] = orig - eps;
            let down = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
