//! Per-step computation graph with reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value. Nodes are
//! created in dependency order, so the node vector is already a
//! topological order and backward is a single reverse sweep. Shapes are
//! interpreted as `[rows, cols]` where `cols` is the last dimension and
//! `rows` the product of the rest; no operation broadcasts implicitly.

use rand::Rng;

use super::kernels::{self, dot, sigmoid, softmax_row};
use super::tensor::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layout of a batched multi-head attention call.
///
/// Queries are `[batch * q_len, width]`, keys and values are
/// `[batch * k_len, width]`, rows grouped by batch element.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSpec {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    /// Query `i` may attend to keys `0..=q_offset + i`.
    pub causal: bool,
    pub q_offset: usize,
    /// Per-batch-element count of valid keys (padding mask).
    pub key_lens: Option<Vec<usize>>,
}

impl AttentionSpec {
    fn limit(&self, b: usize, i: usize) -> usize {
        let mut limit = self.k_len;
        if self.causal {
            limit = limit.min(self.q_offset + i + 1);
        }
        if let Some(lens) = &self.key_lens {
            limit = limit.min(lens[b]);
        }
        limit
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    AddBias,
    Concat,
    ConcatRows,
    Slice,
    SliceRows,
    SelectRows,
    Reshape,
    TileRows,
    Sigmoid,
    Tanh,
    Relu,
    Softmax,
    LogSoftmax,
    CrossEntropy,
    LayerNorm,
    Embedding,
    Attention,
    Dropout,
    Sum,
    Mean,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Concat(Vec<Var>),
    ConcatRows(Vec<Var>),
    Slice { src: Var, start: usize, end: usize },
    SliceRows { src: Var, start: usize },
    SelectRows { mask: Vec<bool>, a: Var, b: Var },
    Reshape(Var),
    TileRows(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding { table: Var, ids: Vec<usize> },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<f64>,
    },
    Dropout { x: Var, mask: Vec<f64> },
    Sum(Var),
    Mean(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Concat(..) => OpKind::Concat,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::Slice { .. } => OpKind::Slice,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::SelectRows { .. } => OpKind::SelectRows,
            Op::Reshape(..) => OpKind::Reshape,
            Op::TileRows(..) => OpKind::TileRows,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Relu(..) => OpKind::Relu,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LogSoftmax(..) => OpKind::LogSoftmax,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::Attention { .. } => OpKind::Attention,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) => vec![*a, *b],
            Op::SelectRows { a, b, .. } => vec![*a, *b],
            Op::Concat(vs) | Op::ConcatRows(vs) => vs.clone(),
            Op::Scale(a, _)
            | Op::Reshape(a)
            | Op::TileRows(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::Slice { src, .. } | Op::SliceRows { src, .. } => vec![*src],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Embedding { table, .. } => vec![*table],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::Dropout { x, .. } => vec![*x],
        }
    }
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Record of one node as exposed for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeRecord {
    pub kind: OpKind,
    pub inputs: Vec<Var>,
    pub output: Var,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().expect("non-empty shape");
    (shape.iter().product::<usize>() / cols, cols)
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that never records gradient state; used for evaluation and decoding.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn records(&self) -> Vec<NodeRecord> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| NodeRecord {
                kind: n.op.kind(),
                inputs: n.op.inputs(),
                output: Var(i),
            })
            .collect()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.data.clone()).expect("node shape is valid")
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf holding a copy of `tensor`; tracks gradients when the tensor asks for them.
    pub fn input(&mut self, tensor: Tensor) -> Var {
        let requires_grad = self.grad_enabled && tensor.requires_grad();
        let shape = tensor.shape().to_vec();
        self.nodes.push(Node {
            shape,
            data: tensor.into_data(),
            op: Op::Leaf,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        Ok(self.input(Tensor::new(shape, data)?))
    }

    /// Leaf bound to a stored parameter; gradients flow back to it via
    /// [`Graph::accumulate_param_grads`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: self.grad_enabled,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?}", self.shape(a)), format!("{:?}", self.shape(b))));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rows_cols(self.shape(a));
        let sb = self.shape(b);
        if sb.len() != 2 || sb[0] != k {
            return Err(Error::shape("matmul", format!("[{k}, n]"), format!("{sb:?}")));
        }
        let n = sb[1];
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    fn zip_with(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Scale(a, s), &[a])
    }

    /// Adds `bias[cols]` to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, cols) = rows_cols(self.shape(a));
        if self.shape(bias).iter().product::<usize>() != cols {
            return Err(Error::shape("add_bias", format!("[{cols}]"), format!("{:?}", self.shape(bias))));
        }
        let b = self.value(bias);
        let out = self
            .value(a)
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::AddBias(a, bias), &[a, bias]))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat", "at least one operand", "none"))?;
        let (rows, _) = rows_cols(self.shape(first));
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat", format!("leading dims {lead:?}"), format!("{s:?}")));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        Ok(self.push(shape, out, Op::Concat(parts.to_vec()), parts))
    }

    /// Stacks operands along the first axis; all must share the column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "at least one operand", "none"))?;
        let (_, cols) = rows_cols(self.shape(first));
        let mut out = Vec::new();
        for &p in parts {
            let (_, c) = rows_cols(self.shape(p));
            if c != cols {
                return Err(Error::shape("concat_rows", format!("[_, {cols}]"), format!("{:?}", self.shape(p))));
            }
            out.extend_from_slice(self.value(p));
        }
        let rows = out.len() / cols;
        Ok(self.push(vec![rows, cols], out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(a));
        if start >= end || end > cols {
            return Err(Error::shape("slice", format!("0 <= start < end <= {cols}"), format!("{start}..{end}")));
        }
        let w = end - start;
        let src = self.value(a);
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + end]);
        }
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().unwrap() = w;
        Ok(self.push(shape, out, Op::Slice { src: a, start, end }, &[a]))
    }

    /// Rows `start..end` of a `[rows, cols]` view.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(a));
        if start >= end || end > rows {
            return Err(Error::shape("slice_rows", format!("0 <= start < end <= {rows}"), format!("{start}..{end}")));
        }
        let out = self.value(a)[start * cols..end * cols].to_vec();
        Ok(self.push(vec![end - start, cols], out, Op::SliceRows { src: a, start }, &[a]))
    }

    /// Row `r` comes from `a` where `mask[r]` holds, otherwise from `b`.
    pub fn select_rows(&mut self, mask: &[bool], a: Var, b: Var) -> Result<Var> {
        self.same_shape("select_rows", a, b)?;
        let (rows, cols) = rows_cols(self.shape(a));
        if mask.len() != rows {
            return Err(Error::shape("select_rows", format!("mask of {rows}"), format!("mask of {}", mask.len())));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(rows * cols);
        for (r, &m) in mask.iter().enumerate() {
            let src = if m { va } else { vb };
            out.extend_from_slice(&src[r * cols..(r + 1) * cols]);
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::SelectRows { mask: mask.to_vec(), a, b }, &[a, b]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() || shape.contains(&0) {
            return Err(Error::shape("reshape", format!("{} elements", self.value(a).len()), format!("{shape:?}")));
        }
        let out = self.value(a).to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a), &[a]))
    }

    /// Repeats a single row `times` times: `[cols]` or `[1, cols]` to `[times, cols]`.
    pub fn tile_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(a));
        if rows != 1 || times == 0 {
            return Err(Error::shape("tile_rows", "[1, cols] and times >= 1", format!("{:?} x {times}", self.shape(a))));
        }
        let row = self.value(a);
        let out = (0..times).flat_map(|_| row.iter().copied()).collect();
        Ok(self.push(vec![times, cols], out, Op::TileRows(a), &[a]))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (_, cols) = rows_cols(self.shape(a));
        let mut out = vec![0.0; self.value(a).len()];
        for (src, dst) in self.value(a).chunks(cols).zip(out.chunks_mut(cols)) {
            softmax_row(src, dst);
        }
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (_, cols) = rows_cols(self.shape(a));
        let mut out = Vec::with_capacity(self.value(a).len());
        for row in self.value(a).chunks(cols) {
            let lse = kernels::log_sum_exp(row);
            out.extend(row.iter().map(|x| x - lse));
        }
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::LogSoftmax(a), &[a])
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`. Rows whose target is `None` (padding) are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(logits));
        if targets.len() != rows {
            return Err(Error::shape("cross_entropy", format!("{rows} targets"), format!("{}", targets.len())));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::Data("cross_entropy: every target is padding".into()));
        }
        let mut probs = vec![0.0; rows * cols];
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= cols {
                return Err(Error::shape("cross_entropy", format!("target < {cols}"), format!("{t}")));
            }
            let row = &self.value(logits)[r * cols..(r + 1) * cols];
            total += kernels::log_sum_exp(row) - row[t];
            softmax_row(row, &mut probs[r * cols..(r + 1) * cols]);
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
            count,
        };
        Ok(self.push(vec![1], vec![total / count as f64], op, &[logits]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        for p in [gamma, beta] {
            if self.value(p).len() != cols {
                return Err(Error::shape("layer_norm", format!("[{cols}]"), format!("{:?}", self.shape(p))));
            }
        }
        let mut xhat = Vec::with_capacity(rows * cols);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * cols);
        let (g, b) = (self.value(gamma), self.value(beta));
        for row in self.value(x).chunks(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * rs;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let shape = self.shape(x).to_vec();
        let op = Op::LayerNorm { x, gamma, beta, xhat, rstd };
        Ok(self.push(shape, out, op, &[x, gamma, beta]))
    }

    /// Gathers rows `ids` of `table[n, d]` into `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::shape("embedding", "[rows, dim] table", format!("{s:?}")));
        }
        let (n, d) = (s[0], s[1]);
        if ids.is_empty() {
            return Err(Error::shape("embedding", "at least one id", "none"));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= n {
                return Err(Error::shape("embedding", format!("id < {n}"), format!("{id}")));
            }
            out.extend_from_slice(&self.value(table)[id * d..(id + 1) * d]);
        }
        let op = Op::Embedding { table, ids: ids.to_vec() };
        Ok(self.push(vec![ids.len(), d], out, op, &[table]))
    }

    /// Batched multi-head scaled dot-product attention (no projections).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (qr, d) = rows_cols(self.shape(q));
        let (kr, kd) = rows_cols(self.shape(k));
        let (vr, vd) = rows_cols(self.shape(v));
        if spec.heads == 0 || d % spec.heads != 0 {
            return Err(Error::shape("attention", format!("width divisible by {} heads", spec.heads), format!("{d}")));
        }
        if qr != spec.batch * spec.q_len || kr != spec.batch * spec.k_len || vr != kr || kd != d || vd != d {
            return Err(Error::shape(
                "attention",
                format!("q [{}, {d}], k/v [{}, {d}]", spec.batch * spec.q_len, spec.batch * spec.k_len),
                format!("q {:?}, k {:?}, v {:?}", self.shape(q), self.shape(k), self.shape(v)),
            ));
        }
        if let Some(lens) = &spec.key_lens {
            if lens.len() != spec.batch {
                return Err(Error::shape("attention", format!("{} key lengths", spec.batch), format!("{}", lens.len())));
            }
        }
        let dk = d / spec.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; spec.batch * spec.heads * spec.q_len * spec.k_len];
        let mut out = vec![0.0; qr * d];
        let mut scores = vec![0.0; spec.k_len];
        for b in 0..spec.batch {
            for h in 0..spec.heads {
                let col = h * dk;
                for i in 0..spec.q_len {
                    let limit = spec.limit(b, i);
                    if limit == 0 {
                        continue;
                    }
                    let qrow = &qv[(b * spec.q_len + i) * d + col..][..dk];
                    for (j, s) in scores[..limit].iter_mut().enumerate() {
                        let krow = &kv[(b * spec.k_len + j) * d + col..][..dk];
                        *s = dot(qrow, krow) * scale;
                    }
                    let base = ((b * spec.heads + h) * spec.q_len + i) * spec.k_len;
                    softmax_row(&scores[..limit], &mut probs[base..base + limit]);
                    let orow = &mut out[(b * spec.q_len + i) * d + col..][..dk];
                    for j in 0..limit {
                        let p = probs[base + j];
                        let vrow = &vv[(b * spec.k_len + j) * d + col..][..dk];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let op = Op::Attention { q, k, v, spec, probs };
        Ok(self.push(vec![qr, d], out, op, &[q, k, v]))
    }

    /// Multiplies by a stored mask; the mask already carries the `1/(1-rate)` scale.
    pub fn dropout_mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::shape("dropout", format!("{} mask values", self.value(x).len()), format!("{}", mask.len())));
        }
        let out = self.value(x).iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::Dropout { x, mask }, &[x]))
    }

    /// Inverted dropout; identity when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut impl Rng) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let mask = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.dropout_mask(x, mask)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.value(a).iter().sum::<f64>() / n;
        self.push(vec![1], vec![s], Op::Mean(a), &[a])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Autodiff("backward called on a tensor detached from any parameter".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Adds gradients of parameter leaves into the store.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(id), Some(g)) = (node.param, grads.grads[i].as_deref()) {
                store.get_mut(id).accumulate_grad(g);
            }
        }
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        // Runs `f` on the gradient buffer of `v` when it participates.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].data.len()]);
            f(slot);
        };
        let add_into = |dst: &mut [f64], src: &[f64]| dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = rows_cols(&nodes[a.0].shape);
                let n = nodes[b.0].shape[1];
                acc(*a, &mut |ga| kernels::matmul_nt_acc(g, &nodes[b.0].data, ga, m, k, n));
                acc(*b, &mut |gb| kernels::matmul_tn_acc(&nodes[a.0].data, g, gb, m, k, n));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[a.0].data, &nodes[b.0].data);
                acc(*a, &mut |ga| {
                    for ((d, gi), y) in ga.iter_mut().zip(g).zip(vb) {
                        *d += gi * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((d, gi), x) in gb.iter_mut().zip(g).zip(va) {
                        *d += gi * x;
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(d, x)| *d += s * x)),
            Op::AddBias(a, bias) => {
                acc(*a, &mut |ga| add_into(ga, g));
                let cols = nodes[bias.0].data.len();
                acc(*bias, &mut |gb| {
                    for row in g.chunks(cols) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Concat(parts) => {
                let total = *node.shape.last().unwrap();
                let rows = g.len() / total;
                let mut offset = 0;
                for p in parts {
                    let w = *nodes[p.0].shape.last().unwrap();
                    acc(*p, &mut |gp| {
                        for r in 0..rows {
                            add_into(&mut gp[r * w..(r + 1) * w], &g[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = nodes[p.0].data.len();
                    acc(*p, &mut |gp| add_into(gp, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::Slice { src, start, end } => {
                let cols = *nodes[src.0].shape.last().unwrap();
                let w = end - start;
                acc(*src, &mut |gs| {
                    for (r, row) in g.chunks(w).enumerate() {
                        add_into(&mut gs[r * cols + start..r * cols + end], row);
                    }
                });
            }
            Op::SliceRows { src, start, .. } => {
                let cols = *nodes[src.0].shape.last().unwrap();
                acc(*src, &mut |gs| add_into(&mut gs[start * cols..start * cols + g.len()], g));
            }
            Op::SelectRows { mask, a, b } => {
                let cols = *node.shape.last().unwrap();
                for (var, want) in [(*a, true), (*b, false)] {
                    acc(var, &mut |gv| {
                        for (r, &m) in mask.iter().enumerate() {
                            if m == want {
                                add_into(&mut gv[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                            }
                        }
                    });
                }
            }
            Op::Reshape(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::TileRows(a) => {
                let cols = nodes[a.0].data.len();
                acc(*a, &mut |ga| {
                    for row in g.chunks(cols) {
                        add_into(ga, row);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.data;
                acc(*a, &mut |ga| {
                    for ((d, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                        *d += gi * yi * (1.0 - yi);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = &node.data;
                acc(*a, &mut |ga| {
                    for ((d, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                        *d += gi * (1.0 - yi * yi);
                    }
                });
            }
            Op::Relu(a) => {
                let x = &nodes[a.0].data;
                acc(*a, &mut |ga| {
                    for ((d, gi), xi) in ga.iter_mut().zip(g).zip(x) {
                        if *xi > 0.0 {
                            *d += gi;
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let cols = *node.shape.last().unwrap();
                let y = &node.data;
                acc(*a, &mut |ga| {
                    for ((gr, yr), dr) in g.chunks(cols).zip(y.chunks(cols)).zip(ga.chunks_mut(cols)) {
                        let s = dot(gr, yr);
                        for ((d, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += yi * (gi - s);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let cols = *node.shape.last().unwrap();
                let y = &node.data;
                acc(*a, &mut |ga| {
                    for ((gr, yr), dr) in g.chunks(cols).zip(y.chunks(cols)).zip(ga.chunks_mut(cols)) {
                        let s: f64 = gr.iter().sum();
                        for ((d, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += gi - yi.exp() * s;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let cols = *nodes[logits.0].shape.last().unwrap();
                let scale = g[0] / *count as f64;
                acc(*logits, &mut |gl| {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let row = &mut gl[r * cols..(r + 1) * cols];
                        for (d, p) in row.iter_mut().zip(&probs[r * cols..(r + 1) * cols]) {
                            *d += scale * p;
                        }
                        row[t] -= scale;
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let cols = nodes[gamma.0].data.len();
                let gam = &nodes[gamma.0].data;
                acc(*x, &mut |gx| {
                    let mut dxhat = vec![0.0; cols];
                    for (r, ((gr, hr), dr)) in g.chunks(cols).zip(xhat.chunks(cols)).zip(gx.chunks_mut(cols)).enumerate() {
                        for ((d, gi), gm) in dxhat.iter_mut().zip(gr).zip(gam) {
                            *d = gi * gm;
                        }
                        let m1 = dxhat.iter().sum::<f64>() / cols as f64;
                        let m2 = dot(&dxhat, hr) / cols as f64;
                        for ((d, dh), h) in dr.iter_mut().zip(&dxhat).zip(hr) {
                            *d += rstd[r] * (dh - m1 - h * m2);
                        }
                    }
                });
                acc(*gamma, &mut |gg| {
                    for (gr, hr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for ((d, gi), h) in gg.iter_mut().zip(gr).zip(hr) {
                            *d += gi * h;
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for gr in g.chunks(cols) {
                        add_into(gb, gr);
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = nodes[table.0].shape[1];
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Attention { q, k, v, spec, probs } => {
                let d = *nodes[q.0].shape.last().unwrap();
                let dk = d / spec.heads;
                let scale = 1.0 / (dk as f64).sqrt();
                let (qv, kv, vv) = (&nodes[q.0].data, &nodes[k.0].data, &nodes[v.0].data);
                let mut gq = vec![0.0; qv.len()];
                let mut gk = vec![0.0; kv.len()];
                let mut gv = vec![0.0; vv.len()];
                let mut dp = vec![0.0; spec.k_len];
                for b in 0..spec.batch {
                    for h in 0..spec.heads {
                        let col = h * dk;
                        for i in 0..spec.q_len {
                            let limit = spec.limit(b, i);
                            if limit == 0 {
                                continue;
                            }
                            let base = ((b * spec.heads + h) * spec.q_len + i) * spec.k_len;
                            let p = &probs[base..base + limit];
                            let qoff = (b * spec.q_len + i) * d + col;
                            let go = &g[qoff..qoff + dk];
                            for j in 0..limit {
                                let voff = (b * spec.k_len + j) * d + col;
                                dp[j] = dot(go, &vv[voff..voff + dk]);
                                for (dst, x) in gv[voff..voff + dk].iter_mut().zip(go) {
                                    *dst += p[j] * x;
                                }
                            }
                            let s = dot(p, &dp[..limit]);
                            for j in 0..limit {
                                let ds = p[j] * (dp[j] - s) * scale;
                                let koff = (b * spec.k_len + j) * d + col;
                                for c in 0..dk {
                                    gq[qoff + c] += ds * kv[koff + c];
                                    gk[koff + c] += ds * qv[qoff + c];
                                }
                            }
                        }
                    }
                }
                acc(*q, &mut |dst| add_into(dst, &gq));
                acc(*k, &mut |dst| add_into(dst, &gk));
                acc(*v, &mut |dst| add_into(dst, &gv));
            }
            Op::Dropout { x, mask } => acc(*x, &mut |gx| {
                for ((d, gi), m) in gx.iter_mut().zip(g).zip(mask) {
                    *d += gi * m;
                }
            }),
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let n = nodes[a.0].data.len() as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|d| *d += g[0] / n));
            }
        }
    }
}
