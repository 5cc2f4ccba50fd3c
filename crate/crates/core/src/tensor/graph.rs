use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels;
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulBt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    SoftmaxRows(usize),
    Gelu(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    GatherRows(usize, Vec<usize>),
    Sum(usize),
    MeanRows(usize),
    Reshape(usize),
    Transpose(usize),
    LogSumExpRows(usize, Option<Vec<bool>>),
    LogSumExpMasked(usize, Vec<bool>),
    Diag(usize),
    Exp(usize),
    Log(usize),
    Dropout(usize, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A single forward pass recorded in topological order.
///
/// Nodes are appended as operations run, so every node's inputs precede it.
/// [`Graph::backward`] walks the list once in reverse. Gradients of
/// gradient-carrying leaves persist on the graph and accumulate across
/// repeated backward calls until [`Graph::zero_grad`].
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: HashMap<usize, Vec<f64>>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
    rng: Option<ChaCha8Rng>,
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
            leaf_grads: HashMap::new(),
            params: HashMap::new(),
            grad_enabled: true,
            rng: None,
        }
    }

    /// A graph that never tracks gradients; used for inference.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Enables stochastic ops (dropout) driven by a seeded stream.
    pub fn with_dropout_seed(mut self, seed: u64) -> Self {
        self.rng = Some(ChaCha8Rng::seed_from_u64(seed));
        self
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a gradient-carrying leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(&v.0).map(Vec::as_slice)
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.values_mut().for_each(|g| g.iter_mut().for_each(|x| *x = 0.0));
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: usize) -> bool {
        self.nodes[v].needs_grad
    }

    fn t(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let t = Tensor::new(t.shape().to_vec(), t.into_data()).expect("valid tensor");
        self.push(t, Op::Leaf, false)
    }

    /// Records `t` as a leaf; it carries a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let needs = t.requires_grad() && self.grad_enabled;
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor");
        let v = self.push(value, Op::Leaf, needs);
        if needs {
            self.leaf_grads.insert(v.0, vec![0.0; t.numel()]);
        }
        v
    }

    /// Binds a stored parameter, once per graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.get(id);
        let v = if store.is_frozen(id) {
            self.constant(t.clone())
        } else {
            self.leaf(t)
        };
        self.params.insert(id, v);
        v
    }

    /// Adds this graph's parameter gradients into the store's buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        let mut bound: Vec<_> = self.params.iter().collect();
        bound.sort_by_key(|(id, _)| **id);
        for (id, var) in bound {
            if let Some(g) = self.leaf_grads.get(&var.0) {
                store.get_mut(*id).accumulate_grad(g);
            }
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = kernels::matmul(self.t(a).data(), self.t(b).data(), m, k, n);
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a.0, b.0), ng))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul_bt")?;
        let (n, k2) = self.matrix(b, "matmul_bt")?;
        if k != k2 {
            return Err(Error::shape("matmul_bt", self.shape(a), self.shape(b)));
        }
        let out = kernels::matmul_bt(self.t(a).data(), self.t(b).data(), m, k, n);
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulBt(a.0, b.0), ng))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let out: Vec<f64> = self
            .t(a)
            .data()
            .iter()
            .zip(self.t(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(Tensor::new(shape, out)?, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        self.zip_with(a, b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        self.zip_with(a, b, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        self.zip_with(a, b, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    /// `x[m×n] + bias[n]`, broadcasting the bias over the leading axis.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.matrix(x, "add_row")?;
        if self.t(bias).numel() != n {
            return Err(Error::shape("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.t(bias).data();
        let mut out = self.t(x).data().to_vec();
        for r in 0..m {
            for (o, bv) in out[r * n..(r + 1) * n].iter_mut().zip(b) {
                *o += bv;
            }
        }
        let ng = self.needs(x.0) || self.needs(bias.0);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::AddRow(x.0, bias.0), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out: Vec<f64> = self.t(x).data().iter().map(|v| v * s).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x.0);
        Ok(self.push(Tensor::new(shape, out)?, Op::Scale(x.0, s), ng))
    }

    /// Row softmax; columns with `keep[j] == false` receive zero weight.
    pub fn softmax_rows(&mut self, x: Var, keep: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.matrix(x, "softmax_rows")?;
        if let Some(k) = keep {
            if k.len() != n {
                return Err(Error::shape("softmax_rows", self.shape(x), &[k.len()]));
            }
        }
        let mut out = self.t(x).data().to_vec();
        for r in 0..m {
            kernels::softmax_in_place(&mut out[r * n..(r + 1) * n], keep);
        }
        let ng = self.needs(x.0);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::SoftmaxRows(x.0),
            ng,
        ))
    }

    /// GELU, tanh form.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.t(x).data().iter().map(|&v| kernels::gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x.0);
        Ok(self.push(Tensor::new(shape, out)?, Op::Gelu(x.0), ng))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.t(x).data().iter().map(|v| v.exp()).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x.0);
        Ok(self.push(Tensor::new(shape, out)?, Op::Exp(x.0), ng))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.t(x).data().iter().map(|v| v.ln()).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x.0);
        Ok(self.push(Tensor::new(shape, out)?, Op::Log(x.0), ng))
    }

    /// Per-row layer normalisation with learnable scale and shift of width `n`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.matrix(x, "layer_norm")?;
        if self.t(gamma).numel() != n || self.t(beta).numel() != n {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xs = self.t(x).data();
        let (g, b) = (self.t(gamma).data(), self.t(beta).data());
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = g[j] * h + b[j];
            }
        }
        let ng = self.needs(x.0) || self.needs(gamma.0) || self.needs(beta.0);
        let op = Op::LayerNorm {
            x: x.0,
            gamma: gamma.0,
            beta: beta.0,
            xhat,
            rstd,
        };
        Ok(self.push(Tensor::new(vec![m, n], out)?, op, ng))
    }

    /// Stacks matrices of equal width vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of nothing".into()));
        }
        let (_, n) = self.matrix(parts[0], "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (m, n2) = self.matrix(p, "concat_rows")?;
            if n2 != n {
                return Err(Error::shape("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows += m;
            out.extend_from_slice(self.t(p).data());
        }
        let ng = parts.iter().any(|p| self.needs(p.0));
        let ids = parts.iter().map(|p| p.0).collect();
        Ok(self.push(Tensor::new(vec![rows, n], out)?, Op::ConcatRows(ids), ng))
    }

    /// Joins matrices of equal height side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of nothing".into()));
        }
        let (m, _) = self.matrix(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (m2, n) = self.matrix(p, "concat_cols")?;
            if m2 != m {
                return Err(Error::shape("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(n);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.t(p).data()[r * w..(r + 1) * w]);
            }
        }
        let ng = parts.iter().any(|p| self.needs(p.0));
        let ids = parts.iter().map(|p| p.0).collect();
        Ok(self.push(Tensor::new(vec![m, total], out)?, Op::ConcatCols(ids), ng))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.matrix(x, "slice_rows")?;
        if start > end || end > m {
            return Err(Error::shape("slice_rows", self.shape(x), &[start, end]));
        }
        let out = self.t(x).data()[start * n..end * n].to_vec();
        let ng = self.needs(x.0);
        Ok(self.push(Tensor::new(vec![end - start, n], out)?, Op::SliceRows(x.0, start), ng))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.matrix(x, "slice_cols")?;
        if start > end || end > n {
            return Err(Error::shape("slice_cols", self.shape(x), &[start, end]));
        }
        let w = end - start;
        let xs = self.t(x).data();
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&xs[r * n + start..r * n + end]);
        }
        let ng = self.needs(x.0);
        Ok(self.push(Tensor::new(vec![m, w], out)?, Op::SliceCols(x.0, start), ng))
    }

    /// Embedding lookup: rows `idx` of `table`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix(table, "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Contract(format!("row index {bad} out of range for {m} rows")));
        }
        let ts = self.t(table).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&ts[i * n..(i + 1) * n]);
        }
        let ng = self.needs(table.0);
        Ok(self.push(
            Tensor::new(vec![idx.len(), n], out)?,
            Op::GatherRows(table.0, idx.to_vec()),
            ng,
        ))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.t(x).data().iter().sum();
        let ng = self.needs(x.0);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x.0), ng))
    }

    /// Column means of a matrix, as a `1 × n` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix(x, "mean_rows")?;
        if m == 0 {
            return Err(Error::Contract("mean over zero rows".into()));
        }
        let xs = self.t(x).data();
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, v) in out.iter_mut().zip(&xs[r * n..(r + 1) * n]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        let ng = self.needs(x.0);
        Ok(self.push(Tensor::new(vec![1, n], out)?, Op::MeanRows(x.0), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.t(x).clone().reshape(shape.to_vec())?;
        let t = Tensor::new(t.shape().to_vec(), t.into_data())?;
        let ng = self.needs(x.0);
        Ok(self.push(t, Op::Reshape(x.0), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.t(x).transpose()?;
        let ng = self.needs(x.0);
        Ok(self.push(t, Op::Transpose(x.0), ng))
    }

    /// Per-row log-sum-exp as an `m × 1` column; `keep` is an optional `m × n` mask.
    pub fn logsumexp_rows(&mut self, x: Var, keep: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.matrix(x, "logsumexp_rows")?;
        if let Some(k) = keep {
            if k.len() != m * n {
                return Err(Error::shape("logsumexp_rows", self.shape(x), &[k.len()]));
            }
        }
        let xs = self.t(x).data();
        let mut out = vec![0.0; m];
        for r in 0..m {
            let mask = keep.map(|k| &k[r * n..(r + 1) * n]);
            out[r] = kernels::logsumexp(&xs[r * n..(r + 1) * n], mask);
            if out[r] == f64::NEG_INFINITY {
                return Err(Error::Contract(format!("row {r} has no kept entries")));
            }
        }
        let ng = self.needs(x.0);
        Ok(self.push(
            Tensor::new(vec![m, 1], out)?,
            Op::LogSumExpRows(x.0, keep.map(<[bool]>::to_vec)),
            ng,
        ))
    }

    /// Log-sum-exp over the entries selected by `keep`, as a scalar.
    pub fn logsumexp_masked(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        if keep.len() != self.t(x).numel() {
            return Err(Error::shape("logsumexp_masked", self.shape(x), &[keep.len()]));
        }
        let v = kernels::logsumexp(self.t(x).data(), Some(keep));
        if v == f64::NEG_INFINITY {
            return Err(Error::Contract("logsumexp over an empty selection".into()));
        }
        let ng = self.needs(x.0);
        Ok(self.push(Tensor::scalar(v), Op::LogSumExpMasked(x.0, keep.to_vec()), ng))
    }

    /// Diagonal of a square matrix as an `n × 1` column.
    pub fn diag(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix(x, "diag")?;
        if m != n {
            return Err(Error::shape("diag", self.shape(x), &[n, n]));
        }
        let out = (0..n).map(|i| self.t(x).data()[i * n + i]).collect();
        let ng = self.needs(x.0);
        Ok(self.push(Tensor::new(vec![n, 1], out)?, Op::Diag(x.0), ng))
    }

    /// Inverted dropout. Identity unless the graph has a dropout stream and `rate > 0`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if rate <= 0.0 || !self.grad_enabled {
            return Ok(x);
        }
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        if rate >= 1.0 {
            return Err(Error::Config(format!("dropout rate {rate} must be below 1")));
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let n = self.nodes[x.0].value.numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep_scale })
            .collect();
        let out = self.t(x).data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x.0);
        Ok(self.push(Tensor::new(shape, out)?, Op::Dropout(x.0, mask), ng))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.t(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_from(&[(loss, vec![1.0])])
    }

    /// Reverse sweep seeded with upstream gradients for arbitrary outputs.
    pub fn backward_from(&mut self, seeds: &[(Var, Vec<f64>)]) -> Result<()> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut last = 0;
        for (v, g) in seeds {
            if g.len() != self.t(*v).numel() {
                return Err(Error::shape("backward seed", self.shape(*v), &[g.len()]));
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; g.len()]);
            buf.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            last = last.max(v.0 + 1);
        }
        for i in (0..last).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                if let Some(acc) = self.leaf_grads.get_mut(&i) {
                    acc.iter_mut().zip(&gout).for_each(|(a, b)| *a += b);
                }
                continue;
            }
            self.propagate(i, &gout, &mut grads);
        }
        Ok(())
    }

    #[allow(clippy::needless_range_loop)]
    fn propagate(&self, i: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |j: usize| nodes[j].value.data();
        let shape = |j: usize| nodes[j].value.shape();
        macro_rules! buf {
            ($j:expr) => {
                slot(nodes, grads, $j)
            };
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (shape(*a)[0], shape(*a)[1]);
                let n = shape(*b)[1];
                if let Some(ga) = buf!(*a) {
                    // dA = dC · Bᵀ
                    kernels::matmul_bt_acc(gout, val(*b), m, n, k, ga);
                }
                if let Some(gb) = buf!(*b) {
                    // dB = Aᵀ · dC
                    kernels::matmul_at_acc(val(*a), gout, m, k, n, gb);
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = (shape(*a)[0], shape(*a)[1]);
                let n = shape(*b)[0];
                if let Some(ga) = buf!(*a) {
                    kernels::matmul_acc(gout, val(*b), m, n, k, ga);
                }
                if let Some(gb) = buf!(*b) {
                    kernels::matmul_at_acc(gout, val(*a), m, n, k, gb);
                }
            }
            Op::Add(a, b) => {
                for j in [*a, *b] {
                    if let Some(g) = buf!(j) {
                        g.iter_mut().zip(gout).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(g) = buf!(*a) {
                    g.iter_mut().zip(gout).for_each(|(x, y)| *x += y);
                }
                if let Some(g) = buf!(*b) {
                    g.iter_mut().zip(gout).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                if let Some(g) = buf!(*a) {
                    for ((x, y), w) in g.iter_mut().zip(gout).zip(val(*b)) {
                        *x += y * w;
                    }
                }
                if let Some(g) = buf!(*b) {
                    for ((x, y), w) in g.iter_mut().zip(gout).zip(val(*a)) {
                        *x += y * w;
                    }
                }
            }
            Op::AddRow(x, b) => {
                if let Some(g) = buf!(*x) {
                    g.iter_mut().zip(gout).for_each(|(p, q)| *p += q);
                }
                let n = nodes[*b].value.numel();
                if let Some(g) = buf!(*b) {
                    for chunk in gout.chunks(n) {
                        g.iter_mut().zip(chunk).for_each(|(p, q)| *p += q);
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(g) = buf!(*x) {
                    g.iter_mut().zip(gout).for_each(|(p, q)| *p += s * q);
                }
            }
            Op::SoftmaxRows(x) => {
                let y = nodes[i].value.data();
                let n = nodes[i].value.shape()[1];
                if let Some(g) = buf!(*x) {
                    for ((gr, yr), dr) in g.chunks_mut(n).zip(y.chunks(n)).zip(gout.chunks(n)) {
                        let s = kernels::dot(yr, dr);
                        for j in 0..n {
                            gr[j] += yr[j] * (dr[j] - s);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if let Some(g) = buf!(*x) {
                    for ((p, q), v) in g.iter_mut().zip(gout).zip(val(*x)) {
                        *p += q * kernels::gelu_grad(*v);
                    }
                }
            }
            Op::Exp(x) => {
                let y = nodes[i].value.data();
                if let Some(g) = buf!(*x) {
                    for ((p, q), v) in g.iter_mut().zip(gout).zip(y) {
                        *p += q * v;
                    }
                }
            }
            Op::Log(x) => {
                if let Some(g) = buf!(*x) {
                    for ((p, q), v) in g.iter_mut().zip(gout).zip(val(*x)) {
                        *p += q / v;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = shape(*x)[1];
                let gam = val(*gamma);
                if let Some(g) = buf!(*gamma) {
                    for (dr, hr) in gout.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            g[j] += dr[j] * hr[j];
                        }
                    }
                }
                if let Some(g) = buf!(*beta) {
                    for dr in gout.chunks(n) {
                        g.iter_mut().zip(dr).for_each(|(p, q)| *p += q);
                    }
                }
                if let Some(g) = buf!(*x) {
                    let nf = n as f64;
                    for (r, ((gr, dr), hr)) in g
                        .chunks_mut(n)
                        .zip(gout.chunks(n))
                        .zip(xhat.chunks(n))
                        .enumerate()
                    {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..n {
                            let dh = dr[j] * gam[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        for j in 0..n {
                            let dh = dr[j] * gam[j];
                            gr[j] += rstd[r] / nf * (nf * dh - s1 - hr[j] * s2);
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p].value.numel();
                    if let Some(g) = buf!(p) {
                        g.iter_mut().zip(&gout[off..off + len]).for_each(|(a, b)| *a += b);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let m = nodes[i].value.shape()[0];
                let total = nodes[i].value.shape()[1];
                let mut col = 0;
                for &p in parts {
                    let w = shape(p)[1];
                    if let Some(g) = buf!(p) {
                        for r in 0..m {
                            for c in 0..w {
                                g[r * w + c] += gout[r * total + col + c];
                            }
                        }
                    }
                    col += w;
                }
            }
            Op::SliceRows(x, start) => {
                let n = shape(*x)[1];
                if let Some(g) = buf!(*x) {
                    g[start * n..start * n + gout.len()]
                        .iter_mut()
                        .zip(gout)
                        .for_each(|(a, b)| *a += b);
                }
            }
            Op::SliceCols(x, start) => {
                let n = shape(*x)[1];
                let w = nodes[i].value.shape()[1];
                if let Some(g) = buf!(*x) {
                    for (r, dr) in gout.chunks(w.max(1)).enumerate() {
                        for c in 0..w {
                            g[r * n + start + c] += dr[c];
                        }
                    }
                }
            }
            Op::GatherRows(t, idx) => {
                let n = shape(*t)[1];
                if let Some(g) = buf!(*t) {
                    for (k, &r) in idx.iter().enumerate() {
                        for c in 0..n {
                            g[r * n + c] += gout[k * n + c];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(g) = buf!(*x) {
                    g.iter_mut().for_each(|p| *p += gout[0]);
                }
            }
            Op::MeanRows(x) => {
                let (m, n) = (shape(*x)[0], shape(*x)[1]);
                if let Some(g) = buf!(*x) {
                    for r in 0..m {
                        for c in 0..n {
                            g[r * n + c] += gout[c] / m as f64;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(g) = buf!(*x) {
                    g.iter_mut().zip(gout).for_each(|(a, b)| *a += b);
                }
            }
            Op::Transpose(x) => {
                let (m, n) = (shape(*x)[0], shape(*x)[1]);
                if let Some(g) = buf!(*x) {
                    for r in 0..m {
                        for c in 0..n {
                            g[r * n + c] += gout[c * m + r];
                        }
                    }
                }
            }
            Op::LogSumExpRows(x, keep) => {
                let (m, n) = (shape(*x)[0], shape(*x)[1]);
                let xs = val(*x);
                let lse = nodes[i].value.data();
                if let Some(g) = buf!(*x) {
                    for r in 0..m {
                        for c in 0..n {
                            let k = r * n + c;
                            if keep.as_ref().is_none_or(|kp| kp[k]) {
                                g[k] += gout[r] * (xs[k] - lse[r]).exp();
                            }
                        }
                    }
                }
            }
            Op::LogSumExpMasked(x, keep) => {
                let xs = val(*x);
                let lse = nodes[i].value.data()[0];
                if let Some(g) = buf!(*x) {
                    for (k, p) in g.iter_mut().enumerate() {
                        if keep[k] {
                            *p += gout[0] * (xs[k] - lse).exp();
                        }
                    }
                }
            }
            Op::Diag(x) => {
                let n = shape(*x)[0];
                if let Some(g) = buf!(*x) {
                    for d in 0..n {
                        g[d * n + d] += gout[d];
                    }
                }
            }
            Op::Dropout(x, mask) => {
                if let Some(g) = buf!(*x) {
                    for ((p, q), m) in g.iter_mut().zip(gout).zip(mask) {
                        *p += q * m;
                    }
                }
            }
        }
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], j: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[j].needs_grad {
        return None;
    }
    Some(grads[j].get_or_insert_with(|| vec![0.0; nodes[j].value.numel()]))
}
