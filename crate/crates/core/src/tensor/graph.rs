use std::sync::Arc;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::{ParamId, ParamStore, Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f32),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    BroadcastBatch(Var),
    Gather { x: Var, index: Arc<[usize]> },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, rstd: Vec<f32> },
    Gelu(Var),
    Tanh(Var),
    Exp(Var),
    Clamp { x: Var, lo: f32, hi: f32 },
    Minimum(Var, Var),
    Sum(Var),
    Mean(Var),
    MeanAxis { x: Var, axis: usize },
    SumLastDim(Var),
    PickLastDim { x: Var, idx: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A tape of tensor operations.
///
/// Nodes are appended in execution order, so the tape is topologically sorted
/// by construction and backward is a single reverse sweep. Leaf gradients
/// accumulate across `backward` calls; intermediate gradients are rebuilt on
/// every call.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    params: Vec<(ParamId, Var)>,
}

// outer × axis × inner decomposition of a shape
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn last_dim(shape: &[usize]) -> (usize, usize) {
    let n = *shape.last().expect("rank >= 1");
    (shape.iter().product::<usize>() / n, n)
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let mut value = value;
        value.clear_grad();
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    fn make(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
        Tensor::new(shape, data).expect("op output shape matches data")
    }

    /// Records an input tensor. Its `requires_grad` flag is honoured.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        let rg = t.requires_grad();
        self.push("leaf", t, Op::Leaf, rg)
    }

    /// Records a tensor that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor) -> Result<Var> {
        t.set_requires_grad(false);
        self.push("constant", t, Op::Leaf, false)
    }

    /// Binds a parameter from `store` as a trainable leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let mut t = store.get(id).clone();
        t.set_requires_grad(true);
        let v = self.push("param", t, Op::Leaf, true)?;
        self.params.push((id, v));
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Shape { op: "matmul", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(self.data(a), self.data(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", Self::make(vec![m, n], out), Op::MatMul(a, b), rg)
    }

    /// Batched product of `[B,m,k]` with `[B,k,n]`, or with `[B,n,k]` transposed.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || TensorError::Shape { op: "bmm", lhs: sa.clone(), rhs: sb.clone() };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for bi in 0..batch {
            let ai = &da[bi * m * k..(bi + 1) * m * k];
            let bb = &db[bi * k * n..(bi + 1) * k * n];
            let oi = &mut out[bi * m * n..(bi + 1) * m * n];
            if trans_b {
                gemm_nt(ai, bb, oi, m, k, n);
            } else {
                gemm_nn(ai, bb, oi, m, k, n);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push("bmm", Self::make(vec![batch, m, n], out), Op::BatchMatMul { a, b, trans_b }, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape { op, lhs: self.shape(a).to_vec(), rhs: self.shape(b).to_vec() });
        }
        Ok(())
    }

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32, op: Op) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let out: Vec<f32> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        self.push(op_name, Self::make(shape, out), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, f32::min, Op::Minimum(a, b))
    }

    /// Adds a `[n]` bias along the last dimension. The only broadcast on offer.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(TensorError::Shape { op: "add_bias", lhs: sx.to_vec(), rhs: sb.to_vec() });
        }
        let n = sb[0];
        let b = self.data(bias);
        let out: Vec<f32> = self.data(x).iter().enumerate().map(|(i, &v)| v + b[i % n]).collect();
        let rg = self.rg(x) || self.rg(bias);
        let shape = sx.to_vec();
        self.push("add_bias", Self::make(shape, out), Op::AddBias(x, bias), rg)
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Result<Var> {
        let out = self.data(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push("scale", Self::make(shape, out), Op::Scale(x, c), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).numel() || shape.contains(&0) {
            return Err(TensorError::Shape { op: "reshape", lhs: self.shape(x).to_vec(), rhs: shape.to_vec() });
        }
        let data = self.data(x).to_vec();
        let rg = self.rg(x);
        self.push("reshape", Self::make(shape.to_vec(), data), Op::Reshape(x), rg)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or(TensorError::Invalid { op: "concat", msg: "no inputs".into() })?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::Invalid { op: "concat", msg: format!("axis {axis} out of range for {base:?}") });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::Shape { op: "concat", lhs: base.clone(), rhs: s.to_vec() });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut shape = base.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * len..(o + 1) * len]);
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push("concat", Self::make(shape, out), Op::Concat { inputs: inputs.to_vec(), axis }, rg)
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(TensorError::Invalid {
                op: "narrow",
                msg: format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            });
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        let d = self.data(x);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(x);
        self.push("narrow", Self::make(shape, out), Op::Narrow { x, axis, start }, rg)
    }

    /// Splits along `axis` into pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &len in sizes {
            parts.push(self.narrow(x, axis, start, len)?);
            start += len;
        }
        if start != self.shape(x)[axis] {
            return Err(TensorError::Invalid { op: "split", msg: format!("sizes {sizes:?} do not cover axis {axis}") });
        }
        Ok(parts)
    }

    /// Repeats `x` along a new leading axis of size `batch`.
    pub fn broadcast_batch(&mut self, x: Var, batch: usize) -> Result<Var> {
        if batch == 0 {
            return Err(TensorError::Invalid { op: "broadcast_batch", msg: "batch must be positive".into() });
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(self.shape(x));
        let d = self.data(x);
        let mut out = Vec::with_capacity(d.len() * batch);
        for _ in 0..batch {
            out.extend_from_slice(d);
        }
        let rg = self.rg(x);
        self.push("broadcast_batch", Self::make(shape, out), Op::BroadcastBatch(x), rg)
    }

    /// `out.flat[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        let d = self.data(x);
        if n != index.len() || index.iter().any(|&i| i >= d.len()) {
            return Err(TensorError::Invalid {
                op: "gather",
                msg: format!("index does not fit output {shape:?} / input of {} values", d.len()),
            });
        }
        let out = index.iter().map(|&i| d[i]).collect();
        let rg = self.rg(x);
        self.push("gather", Self::make(shape.to_vec(), out), Op::Gather { x, index }, rg)
    }

    /// Selects rows of a `[n, d]` tensor.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TensorError::Invalid { op: "gather_rows", msg: format!("expected rank 2, got {s:?}") });
        }
        let d = s[1];
        let index: Vec<usize> = rows.iter().flat_map(|&r| (r * d)..(r * d + d)).collect();
        self.gather(x, index.into(), &[rows.len(), d])
    }

    pub fn softmax_last_dim(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, n) = last_dim(&shape);
        let d = self.data(x);
        let mut out = vec![0.0; d.len()];
        for r in 0..rows {
            let xs = &d[r * n..(r + 1) * n];
            let ys = &mut out[r * n..(r + 1) * n];
            let max = xs.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0;
            for (y, &v) in ys.iter_mut().zip(xs) {
                *y = (v - max).exp();
                sum += *y;
            }
            ys.iter_mut().for_each(|y| *y /= sum);
        }
        let rg = self.rg(x);
        self.push("softmax", Self::make(shape, out), Op::Softmax(x), rg)
    }

    pub fn log_softmax_last_dim(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, n) = last_dim(&shape);
        let d = self.data(x);
        let mut out = vec![0.0; d.len()];
        for r in 0..rows {
            let xs = &d[r * n..(r + 1) * n];
            let max = xs.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = max + xs.iter().map(|&v| (v - max).exp()).sum::<f32>().ln();
            for (y, &v) in out[r * n..(r + 1) * n].iter_mut().zip(xs) {
                *y = v - lse;
            }
        }
        let rg = self.rg(x);
        self.push("log_softmax", Self::make(shape, out), Op::LogSoftmax(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, d) = last_dim(&shape);
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(TensorError::Shape { op: "layer_norm", lhs: shape.clone(), rhs: self.shape(p).to_vec() });
            }
        }
        let (xd, g, b) = (self.data(x), self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let xs = &xd[r * d..(r + 1) * d];
            let mean = xs.iter().sum::<f32>() / d as f32;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..d {
                let h = (xs[i] - mean) * rs;
                xhat[r * d + i] = h;
                out[r * d + i] = h * g[i] + b[i];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push("layer_norm", Self::make(shape, out), Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    fn unary(&mut self, op_name: &'static str, x: Var, f: impl Fn(f32) -> f32, op: Op) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(op_name, Self::make(shape, out), op, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, |v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()), Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, f32::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f32::exp, Op::Exp(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Result<Var> {
        self.unary("clamp", x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let d = self.data(x);
        let s = d.iter().sum::<f32>() / d.len() as f32;
        let rg = self.rg(x);
        self.push("mean", Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean over `axis`, removing it. A rank-1 input yields shape `[1]`.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(TensorError::Invalid { op: "mean_axis", msg: format!("axis {axis} out of range for {s:?}") });
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let d = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let acc = &mut out[o * inner..(o + 1) * inner];
            for l in 0..n {
                let src = &d[(o * n + l) * inner..(o * n + l + 1) * inner];
                acc.iter_mut().zip(src).for_each(|(a, b)| *a += b);
            }
            acc.iter_mut().for_each(|a| *a /= n as f32);
        }
        let mut shape = s;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(x);
        self.push("mean_axis", Self::make(shape, out), Op::MeanAxis { x, axis }, rg)
    }

    pub fn sum_last_dim(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (rows, n) = last_dim(&s);
        let out = self.data(x).chunks(n).map(|c| c.iter().sum()).collect();
        let mut shape = s[..s.len() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        debug_assert_eq!(shape.iter().product::<usize>(), rows);
        let rg = self.rg(x);
        self.push("sum_last_dim", Self::make(shape, out), Op::SumLastDim(x), rg)
    }

    /// From `[B, n]` picks `x[b, idx[b]]`, giving `[B]`.
    pub fn pick_last_dim(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != idx.len() || idx.iter().any(|&i| i >= s[1]) {
            return Err(TensorError::Shape { op: "pick_last_dim", lhs: s, rhs: vec![idx.len()] });
        }
        let n = s[1];
        let d = self.data(x);
        let out = idx.iter().enumerate().map(|(b, &i)| d[b * n + i]).collect();
        let rg = self.rg(x);
        self.push("pick_last_dim", Self::make(vec![idx.len()], out), Op::PickLastDim { x, idx: idx.to_vec() }, rg)
    }

    /// Linear layer `x·W + b` over the last dimension of any-rank `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (rows, k) = last_dim(&s);
        let flat = if s.len() == 2 { x } else { self.reshape(x, &[rows, k])? };
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = b {
            y = self.add_bias(y, b)?;
        }
        if s.len() == 2 {
            return Ok(y);
        }
        let mut out_shape = s;
        *out_shape.last_mut().unwrap() = self.shape(y)[1];
        self.reshape(y, &out_shape)
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        if !self.rg(loss) {
            return Ok(());
        }
        seed(&mut self.grads[loss.0], 1);
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(nodes, grads, node, &g);
        }
        Ok(())
    }

    /// Adds every bound parameter's gradient into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for &(id, v) in &self.params {
            if let Some(g) = &self.grads[v.0] {
                store.get_mut(id).accumulate_grad(g);
            }
        }
    }
}

fn seed(slot: &mut Option<Vec<f32>>, n: usize) {
    match slot {
        Some(g) => g.iter_mut().for_each(|x| *x += 1.0),
        None => *slot = Some(vec![1.0; n]),
    }
}

// Accumulates into the gradient of `v` if it participates in differentiation.
fn acc(nodes: &[Node], grads: &mut [Option<Vec<f32>>], v: Var, f: impl FnOnce(&mut [f32], &[f32])) {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return;
    }
    let buf = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]);
    f(buf, node.value.data());
}

fn add_into(buf: &mut [f32], g: &[f32]) {
    buf.iter_mut().zip(g).for_each(|(a, b)| *a += b);
}

fn backprop(nodes: &[Node], grads: &mut [Option<Vec<f32>>], node: &Node, g: &[f32]) {
    let val = |v: Var| nodes[v.0].value.data();
    let shp = |v: Var| nodes[v.0].value.shape();
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (shp(*a)[0], shp(*a)[1]);
            let n = shp(*b)[1];
            let bv = val(*b);
            acc(nodes, grads, *a, |buf, _| gemm_nt(g, bv, buf, m, n, k));
            let av = val(*a);
            acc(nodes, grads, *b, |buf, _| gemm_tn(av, g, buf, m, k, n));
        }
        Op::BatchMatMul { a, b, trans_b } => {
            let sa = shp(*a);
            let (batch, m, k) = (sa[0], sa[1], sa[2]);
            let n = if *trans_b { shp(*b)[1] } else { shp(*b)[2] };
            let (av, bv) = (val(*a), val(*b));
            acc(nodes, grads, *a, |buf, _| {
                for bi in 0..batch {
                    let gi = &g[bi * m * n..(bi + 1) * m * n];
                    let bb = &bv[bi * k * n..(bi + 1) * k * n];
                    let out = &mut buf[bi * m * k..(bi + 1) * m * k];
                    if *trans_b {
                        gemm_nn(gi, bb, out, m, n, k);
                    } else {
                        gemm_nt(gi, bb, out, m, n, k);
                    }
                }
            });
            acc(nodes, grads, *b, |buf, _| {
                for bi in 0..batch {
                    let gi = &g[bi * m * n..(bi + 1) * m * n];
                    let ai = &av[bi * m * k..(bi + 1) * m * k];
                    let out = &mut buf[bi * k * n..(bi + 1) * k * n];
                    if *trans_b {
                        gemm_tn(gi, ai, out, m, n, k);
                    } else {
                        gemm_tn(ai, gi, out, m, k, n);
                    }
                }
            });
        }
        Op::Add(a, b) => {
            acc(nodes, grads, *a, |buf, _| add_into(buf, g));
            acc(nodes, grads, *b, |buf, _| add_into(buf, g));
        }
        Op::Sub(a, b) => {
            acc(nodes, grads, *a, |buf, _| add_into(buf, g));
            acc(nodes, grads, *b, |buf, _| buf.iter_mut().zip(g).for_each(|(o, d)| *o -= d));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            acc(nodes, grads, *a, |buf, _| {
                for i in 0..buf.len() {
                    buf[i] += g[i] * bv[i];
                }
            });
            acc(nodes, grads, *b, |buf, _| {
                for i in 0..buf.len() {
                    buf[i] += g[i] * av[i];
                }
            });
        }
        Op::Minimum(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            acc(nodes, grads, *a, |buf, _| {
                for i in 0..buf.len() {
                    if av[i] <= bv[i] {
                        buf[i] += g[i];
                    }
                }
            });
            acc(nodes, grads, *b, |buf, _| {
                for i in 0..buf.len() {
                    if av[i] > bv[i] {
                        buf[i] += g[i];
                    }
                }
            });
        }
        Op::AddBias(x, bias) => {
            acc(nodes, grads, *x, |buf, _| add_into(buf, g));
            acc(nodes, grads, *bias, |buf, _| {
                let n = buf.len();
                for row in g.chunks(n) {
                    add_into(buf, row);
                }
            });
        }
        Op::Scale(x, c) => acc(nodes, grads, *x, |buf, _| buf.iter_mut().zip(g).for_each(|(o, d)| *o += c * d)),
        Op::Reshape(x) => acc(nodes, grads, *x, |buf, _| add_into(buf, g)),
        Op::Concat { inputs, axis } => {
            let out_shape = node.value.shape();
            let (outer, total, inner) = split_axis(out_shape, *axis);
            let mut offset = 0;
            for &v in inputs {
                let len = shp(v)[*axis] * inner;
                acc(nodes, grads, v, |buf, _| {
                    for o in 0..outer {
                        let src = &g[o * total * inner + offset..o * total * inner + offset + len];
                        add_into(&mut buf[o * len..(o + 1) * len], src);
                    }
                });
                offset += len;
            }
        }
        Op::Narrow { x, axis, start } => {
            let (outer, n, inner) = split_axis(shp(*x), *axis);
            let len = node.value.shape()[*axis];
            acc(nodes, grads, *x, |buf, _| {
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    add_into(&mut buf[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                }
            });
        }
        Op::BroadcastBatch(x) => acc(nodes, grads, *x, |buf, _| {
            let n = buf.len();
            for chunk in g.chunks(n) {
                add_into(buf, chunk);
            }
        }),
        Op::Gather { x, index } => acc(nodes, grads, *x, |buf, _| {
            for (&i, &d) in index.iter().zip(g) {
                buf[i] += d;
            }
        }),
        Op::Softmax(x) => {
            let n = *node.value.shape().last().unwrap();
            acc(nodes, grads, *x, |buf, _| {
                for ((bo, yr), gr) in buf.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let dotp: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for i in 0..n {
                        bo[i] += yr[i] * (gr[i] - dotp);
                    }
                }
            });
        }
        Op::LogSoftmax(x) => {
            let n = *node.value.shape().last().unwrap();
            acc(nodes, grads, *x, |buf, _| {
                for ((bo, yr), gr) in buf.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let gsum: f32 = gr.iter().sum();
                    for i in 0..n {
                        bo[i] += gr[i] - yr[i].exp() * gsum;
                    }
                }
            });
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let d = shp(*gamma)[0];
            let gam = val(*gamma);
            acc(nodes, grads, *gamma, |buf, _| {
                for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for i in 0..d {
                        buf[i] += gr[i] * hr[i];
                    }
                }
            });
            acc(nodes, grads, *beta, |buf, _| {
                for gr in g.chunks(d) {
                    add_into(buf, gr);
                }
            });
            acc(nodes, grads, *x, |buf, _| {
                for (r, ((bo, gr), hr)) in buf.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).enumerate() {
                    let mut mean_dh = 0.0;
                    let mut mean_dhh = 0.0;
                    for i in 0..d {
                        let dh = gr[i] * gam[i];
                        mean_dh += dh;
                        mean_dhh += dh * hr[i];
                    }
                    mean_dh /= d as f32;
                    mean_dhh /= d as f32;
                    for i in 0..d {
                        let dh = gr[i] * gam[i];
                        bo[i] += rstd[r] * (dh - mean_dh - hr[i] * mean_dhh);
                    }
                }
            });
        }
        Op::Gelu(x) => acc(nodes, grads, *x, |buf, xv| {
            for i in 0..buf.len() {
                let v = xv[i];
                let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                buf[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
            }
        }),
        Op::Tanh(x) => acc(nodes, grads, *x, |buf, _| {
            for i in 0..buf.len() {
                buf[i] += g[i] * (1.0 - y[i] * y[i]);
            }
        }),
        Op::Exp(x) => acc(nodes, grads, *x, |buf, _| {
            for i in 0..buf.len() {
                buf[i] += g[i] * y[i];
            }
        }),
        Op::Clamp { x, lo, hi } => acc(nodes, grads, *x, |buf, xv| {
            for i in 0..buf.len() {
                if xv[i] >= *lo && xv[i] <= *hi {
                    buf[i] += g[i];
                }
            }
        }),
        Op::Sum(x) => acc(nodes, grads, *x, |buf, _| buf.iter_mut().for_each(|o| *o += g[0])),
        Op::Mean(x) => acc(nodes, grads, *x, |buf, _| {
            let s = g[0] / buf.len() as f32;
            buf.iter_mut().for_each(|o| *o += s);
        }),
        Op::MeanAxis { x, axis } => {
            let (outer, n, inner) = split_axis(shp(*x), *axis);
            acc(nodes, grads, *x, |buf, _| {
                for o in 0..outer {
                    let gr = &g[o * inner..(o + 1) * inner];
                    for l in 0..n {
                        let dst = &mut buf[(o * n + l) * inner..(o * n + l + 1) * inner];
                        dst.iter_mut().zip(gr).for_each(|(a, b)| *a += b / n as f32);
                    }
                }
            });
        }
        Op::SumLastDim(x) => {
            let n = *shp(*x).last().unwrap();
            acc(nodes, grads, *x, |buf, _| {
                for (row, &d) in buf.chunks_mut(n).zip(g) {
                    row.iter_mut().for_each(|o| *o += d);
                }
            });
        }
        Op::PickLastDim { x, idx } => {
            let n = shp(*x)[1];
            acc(nodes, grads, *x, |buf, _| {
                for (b, &i) in idx.iter().enumerate() {
                    buf[b * n + i] += g[b];
                }
            });
        }
    }
}
