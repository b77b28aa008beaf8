use std::sync::Arc;

use super::{Gradients, ParamId, ParamStore, Result, Tensor, TensorError};

/// Node handle on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Local gradient rule for a user-defined op: given the input values, the
/// output value and the upstream gradient, return one gradient per input.
pub type BackwardFn = Arc<dyn Fn(&[&Tensor], &Tensor, &[f64]) -> Vec<Vec<f64>> + Send + Sync>;

#[derive(Clone)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    Concat(Vec<Var>),
    Rows { src: Var, start: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Gather { src: Var, index: Arc<[Option<usize>]> },
    Custom { inputs: Vec<Var>, backward: BackwardFn },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

static NO_PARAMS: ParamStore = ParamStore::new();

/// Define-by-run computation record. Values are computed as ops are added.
pub struct Tape<'p> {
    nodes: Vec<Node>,
    store: &'p ParamStore,
    bound: Vec<Option<Var>>,
}

impl Default for Tape<'static> {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape<'static> {
    /// Tape without a parameter store; inputs come in through [`Tape::leaf`].
    pub fn new() -> Self {
        Self::with_params(&NO_PARAMS)
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Column-wise (axis 0) softmax of a rank-1 or rank-2 tensor.
fn softmax_cols(t: &Tensor) -> Vec<f64> {
    let (rows, cols) = t.rows_cols();
    let x = t.data();
    let mut out = vec![0.0; x.len()];
    for c in 0..cols {
        let max = (0..rows).map(|r| x[r * cols + c]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for r in 0..rows {
            let e = (x[r * cols + c] - max).exp();
            out[r * cols + c] = e;
            total += e;
        }
        for r in 0..rows {
            out[r * cols + c] /= total;
        }
    }
    out
}

fn log_sum_exp_cols(t: &Tensor) -> Vec<f64> {
    let (rows, cols) = t.rows_cols();
    let x = t.data();
    (0..cols)
        .map(|c| {
            let max = (0..rows).map(|r| x[r * cols + c]).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return max;
            }
            max + (0..rows).map(|r| (x[r * cols + c] - max).exp()).sum::<f64>().ln()
        })
        .collect()
}

fn add_into(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let g = slot.get_or_insert_with(|| vec![0.0; len]);
    f(g);
}

impl<'p> Tape<'p> {
    pub fn with_params(store: &'p ParamStore) -> Self {
        Self {
            nodes: Vec::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// First element of a node's value; intended for scalars.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v`'s value cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Binds a stored parameter as a leaf. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = self.push(value, Op::Param, true);
        self.bound[id.0] = Some(v);
        v
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor { shape: ta.shape().to_vec(), data };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`m` vector to a `[m]` vector or to every column of an
    /// `[m, n]` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let ok = tb.rank() == 1 && matches!(ta.rank(), 1 | 2) && ta.shape()[0] == tb.shape()[0];
        if !ok {
            return Err(mismatch("add_bias", ta, tb));
        }
        let (rows, cols) = ta.rows_cols();
        let mut data = ta.data().to_vec();
        for r in 0..rows {
            let b = tb.data()[r];
            data[r * cols..(r + 1) * cols].iter_mut().for_each(|v| *v += b);
        }
        let value = Tensor { shape: ta.shape().to_vec(), data };
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(value, Op::AddBias(a, bias), rg))
    }

    /// `[m,k] x [k] -> [m]` or `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || !matches!(tb.rank(), 1 | 2) || ta.shape()[1] != tb.shape()[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let n = if tb.rank() == 2 { tb.shape()[1] } else { 1 };
        let (x, y) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for kk in 0..k {
                let aik = x[i * k + kk];
                if aik == 0.0 {
                    continue;
                }
                let brow = &y[kk * n..(kk + 1) * n];
                row.iter_mut().zip(brow).for_each(|(o, bv)| *o += aik * bv);
            }
        }
        let shape = if tb.rank() == 2 { vec![m, n] } else { vec![m] };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data: out }, Op::MatMul(a, b), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let value = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|x| f(*x)).collect(),
        };
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.unary(a, |x| x * factor, Op::Scale(a, factor))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::Offset(a))
    }

    /// `c - a` for a constant `c`.
    pub fn rsub(&mut self, c: f64, a: Var) -> Var {
        let n = self.neg(a);
        self.offset(n, c)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    /// Softmax along axis 0 (per column for matrices).
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor { shape: t.shape().to_vec(), data: softmax_cols(t) };
        let rg = self.rg(a);
        self.push(value, Op::Softmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let lse = log_sum_exp_cols(t);
        let (rows, cols) = t.rows_cols();
        let mut data = t.data().to_vec();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] -= lse[c];
            }
        }
        let value = Tensor { shape: t.shape().to_vec(), data };
        let rg = self.rg(a);
        self.push(value, Op::LogSoftmax(a), rg)
    }

    /// `log Σ exp` along axis 0: `[m] -> []`, `[m, n] -> [n]`.
    pub fn log_sum_exp(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = log_sum_exp_cols(t);
        let shape = if t.rank() >= 2 { t.shape()[1..].to_vec() } else { Vec::new() };
        let rg = self.rg(a);
        self.push(Tensor { shape, data }, Op::LogSumExp(a), rg)
    }

    /// Concatenation along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = match parts.first() {
            Some(v) => self.value(*v),
            None => return Err(TensorError::Invalid("concat of zero parts".into())),
        };
        let tail = first.shape().get(1..).unwrap_or(&[]).to_vec();
        let rank = first.rank().max(1);
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let t = self.value(*p);
            let t_tail = t.shape().get(1..).unwrap_or(&[]);
            if t.rank().max(1) != rank || t_tail != tail.as_slice() {
                return Err(mismatch("concat", first, t));
            }
            rows += t.rows_cols().0;
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(Tensor { shape, data }, Op::Concat(parts.to_vec()), rg))
    }

    /// `len` consecutive entries (rank 1) or rows (rank 2+) starting at `start`.
    pub fn rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (rows, stride) = t.rows_cols();
        if t.rank() == 0 || start + len > rows {
            return Err(TensorError::ShapeMismatch {
                op: "rows",
                left: t.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let data = t.data()[start * stride..(start + len) * stride].to_vec();
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape, data }, Op::Rows { src: a, start }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Sum of all entries.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Inner product of two same-shape nodes.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let m = self.mul(a, b)?;
        Ok(self.sum(m))
    }

    /// Builds a tensor of `shape` whose flat entry `i` is `src[index[i]]`, or
    /// zero when `index[i]` is `None`.
    pub fn gather(&mut self, src: Var, index: Arc<[Option<usize>]>, shape: &[usize]) -> Result<Var> {
        let t = self.value(src);
        let n: usize = shape.iter().product();
        if n != index.len() || index.iter().flatten().any(|&i| i >= t.len()) {
            return Err(TensorError::ShapeMismatch {
                op: "gather",
                left: t.shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        let data = index.iter().map(|i| i.map_or(0.0, |i| t.data()[i])).collect();
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(src);
        Ok(self.push(value, Op::Gather { src, index }, rg))
    }

    /// Records an op whose value was computed by the caller and whose local
    /// gradient rule is `backward`.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: BackwardFn) -> Var {
        let rg = inputs.iter().any(|v| self.rg(*v));
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Grads> {
        let rt = self.value(root);
        if rt.len() != 1 {
            return Err(TensorError::NonScalarRoot(rt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        if !self.rg(root) {
            return Ok(Grads { grads });
        }
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        macro_rules! acc {
            ($v:expr, |$buf:ident| $body:expr) => {{
                let v: Var = $v;
                if wants(v) {
                    let len = val(v).len();
                    add_into(&mut grads[v.0], len, |$buf| $body);
                }
            }};
        }
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                acc!(*a, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc!(*b, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                acc!(*a, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc!(*b, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                acc!(*a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * tb[i];
                    }
                });
                acc!(*b, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * ta[i];
                    }
                });
            }
            Op::AddBias(a, bias) => {
                acc!(*a, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                let (rows, cols) = out.rows_cols();
                acc!(*bias, |d| {
                    for r in 0..rows {
                        d[r] += g[r * cols..(r + 1) * cols].iter().sum::<f64>();
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = if tb.rank() == 2 { tb.shape()[1] } else { 1 };
                let (x, y) = (ta.data(), tb.data());
                acc!(*a, |d| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let brow = &y[kk * n..(kk + 1) * n];
                            d[i * k + kk] += grow.iter().zip(brow).map(|(p, q)| p * q).sum::<f64>();
                        }
                    }
                });
                acc!(*b, |d| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let aik = x[i * k + kk];
                            d[kk * n..(kk + 1) * n]
                                .iter_mut()
                                .zip(grow)
                                .for_each(|(o, gv)| *o += aik * gv);
                        }
                    }
                });
            }
            Op::Scale(a, f) => acc!(*a, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += f * y)),
            Op::Offset(a) | Op::Reshape(a) => {
                acc!(*a, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y))
            }
            Op::Tanh(a) => {
                let o = out.data();
                acc!(*a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * (1.0 - o[i] * o[i]);
                    }
                })
            }
            Op::Sigmoid(a) => {
                let o = out.data();
                acc!(*a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * o[i] * (1.0 - o[i]);
                    }
                })
            }
            Op::Relu(a) => {
                let x = val(*a).data();
                acc!(*a, |d| {
                    for i in 0..d.len() {
                        if x[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                })
            }
            Op::Exp(a) => {
                let o = out.data();
                acc!(*a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * o[i];
                    }
                })
            }
            Op::Log(a) => {
                let x = val(*a).data();
                acc!(*a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] / x[i];
                    }
                })
            }
            Op::Softmax(a) => {
                let (rows, cols) = out.rows_cols();
                let y = out.data();
                acc!(*a, |d| {
                    for c in 0..cols {
                        let s: f64 = (0..rows).map(|r| g[r * cols + c] * y[r * cols + c]).sum();
                        for r in 0..rows {
                            let i = r * cols + c;
                            d[i] += y[i] * (g[i] - s);
                        }
                    }
                })
            }
            Op::LogSoftmax(a) => {
                let (rows, cols) = out.rows_cols();
                let y = out.data();
                acc!(*a, |d| {
                    for c in 0..cols {
                        let s: f64 = (0..rows).map(|r| g[r * cols + c]).sum();
                        for r in 0..rows {
                            let i = r * cols + c;
                            d[i] += g[i] - y[i].exp() * s;
                        }
                    }
                })
            }
            Op::LogSumExp(a) => {
                let t = val(*a);
                let (rows, cols) = t.rows_cols();
                let x = t.data();
                let o = out.data();
                acc!(*a, |d| {
                    for c in 0..cols {
                        for r in 0..rows {
                            let i = r * cols + c;
                            d[i] += g[c] * (x[i] - o[c]).exp();
                        }
                    }
                })
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = val(*p).len();
                    let slice = &g[offset..offset + len];
                    acc!(*p, |d| d.iter_mut().zip(slice).for_each(|(x, y)| *x += y));
                    offset += len;
                }
            }
            Op::Rows { src, start } => {
                let stride = val(*src).rows_cols().1;
                let begin = start * stride;
                acc!(*src, |d| d[begin..begin + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(x, y)| *x += y));
            }
            Op::Sum(a) => acc!(*a, |d| d.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                acc!(*a, |d| d.iter_mut().for_each(|x| *x += g[0] / n))
            }
            Op::Gather { src, index } => acc!(*src, |d| {
                for (gi, idx) in g.iter().zip(index.iter()) {
                    if let Some(j) = idx {
                        d[*j] += gi;
                    }
                }
            }),
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                let local = backward(&vals, out, g);
                for (v, lg) in inputs.iter().zip(local) {
                    acc!(*v, |d| d.iter_mut().zip(&lg).for_each(|(x, y)| *x += y));
                }
            }
        }
    }

    /// Collects gradients of every parameter bound on this tape. Bound
    /// parameters the root does not depend on get zero gradients; unbound
    /// ones stay missing.
    pub fn param_gradients(&self, grads: &Grads) -> Gradients {
        let mut out = Gradients::empty(self.store);
        for (i, bound) in self.bound.iter().enumerate() {
            if let Some(v) = bound {
                let id = ParamId(i);
                match grads.wrt(*v) {
                    Some(g) => out.accumulate_raw(id, g),
                    None => out.accumulate_raw(id, &vec![0.0; self.store.get(id).len()]),
                }
            }
        }
        out
    }
}

/// Result of a reverse sweep.
#[derive(Debug, Clone)]
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    /// `∂root/∂v`, or `None` when the root does not depend on `v`.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}
