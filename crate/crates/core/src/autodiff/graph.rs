use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::{AutodiffError, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type Result<T> = std::result::Result<T, AutodiffError>;

/// Elementwise derivative supplied with [`Graph::map`].
pub type Derivative = Box<dyn Fn(f64) -> f64>;

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, batched: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    AddScalar { a: Var },
    Softmax { a: Var },
    Log { a: Var },
    Exp { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    MaskedFill { a: Var, mask: Vec<bool> },
    Reshape { a: Var },
    Transpose { a: Var, d1: usize, d2: usize },
    SumAll { a: Var },
    SumLast { a: Var },
    MeanAll { a: Var },
    Gather { a: Var, idx: Vec<usize> },
    Relu { a: Var },
    Gelu { a: Var },
    Clamp { a: Var, lo: f64, hi: f64 },
    Powi { a: Var, n: i32 },
    Map { a: Var, df: Derivative },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive applications in topological order and replays them in
/// reverse to accumulate gradients.
///
/// A graph is meant to live for a single forward/backward pass. Values that do
/// not depend on any `requires_grad` leaf are stored as constants and are never
/// visited by [`Graph::backward`].
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Expansion rule shared by the binary elementwise primitives: `b` either has
/// the same shape as `a` or equals a trailing suffix of it.
fn check_expand(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a == b {
        return Ok(());
    }
    if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
        return Ok(());
    }
    Err(AutodiffError::ShapeMismatch {
        op,
        detail: format!("cannot expand {:?} against {:?} (only leading batch axes broadcast)", b, a),
    })
}

fn tanh_gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let value = 0.5 * x * (1.0 + t);
    let d_inner = C * (1.0 + 3.0 * 0.044715 * x * x);
    let deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner;
    (value, deriv)
}

fn transposed_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Copies `src` (shape `shape`) into a new buffer with axes `d1` and `d2` swapped.
fn swap_axes(src: &[f64], shape: &[usize], d1: usize, d2: usize) -> (Vec<usize>, Vec<f64>) {
    let mut out_shape = shape.to_vec();
    out_shape.swap(d1, d2);
    let in_strides = transposed_strides(shape);
    let mut perm_strides = in_strides.clone();
    perm_strides.swap(d1, d2);
    let mut out = vec![0.0; src.len()];
    let mut idx = vec![0usize; out_shape.len()];
    let mut offset = 0usize;
    for slot in out.iter_mut() {
        *slot = src[offset];
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            offset += perm_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= perm_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward root with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::from_parts(self.nodes[v.0].value.shape().to_vec(), g.clone()))
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copies the current value of `v` into a new constant node.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = &self.nodes[a.0].value;
        let data = src.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::from_parts(src.shape().to_vec(), data);
        self.push(value, &[a], op)
    }

    /// `a[..., m, k] @ b[k, n]`, or a batched product when `b` has rank >= 3
    /// and both operands share their leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.nodes[a.0].value.shape().to_vec();
        let sb = self.nodes[b.0].value.shape().to_vec();
        if sa.is_empty() || sb.len() < 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                detail: format!("operands {:?} and {:?} need rank >= 1 and >= 2", sa, sb),
            });
        }
        let k = *sa.last().unwrap();
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                detail: format!("inner dimensions differ: {:?} x {:?} ({} vs {})", sa, sb, k, kb),
            });
        }
        if sb.len() == 2 {
            let m = self.nodes[a.0].value.numel() / k;
            let mut out = vec![0.0; m * n];
            gemm_nn(self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), &mut out, m, k, n);
            let mut shape = sa.clone();
            *shape.last_mut().unwrap() = n;
            return Ok(self.push(Tensor::from_parts(shape, out), &[a, b], Op::MatMul { a, b, batched: false }));
        }
        if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                detail: format!("batched operands {:?} and {:?} disagree on leading axes", sa, sb),
            });
        }
        let m = sa[sa.len() - 2];
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let ad = self.nodes[a.0].value.data();
            let bd = self.nodes[b.0].value.data();
            for i in 0..batch {
                gemm_nn(
                    &ad[i * m * k..(i + 1) * m * k],
                    &bd[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        Ok(self.push(Tensor::from_parts(shape, out), &[a, b], Op::MatMul { a, b, batched: true }))
    }

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        check_expand(op_name, ta.shape(), tb.shape())?;
        let bd = tb.data();
        let nb = bd.len();
        let data = ta.data().iter().enumerate().map(|(i, &x)| f(x, bd[i % nb])).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, &[a, b], Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, &[a, b], Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, &[a, b], Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale { a, c })
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar { a })
    }

    /// Softmax over the trailing axis, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let src = &self.nodes[a.0].value;
        let width = src.last_dim();
        let mut data = src.data().to_vec();
        for row in data.chunks_mut(width) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::from_parts(src.shape().to_vec(), data);
        self.push(value, &[a], Op::Softmax { a })
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log { a })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp { a })
    }

    /// Layer normalisation over the trailing axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let width = tx.last_dim();
        for (name, v) in [("gain", gain), ("bias", bias)] {
            let s = self.nodes[v.0].value.shape();
            if s != [width] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "layer_norm",
                    detail: format!("{} has shape {:?}, expected [{}]", name, s, width),
                });
            }
        }
        let g = self.nodes[gain.0].value.data();
        let b = self.nodes[bias.0].value.data();
        let rows = tx.numel() / width;
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * width..(r + 1) * width];
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..width {
                let h = (row[j] - mean) * is;
                xhat[r * width + j] = h;
                out[r * width + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), out);
        Ok(self.push(value, &[x, gain, bias], Op::LayerNorm { x, gain, bias, xhat, inv_std }))
    }

    /// Row lookup into `table[V, d]`; the result has shape `out_shape ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], out_shape: &[usize]) -> Result<Var> {
        let tt = &self.nodes[table.0].value;
        if tt.rank() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "embedding_lookup",
                detail: format!("table must be rank 2, got {:?}", tt.shape()),
            });
        }
        let (rows, d) = (tt.shape()[0], tt.shape()[1]);
        if out_shape.iter().product::<usize>() != ids.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "embedding_lookup",
                detail: format!("{} ids cannot fill shape {:?}", ids.len(), out_shape),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(AutodiffError::IndexOutOfRange { op: "embedding_lookup", index: bad, bound: rows });
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tt.data()[i * d..(i + 1) * d]);
        }
        let mut shape = out_shape.to_vec();
        shape.push(d);
        let value = Tensor::from_parts(shape, data);
        Ok(self.push(value, &[table], Op::Embedding { table, ids: ids.to_vec() }))
    }

    /// Replaces entries where `mask` is true with `fill`. The mask covers
    /// either the full tensor or a trailing suffix of its shape.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], fill: f64) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if mask.is_empty() || ta.numel() % mask.len() != 0 {
            return Err(AutodiffError::ShapeMismatch {
                op: "masked_fill",
                detail: format!("mask of {} entries does not tile {:?}", mask.len(), ta.shape()),
            });
        }
        let n = mask.len();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| if mask[i % n] { fill } else { x })
            .collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(value, &[a], Op::MaskedFill { a, mask: mask.to_vec() }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if shape.iter().product::<usize>() != ta.numel() || shape.contains(&0) {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                detail: format!("cannot view {:?} as {:?}", ta.shape(), shape),
            });
        }
        let value = Tensor::from_parts(shape.to_vec(), ta.data().to_vec());
        Ok(self.push(value, &[a], Op::Reshape { a }))
    }

    /// Swaps axes `d1` and `d2`.
    pub fn transpose(&mut self, a: Var, d1: usize, d2: usize) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if d1 >= ta.rank() || d2 >= ta.rank() {
            return Err(AutodiffError::ShapeMismatch {
                op: "transpose",
                detail: format!("axes ({}, {}) out of range for {:?}", d1, d2, ta.shape()),
            });
        }
        let (shape, data) = swap_axes(ta.data(), ta.shape(), d1, d2);
        Ok(self.push(Tensor::from_parts(shape, data), &[a], Op::Transpose { a, d1, d2 }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.nodes[a.0].value.data().iter().sum();
        self.push(Tensor::scalar(total), &[a], Op::SumAll { a })
    }

    /// Sum over the trailing axis.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let width = ta.last_dim();
        let data: Vec<f64> = ta.data().chunks(width).map(|r| r.iter().sum()).collect();
        let shape = ta.shape()[..ta.rank().saturating_sub(1)].to_vec();
        self.push(Tensor::from_parts(shape, data), &[a], Op::SumLast { a })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let mean = ta.data().iter().sum::<f64>() / ta.numel() as f64;
        self.push(Tensor::scalar(mean), &[a], Op::MeanAll { a })
    }

    /// Picks `a[..., idx[r]]` from every trailing row `r`.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let width = ta.last_dim();
        let rows = ta.numel() / width;
        if idx.len() != rows {
            return Err(AutodiffError::ShapeMismatch {
                op: "gather",
                detail: format!("{} indices for {} rows of {:?}", idx.len(), rows, ta.shape()),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= width) {
            return Err(AutodiffError::IndexOutOfRange { op: "gather", index: bad, bound: width });
        }
        let data = idx.iter().enumerate().map(|(r, &j)| ta.data()[r * width + j]).collect();
        let shape = ta.shape()[..ta.rank().saturating_sub(1)].to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), &[a], Op::Gather { a, idx: idx.to_vec() }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu { a })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, |x| tanh_gelu(x).0, Op::Gelu { a })
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp { a, lo, hi })
    }

    pub fn powi(&mut self, a: Var, n: i32) -> Var {
        self.unary(a, |x| x.powi(n), Op::Powi { a, n })
    }

    /// Elementwise `f` with caller-supplied derivative `df`.
    pub fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64 + 'static) -> Var {
        self.unary(a, f, Op::Map { a, df: Box::new(df) })
    }

    /// Reverse sweep from a scalar root. Gradients of earlier calls are discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rv = &self.nodes[root.0].value;
        if !rv.is_scalar() {
            return Err(AutodiffError::NonScalarRoot { shape: rv.shape().to_vec() });
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: impl FnOnce(&mut [f64], &[f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let mut slot = self.grads[v.0].take().unwrap_or_else(|| vec![0.0; n]);
        contrib(&mut slot, self.nodes[v.0].value.data());
        self.grads[v.0] = Some(slot);
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        // Temporarily move the op out so `self` stays mutable for accumulation.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul { a, b, batched } => self.backprop_matmul(i, *a, *b, *batched, g),
            Op::Add { a, b } => {
                self.accumulate(*a, |ga, _| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                self.accumulate(*b, |gb, _| {
                    let n = gb.len();
                    g.iter().enumerate().for_each(|(j, y)| gb[j % n] += y)
                });
            }
            Op::Sub { a, b } => {
                self.accumulate(*a, |ga, _| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                self.accumulate(*b, |gb, _| {
                    let n = gb.len();
                    g.iter().enumerate().for_each(|(j, y)| gb[j % n] -= y)
                });
            }
            Op::Mul { a, b } => {
                let bv = self.nodes[b.0].value.data().to_vec();
                let av = self.nodes[a.0].value.data().to_vec();
                let nb = bv.len();
                self.accumulate(*a, |ga, _| {
                    ga.iter_mut().enumerate().for_each(|(j, x)| *x += g[j] * bv[j % nb])
                });
                self.accumulate(*b, |gb, _| g.iter().enumerate().for_each(|(j, y)| gb[j % nb] += y * av[j]));
            }
            Op::Scale { a, c } => {
                self.accumulate(*a, |ga, _| ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y));
            }
            Op::AddScalar { a } | Op::Reshape { a } => {
                self.accumulate(*a, |ga, _| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Softmax { a } => {
                let y = self.nodes[i].value.data().to_vec();
                let width = self.nodes[i].value.last_dim();
                self.accumulate(*a, |ga, _| {
                    for ((gr, yr), dr) in ga.chunks_mut(width).zip(y.chunks(width)).zip(g.chunks(width)) {
                        let dot: f64 = yr.iter().zip(dr).map(|(p, d)| p * d).sum();
                        for j in 0..width {
                            gr[j] += yr[j] * (dr[j] - dot);
                        }
                    }
                });
            }
            Op::Log { a } => {
                self.accumulate(*a, |ga, x| ga.iter_mut().enumerate().for_each(|(j, v)| *v += g[j] / x[j]));
            }
            Op::Exp { a } => {
                let y = self.nodes[i].value.data().to_vec();
                self.accumulate(*a, |ga, _| ga.iter_mut().enumerate().for_each(|(j, v)| *v += g[j] * y[j]));
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let width = self.nodes[gain.0].value.numel();
                let gv = self.nodes[gain.0].value.data().to_vec();
                self.accumulate(*x, |gx, _| {
                    let mut dxhat = vec![0.0; width];
                    for (r, is) in inv_std.iter().enumerate() {
                        let off = r * width;
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..width {
                            dxhat[j] = g[off + j] * gv[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xhat[off + j];
                        }
                        mean_d /= width as f64;
                        mean_dx /= width as f64;
                        for j in 0..width {
                            gx[off + j] += is * (dxhat[j] - mean_d - xhat[off + j] * mean_dx);
                        }
                    }
                });
                self.accumulate(*gain, |gg, _| {
                    for (j, (d, h)) in g.iter().zip(xhat).enumerate() {
                        gg[j % width] += d * h;
                    }
                });
                self.accumulate(*bias, |gb, _| g.iter().enumerate().for_each(|(j, d)| gb[j % width] += d));
            }
            Op::Embedding { table, ids } => {
                let d = self.nodes[table.0].value.shape()[1];
                self.accumulate(*table, |gt, _| {
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g[r * d..(r + 1) * d];
                        gt[id * d..(id + 1) * d].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::MaskedFill { a, mask } => {
                let n = mask.len();
                self.accumulate(*a, |ga, _| {
                    ga.iter_mut().enumerate().filter(|(j, _)| !mask[j % n]).for_each(|(j, x)| *x += g[j])
                });
            }
            Op::Transpose { a, d1, d2 } => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                let (_, back) = swap_axes(g, &out_shape, *d1, *d2);
                self.accumulate(*a, |ga, _| ga.iter_mut().zip(&back).for_each(|(x, y)| *x += y));
            }
            Op::SumAll { a } => {
                self.accumulate(*a, |ga, _| ga.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::SumLast { a } => {
                let width = self.nodes[a.0].value.last_dim();
                self.accumulate(*a, |ga, _| {
                    ga.chunks_mut(width).zip(g).for_each(|(row, d)| row.iter_mut().for_each(|x| *x += d))
                });
            }
            Op::MeanAll { a } => {
                let n = self.nodes[a.0].value.numel() as f64;
                self.accumulate(*a, |ga, _| ga.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::Gather { a, idx } => {
                let width = self.nodes[a.0].value.last_dim();
                self.accumulate(*a, |ga, _| {
                    idx.iter().enumerate().for_each(|(r, &j)| ga[r * width + j] += g[r])
                });
            }
            Op::Relu { a } => {
                self.accumulate(*a, |ga, x| {
                    ga.iter_mut().enumerate().filter(|(j, _)| x[*j] > 0.0).for_each(|(j, v)| *v += g[j])
                });
            }
            Op::Gelu { a } => {
                self.accumulate(*a, |ga, x| {
                    ga.iter_mut().enumerate().for_each(|(j, v)| *v += g[j] * tanh_gelu(x[j]).1)
                });
            }
            Op::Clamp { a, lo, hi } => {
                self.accumulate(*a, |ga, x| {
                    ga.iter_mut()
                        .enumerate()
                        .filter(|(j, _)| x[*j] >= *lo && x[*j] <= *hi)
                        .for_each(|(j, v)| *v += g[j])
                });
            }
            Op::Powi { a, n } => {
                let n = *n;
                self.accumulate(*a, |ga, x| {
                    ga.iter_mut()
                        .enumerate()
                        .for_each(|(j, v)| *v += g[j] * n as f64 * x[j].powi(n - 1))
                });
            }
            Op::Map { a, df } => {
                self.accumulate(*a, |ga, x| ga.iter_mut().enumerate().for_each(|(j, v)| *v += g[j] * df(x[j])));
            }
        }
        self.nodes[i].op = op;
    }

    fn backprop_matmul(&mut self, _out: usize, a: Var, b: Var, batched: bool, g: &[f64]) {
        let sa = self.nodes[a.0].value.shape().to_vec();
        let sb = self.nodes[b.0].value.shape().to_vec();
        let k = *sa.last().unwrap();
        let n = *sb.last().unwrap();
        let av = self.nodes[a.0].value.data().to_vec();
        let bv = self.nodes[b.0].value.data().to_vec();
        if !batched {
            let m = av.len() / k;
            self.accumulate(a, |ga, _| gemm_nt(g, &bv, ga, m, n, k));
            self.accumulate(b, |gb, _| gemm_tn(&av, g, gb, m, k, n));
        } else {
            let m = sa[sa.len() - 2];
            let batch = av.len() / (m * k);
            self.accumulate(a, |ga, _| {
                for t in 0..batch {
                    gemm_nt(
                        &g[t * m * n..(t + 1) * m * n],
                        &bv[t * k * n..(t + 1) * k * n],
                        &mut ga[t * m * k..(t + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
            });
            self.accumulate(b, |gb, _| {
                for t in 0..batch {
                    gemm_tn(
                        &av[t * m * k..(t + 1) * m * k],
                        &g[t * m * n..(t + 1) * m * n],
                        &mut gb[t * k * n..(t + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = g.softmax(x);
        for &p in g.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_reference_values() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = g.softmax(x);
        let want = [0.09003, 0.24473, 0.66524];
        for (p, w) in g.value(y).data().iter().zip(want) {
            assert!((p - w).abs() < 5e-6, "{} vs {}", p, w);
        }
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let out = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_dimensions() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 2]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("3 vs 4"), "{}", msg);
    }

    #[test]
    fn add_rejects_non_suffix_broadcast() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(g.add(a, b), Err(AutodiffError::ShapeMismatch { op: "add", .. })));
        let c = g.constant(Tensor::zeros(&[3]));
        assert!(g.add(a, c).is_ok());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(t(&[4], &[0.3, -1.0, 2.0, 5.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(AutodiffError::NonScalarRoot { .. })));
    }

    #[test]
    fn constants_are_not_recorded() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[1.0, 2.0]));
        let y = g.exp(x);
        assert!(!g.requires_grad(y));
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn transpose_swaps_middle_axes() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let x = g.constant(t(&[2, 3, 4], &data));
        let y = g.transpose(x, 0, 2).unwrap();
        assert_eq!(g.value(y).shape(), &[4, 3, 2]);
        // y[k, j, i] == x[i, j, k]
        let yd = g.value(y).data();
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(yd[k * 6 + j * 2 + i], data[i * 12 + j * 4 + k]);
                }
            }
        }
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.5, -0.5]));
        let a = g.scale(x, 2.0);
        let b = g.scale(x, 3.0);
        let c = g.add(a, b).unwrap();
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[5.0, 5.0]);
    }
}
