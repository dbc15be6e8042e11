//! Reverse-mode differentiation over a recorded tape.
//!
//! Forward ops evaluate eagerly and append a node; `backward` walks the tape
//! in reverse. Tensors are viewed as `[rows, cols]` where `cols` is the last
//! extent, which is all the model needs.

use std::collections::HashMap;

use crate::error::{shape_err, Error, Result};
use crate::model::params::{ParamId, ParamStore};
use crate::numerics::kernels::{self, AttnDims, AttnMask};
use crate::numerics::{Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<F: Scalar> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBcast { x: Var, y: Var, groups: usize },
    MulBcast { x: Var, y: Var, groups: usize },
    Scale(Var, F),
    AddScalar(Var),
    Gelu(Var),
    Silu(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Normalize { x: Var, inv_std: Vec<F> },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    Attention { q: Var, k: Var, v: Var, dims: AttnDims, probs: Vec<F> },
    Gather { x: Var, index: Vec<usize> },
    Concat(Vec<Var>),
    Reshape(Var),
}

#[derive(Debug)]
struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<F: Scalar = f32> {
    nodes: Vec<Node<F>>,
    params: HashMap<ParamId, Var>,
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite forward value");
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Parameter leaf; repeated calls for the same id return the same node.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let mut t = store.get(id).clone();
        t.clear_grad();
        let v = self.variable(t);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || sa.len() < 2 {
            return Err(shape_err(format!("matmul of {sa:?} and {sb:?}")));
        }
        let k = *sa.last().unwrap();
        if k != sb[0] {
            return Err(shape_err(format!("matmul inner dims: {sa:?} × {sb:?}")));
        }
        let (m, n) = (self.value(a).rows(), sb[1]);
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul { a, b, m, k, n }, ng))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F, op: Op<F>) -> Result<Var> {
        let out = self.value(a).zip_with(self.value(b), f)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn bcast_groups(&self, x: Var, y: Var) -> Result<usize> {
        let (tx, ty) = (self.value(x), self.value(y));
        if tx.cols() != ty.cols() || tx.rows() % ty.rows() != 0 {
            return Err(shape_err(format!(
                "cannot broadcast {:?} over {:?}",
                ty.shape(),
                tx.shape()
            )));
        }
        Ok(ty.rows())
    }

    /// `x[G·r, w] + y[G, w]`: row `g` of `y` is added to the `g`-th block of
    /// `r` consecutive rows of `x`. A bias is the `G = 1` case.
    pub fn add_bcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let groups = self.bcast_groups(x, y)?;
        let out = bcast_apply(self.value(x), self.value(y), groups, |a, b| a + b);
        let ng = self.needs(x) || self.needs(y);
        Ok(self.push(out, Op::AddBcast { x, y, groups }, ng))
    }

    /// Grouped broadcast product, same layout as [`Graph::add_bcast`].
    pub fn mul_bcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let groups = self.bcast_groups(x, y)?;
        let out = bcast_apply(self.value(x), self.value(y), groups, |a, b| a * b);
        let ng = self.needs(x) || self.needs(y);
        Ok(self.push(out, Op::MulBcast { x, y, groups }, ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = F::of(s);
        let out = self.value(x).map(|v| v * s);
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, s), ng)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let s = F::of(s);
        let out = self.value(x).map(|v| v + s);
        let ng = self.needs(x);
        self.push(out, Op::AddScalar(x), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::gelu);
        let ng = self.needs(x);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::silu);
        let ng = self.needs(x);
        self.push(out, Op::Silu(x), ng)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        let ng = self.needs(x);
        self.push(out, Op::Square(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<F>();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<F>() / F::of(t.numel() as f64);
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Mean squared error between two same-shape tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Normalizes each row over the last axis (no affine part).
    pub fn normalize(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let (out, inv_std) = kernels::normalize_rows(t.data(), t.cols(), eps);
        let out = Tensor::new(t.shape(), out).unwrap();
        let ng = self.needs(x);
        self.push(out, Op::Normalize { x, inv_std }, ng)
    }

    /// `normalize(x) · gamma + beta` with gamma and beta over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(gamma).numel() != cols || self.value(beta).numel() != cols {
            return Err(shape_err("layer_norm affine parameters must match the last axis"));
        }
        let h = self.normalize(x, eps);
        let h = self.mul_bcast(h, gamma)?;
        self.add_bcast(h, beta)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, len, inner) = axis_split(t.shape(), axis)?;
        let out = Tensor::new(t.shape(), kernels::softmax(t.data(), outer, len, inner))?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Softmax { x, outer, len, inner }, ng))
    }

    /// Scaled dot-product attention, see [`kernels::attention`] for layout.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, dims: AttnDims, mask: &AttnMask) -> Result<Var> {
        let w = dims.width();
        let expect_q = [dims.batch * dims.lq, w];
        let expect_kv = [dims.batch * dims.lk, w];
        for (var, expect) in [(q, expect_q), (k, expect_kv), (v, expect_kv)] {
            let t = self.value(var);
            if t.rows() != expect[0] || t.cols() != expect[1] {
                return Err(shape_err(format!(
                    "attention operand {:?} does not match {expect:?}",
                    t.shape()
                )));
            }
        }
        validate_mask(mask, dims)?;
        let (out, probs) = kernels::attention(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            dims,
            mask,
        );
        let out = Tensor::new(&expect_q, out)?;
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(out, Op::Attention { q, k, v, dims, probs }, ng))
    }

    /// `out[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::OutOfRange { index: bad, limit: src.len() });
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let out = Tensor::new(shape, data)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Gather { x, index }, ng))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<F>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_leading(&tensors)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.needs(loss) {
            grads[loss.0] = Some(vec![F::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads, params: self.params.iter().map(|(&id, &v)| (v, id)).collect() })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<F>>], v: Var, delta: Vec<F>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(&delta).for_each(|(a, &b)| *a += b),
            slot => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.needs(a) {
                    let bt = kernels::transpose(val(b), k, n);
                    self.accumulate(grads, a, kernels::matmul(g, &bt, m, n, k));
                }
                if self.needs(b) {
                    let at = kernels::transpose(val(a), m, k);
                    self.accumulate(grads, b, kernels::matmul(&at, g, k, m, n));
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.to_vec());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.iter().map(|&x| -x).collect());
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (val(a), val(b));
                self.accumulate(grads, a, g.iter().zip(vb).map(|(&x, &y)| x * y).collect());
                self.accumulate(grads, b, g.iter().zip(va).map(|(&x, &y)| x * y).collect());
            }
            &Op::AddBcast { x, y, groups } => {
                self.accumulate(grads, x, g.to_vec());
                if self.needs(y) {
                    let cols = self.nodes[y.0].value.cols();
                    let dy = bcast_reduce(g, None, groups, cols);
                    self.accumulate(grads, y, dy);
                }
            }
            &Op::MulBcast { x, y, groups } => {
                let cols = self.nodes[y.0].value.cols();
                if self.needs(x) {
                    let yb = bcast_expand(val(y), g.len(), groups, cols);
                    self.accumulate(grads, x, g.iter().zip(&yb).map(|(&a, &b)| a * b).collect());
                }
                if self.needs(y) {
                    let dy = bcast_reduce(g, Some(val(x)), groups, cols);
                    self.accumulate(grads, y, dy);
                }
            }
            &Op::Scale(x, s) => self.accumulate(grads, x, g.iter().map(|&v| v * s).collect()),
            &Op::AddScalar(x) | &Op::Reshape(x) => self.accumulate(grads, x, g.to_vec()),
            &Op::Gelu(x) => {
                let d = g.iter().zip(val(x)).map(|(&a, &b)| a * kernels::gelu_grad(b)).collect();
                self.accumulate(grads, x, d);
            }
            &Op::Silu(x) => {
                let d = g.iter().zip(val(x)).map(|(&a, &b)| a * kernels::silu_grad(b)).collect();
                self.accumulate(grads, x, d);
            }
            &Op::Square(x) => {
                let two = F::of(2.0);
                let d = g.iter().zip(val(x)).map(|(&a, &b)| two * a * b).collect();
                self.accumulate(grads, x, d);
            }
            &Op::Sum(x) => {
                let n = self.nodes[x.0].value.numel();
                self.accumulate(grads, x, vec![g[0]; n]);
            }
            &Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel();
                self.accumulate(grads, x, vec![g[0] / F::of(n as f64); n]);
            }
            Op::Normalize { x, inv_std } => {
                let y = node.value.data();
                let d = kernels::normalize_rows_backward(y, inv_std, g, node.value.cols());
                self.accumulate(grads, *x, d);
            }
            &Op::Softmax { x, outer, len, inner } => {
                let y = node.value.data();
                let mut d = vec![F::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot = (0..len).map(|j| y[at(j)] * g[at(j)]).sum::<F>();
                        for j in 0..len {
                            d[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                self.accumulate(grads, x, d);
            }
            Op::Attention { q, k, v, dims, probs } => {
                let (dq, dk, dv) =
                    kernels::attention_backward(val(*q), val(*k), val(*v), probs, g, *dims);
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::Gather { x, index } => {
                if self.needs(*x) {
                    let mut d = vec![F::zero(); self.nodes[x.0].value.numel()];
                    for (&i, &gv) in index.iter().zip(g) {
                        d[i] += gv;
                    }
                    self.accumulate(grads, *x, d);
                }
            }
            Op::Concat(parts) => {
                let mut at = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.numel();
                    self.accumulate(grads, p, g[at..at + n].to_vec());
                    at += n;
                }
            }
        }
    }
}

/// Result of [`Graph::backward`]: gradients of every leaf that needed one.
#[derive(Debug)]
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<Vec<F>>>,
    params: Vec<(Var, ParamId)>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of a leaf, `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads[v.0].as_deref()
    }

    /// Accumulates parameter gradients into the store's grad slots.
    /// Parameters that were registered but are unreachable from the loss
    /// receive an explicit zero gradient.
    pub fn write_params(&self, store: &mut ParamStore<F>) {
        for &(v, id) in &self.params {
            let t = store.get_mut(id);
            match self.grads[v.0].as_deref() {
                Some(g) => t.accumulate_grad(g),
                None => {
                    if t.grad().is_none() {
                        t.zero_grad();
                    }
                }
            }
        }
    }
}

fn bcast_apply<F: Scalar>(x: &Tensor<F>, y: &Tensor<F>, groups: usize, f: impl Fn(F, F) -> F) -> Tensor<F> {
    let cols = x.cols();
    let per = x.rows() / groups;
    let yd = y.data();
    let data = x
        .data()
        .chunks(cols)
        .enumerate()
        .flat_map(|(r, row)| {
            let yr = &yd[(r / per) * cols..][..cols];
            row.iter().zip(yr).map(|(&a, &b)| f(a, b)).collect::<Vec<_>>()
        })
        .collect();
    Tensor::new(x.shape(), data).unwrap()
}

fn bcast_expand<F: Scalar>(y: &[F], total: usize, groups: usize, cols: usize) -> Vec<F> {
    let per = total / cols / groups;
    let mut out = Vec::with_capacity(total);
    for gi in 0..groups {
        for _ in 0..per {
            out.extend_from_slice(&y[gi * cols..(gi + 1) * cols]);
        }
    }
    out
}

fn bcast_reduce<F: Scalar>(g: &[F], x: Option<&[F]>, groups: usize, cols: usize) -> Vec<F> {
    let per = g.len() / cols / groups;
    let mut out = vec![F::zero(); groups * cols];
    for (r, row) in g.chunks(cols).enumerate() {
        let acc = &mut out[(r / per) * cols..][..cols];
        match x {
            Some(x) => {
                let xr = &x[r * cols..][..cols];
                for ((a, &gv), &xv) in acc.iter_mut().zip(row).zip(xr) {
                    *a += gv * xv;
                }
            }
            None => acc.iter_mut().zip(row).for_each(|(a, &gv)| *a += gv),
        }
    }
    out
}

pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(shape_err(format!("axis {axis} out of range for {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub(crate) fn validate_mask(mask: &AttnMask, d: AttnDims) -> Result<()> {
    match mask {
        AttnMask::None => Ok(()),
        AttnMask::Shared(m) => {
            if m.len() != d.lq * d.lk {
                return Err(shape_err(format!(
                    "mask has {} entries, expected {}×{}",
                    m.len(),
                    d.lq,
                    d.lk
                )));
            }
            match m.chunks(d.lk).position(|row| !row.iter().any(|&b| b)) {
                Some(row) => Err(Error::FullyMasked { row }),
                None => Ok(()),
            }
        }
        AttnMask::KeyLengths(l) => {
            if l.len() != d.batch {
                return Err(shape_err("key-length mask needs one entry per batch element"));
            }
            if let Some(b) = l.iter().position(|&n| n == 0) {
                return Err(Error::FullyMasked { row: b });
            }
            if let Some(&n) = l.iter().find(|&&n| n > d.lk) {
                return Err(Error::OutOfRange { index: n, limit: d.lk });
            }
            Ok(())
        }
    }
}
