use crate::error::Result;
use crate::model::params::{Init, LayoutBuilder, ParamId, ParamStore};
use crate::numerics::{AttnDims, AttnMask, Graph, Scalar, Var, LN_EPS};

/// `x · W + b` with `W` stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn build(b: &mut LayoutBuilder, name: &str, fan_in: usize, fan_out: usize, init: Init) -> Self {
        Self {
            weight: b.alloc(format!("{name}.weight"), &[fan_in, fan_out], init),
            bias: b.alloc(format!("{name}.bias"), &[fan_out], Init::Zeros),
            fan_in,
            fan_out,
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let h = g.matmul(x, w)?;
        g.add_bcast(h, b)
    }

    pub fn numel(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }
}

/// Layer norm with learned scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn build(b: &mut LayoutBuilder, name: &str, width: usize) -> Self {
        Self {
            gamma: b.alloc(format!("{name}.gamma"), &[width], Init::Ones),
            beta: b.alloc(format!("{name}.beta"), &[width], Init::Zeros),
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Multi-head attention projections. Keys and values may come from a
/// different sequence than the queries.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl AttentionParams {
    pub fn build(b: &mut LayoutBuilder, name: &str, width: usize, heads: usize, out_init: Init) -> Self {
        Self {
            q: Linear::build(b, &format!("{name}.q"), width, width, Init::Xavier),
            k: Linear::build(b, &format!("{name}.k"), width, width, Init::Xavier),
            v: Linear::build(b, &format!("{name}.v"), width, width, Init::Xavier),
            out: Linear::build(b, &format!("{name}.out"), width, width, out_init),
            heads,
        }
    }

    /// `xq` is `[batch·lq, width]`, `xkv` is `[batch·lk, width]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        xq: Var,
        xkv: Var,
        batch: usize,
        lq: usize,
        lk: usize,
        mask: &AttnMask,
    ) -> Result<Var> {
        let q = self.q.forward(g, store, xq)?;
        let k = self.k.forward(g, store, xkv)?;
        let v = self.v.forward(g, store, xkv)?;
        let width = self.q.fan_out;
        let dims = AttnDims { batch, lq, lk, heads: self.heads, head_dim: width / self.heads };
        let a = g.attention(q, k, v, dims, mask)?;
        self.out.forward(g, store, a)
    }

    pub fn numel(&self) -> usize {
        self.q.numel() + self.k.numel() + self.v.numel() + self.out.numel()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn build(b: &mut LayoutBuilder, name: &str, width: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::build(b, &format!("{name}.fc1"), width, hidden, Init::Xavier),
            fc2: Linear::build(b, &format!("{name}.fc2"), hidden, width, Init::Xavier),
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }
}

/// `h · (1 + scale) + shift`, with one `scale`/`shift` row per group of rows of `h`.
pub fn modulate<F: Scalar>(g: &mut Graph<F>, h: Var, shift: Var, scale: Var) -> Result<Var> {
    let s = g.add_scalar(scale, 1.0);
    let h = g.mul_bcast(h, s)?;
    g.add_bcast(h, shift)
}

/// Splits `[rows, chunks·width]` into `chunks` tensors of `[rows, width]`.
pub fn split_columns<F: Scalar>(g: &mut Graph<F>, x: Var, chunks: usize) -> Result<Vec<Var>> {
    let (rows, cols) = (g.value(x).rows(), g.value(x).cols());
    let width = cols / chunks;
    (0..chunks)
        .map(|c| {
            let idx = (0..rows).flat_map(|r| (0..width).map(move |i| r * cols + c * width + i)).collect();
            g.gather(x, idx, &[rows, width])
        })
        .collect()
}

/// Repeats each row of `[rows, w]` `times` times consecutively.
pub fn repeat_rows<F: Scalar>(g: &mut Graph<F>, x: Var, times: usize) -> Result<Var> {
    if times == 1 {
        return Ok(x);
    }
    let (rows, w) = (g.value(x).rows(), g.value(x).cols());
    let idx = (0..rows)
        .flat_map(|r| (0..times).flat_map(move |_| r * w..(r + 1) * w))
        .collect();
    g.gather(x, idx, &[rows * times, w])
}
