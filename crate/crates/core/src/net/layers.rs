//! Building blocks. Layers hold indices into a [`ParamStore`]; forward passes
//! take the store's bound variables.

use rand::Rng;

use super::params::{trunc_normal, ParamStore};
use crate::autodiff::{Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::slicing::{TOKENS, WINDOW};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: usize,
    pub b: Option<usize>,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), trunc_normal(rng, &[fan_in, fan_out], fan_in));
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([fan_out])));
        Self { w, b }
    }

    /// Maps the last axis.
    pub fn forward<'g, T: Scalar>(&self, p: &[Var<'g, T>], x: &Var<'g, T>) -> Result<Var<'g, T>> {
        let y = x.matmul(&p[self.w])?;
        match self.b {
            Some(b) => y.add(&p[b]),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: usize,
    pub beta: usize,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full([dim], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([dim])),
        }
    }

    pub fn forward<'g, T: Scalar>(&self, p: &[Var<'g, T>], x: &Var<'g, T>) -> Result<Var<'g, T>> {
        x.layer_norm(LN_EPS).mul(&p[self.gamma])?.add(&p[self.beta])
    }
}

/// Scaled dot-product attention over `(windows, heads, L, d)` tensors.
/// Returns the attended values and the attention weights.
pub fn attention<'g, T: Scalar>(q: &Var<'g, T>, k: &Var<'g, T>, v: &Var<'g, T>) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let d = *q.shape().last().unwrap();
    let scores = q.matmul(&k.transpose()?)?.scale(1.0 / (d as f64).sqrt());
    let probs = scores.softmax()?;
    Ok((probs.matmul(v)?, probs))
}

/// `(n, L, heads·d)` → `(n, heads, L, d)`.
pub fn split_heads<'g, T: Scalar>(x: &Var<'g, T>, heads: usize) -> Result<Var<'g, T>> {
    let s = x.shape();
    let (n, l, c) = (s[0], s[1], s[2]);
    if c % heads != 0 {
        return Err(Error::contract(format!("{c} channels do not split into {heads} heads")));
    }
    x.reshape(&[n, l, heads, c / heads])?.permute(&[0, 2, 1, 3])
}

/// Inverse of [`split_heads`].
pub fn merge_heads<'g, T: Scalar>(x: &Var<'g, T>) -> Result<Var<'g, T>> {
    let s = x.shape();
    let (n, h, l, d) = (s[0], s[1], s[2], s[3]);
    x.permute(&[0, 2, 1, 3])?.reshape(&[n, l, h * d])
}

/// Window multi-head self-attention: every patch's 64 tokens attend to each
/// other.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl WindowAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            qkv: Linear::new(store, rng, &format!("{name}.qkv"), dim, 3 * dim, true),
            proj: Linear::new(store, rng, &format!("{name}.proj"), dim, dim, true),
            heads,
        }
    }

    pub fn forward<'g, T: Scalar>(&self, p: &[Var<'g, T>], x: &Var<'g, T>) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let c = x.shape()[2];
        let qkv = self.qkv.forward(p, x)?;
        let q = split_heads(&qkv.narrow(2, 0, c)?, self.heads)?;
        let k = split_heads(&qkv.narrow(2, c, c)?, self.heads)?;
        let v = split_heads(&qkv.narrow(2, 2 * c, c)?, self.heads)?;
        let (out, probs) = attention(&q, &k, &v)?;
        Ok((self.proj.forward(p, &merge_heads(&out)?)?, probs))
    }
}

/// Feed-forward with a depthwise 3×3 stage on the 8×8 token grid.
#[derive(Clone, Debug)]
pub struct LeFF {
    pub fc1: Linear,
    pub dw: usize,
    pub dw_bias: usize,
    pub fc2: Linear,
}

impl LeFF {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, hidden, true),
            dw: store.add(format!("{name}.dw.weight"), trunc_normal(rng, &[3, 3, hidden], 9)),
            dw_bias: store.add(format!("{name}.dw.bias"), Tensor::zeros([hidden])),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, dim, true),
        }
    }

    pub fn forward<'g, T: Scalar>(&self, p: &[Var<'g, T>], x: &Var<'g, T>) -> Result<Var<'g, T>> {
        let n = x.shape()[0];
        let h = self.fc1.forward(p, x)?.gelu();
        let hidden = h.shape()[2];
        let grid = h.reshape(&[n, WINDOW, WINDOW, hidden])?;
        let local = grid.dwconv3x3(&p[self.dw])?.add(&p[self.dw_bias])?.gelu();
        self.fc2.forward(p, &local.reshape(&[n, TOKENS, hidden])?)
    }
}

/// Pre-norm transformer layer: window attention then locally-enhanced
/// feed-forward, each with a residual connection.
#[derive(Clone, Debug)]
pub struct LeWinLayer {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub ffn: LeFF,
}

impl LeWinLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_ratio: usize,
    ) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: WindowAttention::new(store, rng, &format!("{name}.attn"), dim, heads),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            ffn: LeFF::new(store, rng, &format!("{name}.ffn"), dim, dim * ffn_ratio),
        }
    }

    /// `(n, 64, c)` → `(n, 64, c)` plus the attention weights.
    pub fn forward<'g, T: Scalar>(&self, p: &[Var<'g, T>], x: &Var<'g, T>) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let (a, probs) = self.attn.forward(p, &self.norm1.forward(p, x)?)?;
        let x = x.add(&a)?;
        let f = self.ffn.forward(p, &self.norm2.forward(p, &x)?)?;
        Ok((x.add(&f)?, probs))
    }
}

/// Strided 2×2 patch merge: `(h, w, c)` → `(h/2, w/2, 2c)`.
#[derive(Clone, Debug)]
pub struct Downsample {
    pub proj: Linear,
}

impl Downsample {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, dim: usize) -> Self {
        Self {
            proj: Linear::new(store, rng, name, 4 * dim, 2 * dim, true),
        }
    }

    pub fn forward<'g, T: Scalar>(&self, p: &[Var<'g, T>], x: &Var<'g, T>) -> Result<Var<'g, T>> {
        let s = x.shape();
        let (h, w, c) = (s[0], s[1], s[2]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::contract(format!(
                "downsampling needs even dimensions, got {h}x{w}"
            )));
        }
        let merged = x
            .reshape(&[h / 2, 2, w / 2, 2, c])?
            .permute(&[0, 2, 1, 3, 4])?
            .reshape(&[h / 2, w / 2, 4 * c])?;
        self.proj.forward(p, &merged)
    }
}

/// Three affine layers with GELU between and a sigmoid at the end.
#[derive(Clone, Debug)]
pub struct Head {
    pub layers: [Linear; 3],
}

impl Head {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, dims: [usize; 4]) -> Self {
        Self {
            layers: [
                Linear::new(store, rng, &format!("{name}.0"), dims[0], dims[1], true),
                Linear::new(store, rng, &format!("{name}.1"), dims[1], dims[2], true),
                Linear::new(store, rng, &format!("{name}.2"), dims[2], dims[3], true),
            ],
        }
    }

    pub fn forward<'g, T: Scalar>(&self, p: &[Var<'g, T>], x: &Var<'g, T>) -> Result<Var<'g, T>> {
        let h = self.layers[0].forward(p, x)?.gelu();
        let h = self.layers[1].forward(p, &h)?.gelu();
        Ok(self.layers[2].forward(p, &h)?.sigmoid())
    }
}

/// Linear interpolation matrix `(n_out, n_in)` with half-pixel alignment.
pub fn interpolation_matrix<T: Scalar>(n_out: usize, n_in: usize) -> Tensor<T> {
    let mut m = vec![T::zero(); n_out * n_in];
    for i in 0..n_out {
        let src = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        let f = src - lo as f64;
        m[i * n_in + lo] += T::of(1.0 - f);
        m[i * n_in + hi] += T::of(f);
    }
    Tensor::new([n_out, n_in], m).expect("shape matches data")
}
