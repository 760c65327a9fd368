use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;

use crate::error::{NnError, Result};
use crate::graph::{Graph, MaskMode, Var};
use crate::params::{ParamId, ParamStore};

/// Affine map `x · Wᵀ + b` applied to each row of `x`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add_uniform(format!("{name}.weight"), out_dim, in_dim, in_dim, rng)?;
        let bias = store.add_uniform(format!("{name}.bias"), 1, out_dim, in_dim, rng)?;
        Ok(Self {
            weight,
            bias: Some(bias),
            in_dim,
            out_dim,
        })
    }

    pub fn without_bias<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add_uniform(format!("{name}.weight"), out_dim, in_dim, in_dim, rng)?;
        Ok(Self {
            weight,
            bias: None,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (rows, cols) = g.shape(x);
        if cols != self.in_dim {
            return Err(NnError::Shape {
                op: "linear",
                left: (rows, cols),
                right: (self.out_dim, self.in_dim),
            });
        }
        let w = g.param(self.weight);
        let y = g.matmul_t(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Stack of linear layers with GELU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, g: &mut Graph<'_>, mut x: Var) -> Result<Var> {
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, x)?;
            if i < last {
                x = g.gelu(x);
            }
        }
        Ok(x)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Array2::ones((1, dim)))?;
        let beta = store.add(format!("{name}.beta"), Array2::zeros((1, dim)))?;
        Ok(Self {
            gamma,
            beta,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let n = g.layer_norm_rows(x, self.eps);
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let y = g.mul_row(n, gamma)?;
        g.add_row(y, beta)
    }
}

/// Boolean visibility matrix for attention: `keep[t][s]` is true when target
/// token `t` may attend to source token `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnMask(pub Rc<Array2<bool>>);

impl AttnMask {
    pub fn new(keep: Array2<bool>) -> Self {
        Self(Rc::new(keep))
    }

    pub fn all(targets: usize, sources: usize) -> Self {
        Self::new(Array2::from_elem((targets, sources), true))
    }

    /// Every target sees the sources flagged visible.
    pub fn from_sources(targets: usize, visible: &[bool]) -> Self {
        Self::new(Array2::from_shape_fn((targets, visible.len()), |(_, s)| {
            visible[s]
        }))
    }

    /// Self-attention mask: every token sees the visible tokens and itself.
    pub fn self_with_diagonal(visible: &[bool]) -> Self {
        let n = visible.len();
        Self::new(Array2::from_shape_fn((n, n), |(t, s)| visible[s] || t == s))
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn any_visible(&self) -> bool {
        self.0.iter().any(|&b| b)
    }
}

/// Multi-head attention with bias-free query/key/value projections and an
/// output projection back to the model width.
///
/// When the model width is not divisible by the head count, each head gets
/// `ceil(width / heads)` dimensions and the output projection maps the
/// widened concatenation back.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub head_dim: usize,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        model_dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let heads = heads.max(1);
        let head_dim = model_dim.div_ceil(heads);
        let inner = head_dim * heads;
        Ok(Self {
            heads,
            head_dim,
            wq: Linear::without_bias(store, &format!("{name}.wq"), model_dim, inner, rng)?,
            wk: Linear::without_bias(store, &format!("{name}.wk"), model_dim, inner, rng)?,
            wv: Linear::without_bias(store, &format!("{name}.wv"), model_dim, inner, rng)?,
            wo: Linear::new(store, &format!("{name}.wo"), inner, model_dim, rng)?,
        })
    }

    /// Queries come from `targets`, keys and values from `sources`.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        sources: Var,
        targets: Var,
        mask: Option<&AttnMask>,
        mode: MaskMode,
    ) -> Result<Var> {
        let (t, _) = g.shape(targets);
        let (s, _) = g.shape(sources);
        if let Some(m) = mask {
            if m.dim() != (t, s) {
                return Err(NnError::Shape {
                    op: "attention mask",
                    left: (t, s),
                    right: m.dim(),
                });
            }
        }
        let q = self.wq.forward(g, targets)?;
        let k = self.wk.forward(g, sources)?;
        let v = self.wv.forward(g, sources)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let off = h * self.head_dim;
            let qh = g.slice_cols(q, off, self.head_dim)?;
            let kh = g.slice_cols(k, off, self.head_dim)?;
            let vh = g.slice_cols(v, off, self.head_dim)?;
            let scores = g.matmul_t(qh, kh)?;
            let scores = g.scale(scores, scale);
            let weights = g.softmax_rows(scores, mask.map(|m| m.0.clone()), mode)?;
            outs.push(g.matmul(weights, vh)?);
        }
        let cat = g.concat_cols(&outs)?;
        self.wo.forward(g, cat)
    }

    /// Attention weights of every head, for inspection. Shape per head `(T, S)`.
    pub fn weights(
        &self,
        g: &mut Graph<'_>,
        sources: Var,
        targets: Var,
        mask: Option<&AttnMask>,
        mode: MaskMode,
    ) -> Result<Vec<Var>> {
        let q = self.wq.forward(g, targets)?;
        let k = self.wk.forward(g, sources)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        (0..self.heads)
            .map(|h| {
                let off = h * self.head_dim;
                let qh = g.slice_cols(q, off, self.head_dim)?;
                let kh = g.slice_cols(k, off, self.head_dim)?;
                let scores = g.matmul_t(qh, kh)?;
                let scores = g.scale(scores, scale);
                g.softmax_rows(scores, mask.map(|m| m.0.clone()), mode)
            })
            .collect()
    }
}
