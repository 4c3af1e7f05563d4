//! Per-Gaussian modality fusion.
//!
//! The concatenated color and language vector `x = c ⊕ f` of width `D` is
//! treated as `D` scalar tokens. Three single-layer linear maps lift `x` to
//! `D × d_h` query, key and value matrices; the row-softmax of `Q·Kᵀ/√d_h`
//! mixes the values, and a linear output map folds the `D × d_h` result back
//! to `D` channels, added residually to `x`.
//!
//! One set of weights is shared by every Gaussian in a scene.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default attention width.
pub const DEFAULT_HEADS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    dim: usize,
    heads: usize,
    /// `(dim·heads) × dim`, row-major.
    pub wq: Vec<f64>,
    pub bq: Vec<f64>,
    pub wk: Vec<f64>,
    pub bk: Vec<f64>,
    pub wv: Vec<f64>,
    pub bv: Vec<f64>,
    /// `dim × (dim·heads)`, row-major.
    pub wout: Vec<f64>,
    pub bout: Vec<f64>,
}

impl AttentionWeights {
    pub fn zeros(dim: usize, heads: usize) -> Self {
        let e = dim * heads;
        AttentionWeights {
            dim,
            heads,
            wq: vec![0.0; e * dim],
            bq: vec![0.0; e],
            wk: vec![0.0; e * dim],
            bk: vec![0.0; e],
            wv: vec![0.0; e * dim],
            bv: vec![0.0; e],
            wout: vec![0.0; dim * e],
            bout: vec![0.0; dim],
        }
    }

    /// Q/K/V maps drawn from U(−1/√D, 1/√D); the output map starts at zero so
    /// the layer is initially the identity.
    pub fn init<R: Rng + ?Sized>(dim: usize, heads: usize, rng: &mut R) -> Self {
        let mut w = Self::zeros(dim, heads);
        let bound = 1.0 / (dim as f64).sqrt();
        for p in [
            &mut w.wq, &mut w.bq, &mut w.wk, &mut w.bk, &mut w.wv, &mut w.bv,
        ] {
            for v in p.iter_mut() {
                *v = rng.random_range(-bound..bound);
            }
        }
        w
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn named_params(&self) -> [(&'static str, &[f64]); 8] {
        [
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wout", &self.wout),
            ("bout", &self.bout),
        ]
    }

    pub fn named_params_mut(&mut self) -> [(&'static str, &mut Vec<f64>); 8] {
        [
            ("wq", &mut self.wq),
            ("bq", &mut self.bq),
            ("wk", &mut self.wk),
            ("bk", &mut self.bk),
            ("wv", &mut self.wv),
            ("bv", &mut self.bv),
            ("wout", &mut self.wout),
            ("bout", &mut self.bout),
        ]
    }

    fn check(&self) -> Result<()> {
        let e = self.dim * self.heads;
        let ok = self.heads > 0
            && self.wq.len() == e * self.dim
            && self.wk.len() == e * self.dim
            && self.wv.len() == e * self.dim
            && self.bq.len() == e
            && self.bk.len() == e
            && self.bv.len() == e
            && self.wout.len() == self.dim * e
            && self.bout.len() == self.dim;
        if ok {
            Ok(())
        } else {
            Err(Error::param("attention weights have inconsistent shapes"))
        }
    }
}

/// Which token pairs may attend to each other.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Mask {
    Full,
    /// Color tokens attend only to language tokens and vice versa.
    Cross {
        color_dim: usize,
    },
}

impl Mask {
    #[inline]
    fn allows(self, row: usize, col: usize) -> bool {
        match self {
            Mask::Full => true,
            Mask::Cross { color_dim } => (row < color_dim) != (col < color_dim),
        }
    }
}

struct AttentionCache {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `dim × dim` attention probabilities.
    attn: Vec<f64>,
    /// `dim × heads` attended values.
    mixed: Vec<f64>,
}

fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        *o = b[r] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

fn attention_forward(w: &AttentionWeights, x: &[f64], mask: Mask, u: &mut [f64]) -> AttentionCache {
    let (d, h) = (w.dim, w.heads);
    let e = d * h;
    let mut q = vec![0.0; e];
    let mut k = vec![0.0; e];
    let mut v = vec![0.0; e];
    affine(&w.wq, &w.bq, x, &mut q);
    affine(&w.wk, &w.bk, x, &mut k);
    affine(&w.wv, &w.bv, x, &mut v);

    let scale = 1.0 / (h as f64).sqrt();
    let mut attn = vec![0.0; d * d];
    for r in 0..d {
        let row = &mut attn[r * d..(r + 1) * d];
        let mut max = f64::NEG_INFINITY;
        for (c, s) in row.iter_mut().enumerate() {
            if mask.allows(r, c) {
                *s = scale
                    * q[r * h..(r + 1) * h]
                        .iter()
                        .zip(&k[c * h..(c + 1) * h])
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
                max = max.max(*s);
            }
        }
        let mut total = 0.0;
        for (c, s) in row.iter_mut().enumerate() {
            if mask.allows(r, c) {
                *s = (*s - max).exp();
                total += *s;
            } else {
                *s = 0.0;
            }
        }
        for s in row.iter_mut() {
            *s /= total;
        }
    }

    let mut mixed = vec![0.0; e];
    for r in 0..d {
        for c in 0..d {
            let a = attn[r * d + c];
            if a != 0.0 {
                for j in 0..h {
                    mixed[r * h + j] += a * v[c * h + j];
                }
            }
        }
    }

    affine(&w.wout, &w.bout, &mixed, u);
    for (ui, xi) in u.iter_mut().zip(x) {
        *ui += xi;
    }
    AttentionCache {
        q,
        k,
        v,
        attn,
        mixed,
    }
}

/// Accumulates weight gradients into `grad` and input gradients into `dx`.
fn attention_backward(
    w: &AttentionWeights,
    x: &[f64],
    mask: Mask,
    du: &[f64],
    grad: &mut AttentionWeights,
    dx: &mut [f64],
) {
    let (d, h) = (w.dim, w.heads);
    let e = d * h;
    let mut scratch = vec![0.0; d];
    let cache = attention_forward(w, x, mask, &mut scratch);

    for (dxi, g) in dx.iter_mut().zip(du) {
        *dxi += g;
    }
    // u = x + Wout·mixed + bout
    let mut d_mixed = vec![0.0; e];
    for r in 0..d {
        let g = du[r];
        if g == 0.0 {
            continue;
        }
        grad.bout[r] += g;
        for j in 0..e {
            grad.wout[r * e + j] += g * cache.mixed[j];
            d_mixed[j] += g * w.wout[r * e + j];
        }
    }
    // mixed = A·V
    let mut d_attn = vec![0.0; d * d];
    let mut dv = vec![0.0; e];
    for r in 0..d {
        for c in 0..d {
            let mut s = 0.0;
            for j in 0..h {
                s += d_mixed[r * h + j] * cache.v[c * h + j];
                dv[c * h + j] += cache.attn[r * d + c] * d_mixed[r * h + j];
            }
            d_attn[r * d + c] = s;
        }
    }
    // softmax rows, then the 1/√h scaled score
    let scale = 1.0 / (h as f64).sqrt();
    let mut dq = vec![0.0; e];
    let mut dk = vec![0.0; e];
    for r in 0..d {
        let row = &cache.attn[r * d..(r + 1) * d];
        let drow = &d_attn[r * d..(r + 1) * d];
        let inner: f64 = row.iter().zip(drow).map(|(a, b)| a * b).sum();
        for c in 0..d {
            if !mask.allows(r, c) {
                continue;
            }
            let ds = row[c] * (drow[c] - inner) * scale;
            for j in 0..h {
                dq[r * h + j] += ds * cache.k[c * h + j];
                dk[c * h + j] += ds * cache.q[r * h + j];
            }
        }
    }
    for (dy, wm, gw, gb) in [
        (&dq, &w.wq, &mut grad.wq, &mut grad.bq),
        (&dk, &w.wk, &mut grad.wk, &mut grad.bk),
        (&dv, &w.wv, &mut grad.wv, &mut grad.bv),
    ] {
        for r in 0..e {
            let g = dy[r];
            if g == 0.0 {
                continue;
            }
            gb[r] += g;
            for c in 0..d {
                gw[r * d + c] += g * x[c];
                dx[c] += g * wm[r * d + c];
            }
        }
    }
}

fn concat_checked(c: &[f64], f: &[f64], w: &AttentionWeights) -> Result<Vec<f64>> {
    w.check()?;
    if c.len() + f.len() != w.dim {
        return Err(Error::param(format!(
            "fusion input width {} + {} does not match attention dimension {}",
            c.len(),
            f.len(),
            w.dim
        )));
    }
    let mut x = Vec::with_capacity(w.dim);
    x.extend_from_slice(c);
    x.extend_from_slice(f);
    Ok(x)
}

/// Self-attention fusion of one Gaussian's color `c` and feature `f`.
pub fn fuse(c: &[f64], f: &[f64], w: &AttentionWeights) -> Result<Vec<f64>> {
    let x = concat_checked(c, f, w)?;
    let mut u = vec![0.0; w.dim];
    attention_forward(w, &x, Mask::Full, &mut u);
    Ok(u)
}

/// Gradients of `⟨du, fuse(c, f, w)⟩` w.r.t. `c`, `f` and `w`.
pub fn fuse_backward(
    c: &[f64],
    f: &[f64],
    w: &AttentionWeights,
    du: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, AttentionWeights)> {
    let x = concat_checked(c, f, w)?;
    if du.len() != w.dim {
        return Err(Error::param("upstream gradient width mismatch"));
    }
    let mut grad = AttentionWeights::zeros(w.dim, w.heads);
    let mut dx = vec![0.0; w.dim];
    attention_backward(w, &x, Mask::Full, du, &mut grad, &mut dx);
    let df = dx.split_off(c.len());
    Ok((dx, df, grad))
}

/// Residual single linear layer `u = x + W·x + b`, zero-initialized.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearFusion {
    dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearFusion {
    pub fn zeros(dim: usize) -> Self {
        LinearFusion {
            dim,
            weight: vec![0.0; dim * dim],
            bias: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Fusion variants selectable for training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    None,
    #[serde(rename = "self")]
    SelfAttention,
    #[serde(rename = "cross")]
    CrossAttention,
    #[serde(rename = "mlp1")]
    Mlp,
}

impl FusionKind {
    pub fn name(self) -> &'static str {
        match self {
            FusionKind::None => "none",
            FusionKind::SelfAttention => "self",
            FusionKind::CrossAttention => "cross",
            FusionKind::Mlp => "mlp1",
        }
    }
}

impl std::str::FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FusionKind::None),
            "self" => Ok(FusionKind::SelfAttention),
            "cross" | "cross-attn" => Ok(FusionKind::CrossAttention),
            "mlp1" | "mlp" => Ok(FusionKind::Mlp),
            other => Err(Error::param(format!("unknown fusion mode '{other}'"))),
        }
    }
}

/// Scene-global fusion layer.
#[derive(Clone, Debug, PartialEq)]
pub enum Fusion {
    Identity {
        dim: usize,
    },
    SelfAttention(AttentionWeights),
    CrossAttention {
        weights: AttentionWeights,
        color_dim: usize,
    },
    Mlp(LinearFusion),
}

impl Fusion {
    pub fn new<R: Rng + ?Sized>(
        kind: FusionKind,
        color_dim: usize,
        feature_dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        let dim = color_dim + feature_dim;
        match kind {
            FusionKind::None => Fusion::Identity { dim },
            FusionKind::SelfAttention => {
                Fusion::SelfAttention(AttentionWeights::init(dim, heads, rng))
            }
            FusionKind::CrossAttention => Fusion::CrossAttention {
                weights: AttentionWeights::init(dim, heads, rng),
                color_dim,
            },
            FusionKind::Mlp => Fusion::Mlp(LinearFusion::zeros(dim)),
        }
    }

    pub fn kind(&self) -> FusionKind {
        match self {
            Fusion::Identity { .. } => FusionKind::None,
            Fusion::SelfAttention(_) => FusionKind::SelfAttention,
            Fusion::CrossAttention { .. } => FusionKind::CrossAttention,
            Fusion::Mlp(_) => FusionKind::Mlp,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Fusion::Identity { dim } => *dim,
            Fusion::SelfAttention(w) | Fusion::CrossAttention { weights: w, .. } => w.dim,
            Fusion::Mlp(l) => l.dim,
        }
    }

    /// Attention width, or 0 for variants without attention.
    pub fn heads(&self) -> usize {
        match self {
            Fusion::SelfAttention(w) | Fusion::CrossAttention { weights: w, .. } => w.heads,
            _ => 0,
        }
    }

    /// Gradient buffer with the same layout.
    pub fn zeros_like(&self) -> Self {
        match self {
            Fusion::Identity { dim } => Fusion::Identity { dim: *dim },
            Fusion::SelfAttention(w) => {
                Fusion::SelfAttention(AttentionWeights::zeros(w.dim, w.heads))
            }
            Fusion::CrossAttention { weights, color_dim } => Fusion::CrossAttention {
                weights: AttentionWeights::zeros(weights.dim, weights.heads),
                color_dim: *color_dim,
            },
            Fusion::Mlp(l) => Fusion::Mlp(LinearFusion::zeros(l.dim)),
        }
    }

    pub fn forward(&self, x: &[f64], u: &mut [f64]) {
        match self {
            Fusion::Identity { .. } => u.copy_from_slice(x),
            Fusion::SelfAttention(w) => {
                attention_forward(w, x, Mask::Full, u);
            }
            Fusion::CrossAttention { weights, color_dim } => {
                attention_forward(
                    weights,
                    x,
                    Mask::Cross {
                        color_dim: *color_dim,
                    },
                    u,
                );
            }
            Fusion::Mlp(l) => {
                affine(&l.weight, &l.bias, x, u);
                for (ui, xi) in u.iter_mut().zip(x) {
                    *ui += xi;
                }
            }
        }
    }

    /// Accumulate gradients of `⟨du, forward(x)⟩` into `grad` (same variant) and `dx`.
    pub fn backward(&self, x: &[f64], du: &[f64], grad: &mut Fusion, dx: &mut [f64]) {
        match (self, grad) {
            (Fusion::Identity { .. }, Fusion::Identity { .. }) => {
                for (d, g) in dx.iter_mut().zip(du) {
                    *d += g;
                }
            }
            (Fusion::SelfAttention(w), Fusion::SelfAttention(g)) => {
                attention_backward(w, x, Mask::Full, du, g, dx)
            }
            (
                Fusion::CrossAttention { weights, color_dim },
                Fusion::CrossAttention { weights: g, .. },
            ) => attention_backward(
                weights,
                x,
                Mask::Cross {
                    color_dim: *color_dim,
                },
                du,
                g,
                dx,
            ),
            (Fusion::Mlp(l), Fusion::Mlp(g)) => {
                let d = l.dim;
                for r in 0..d {
                    let gr = du[r];
                    dx[r] += gr;
                    if gr == 0.0 {
                        continue;
                    }
                    g.bias[r] += gr;
                    for c in 0..d {
                        g.weight[r * d + c] += gr * x[c];
                        dx[c] += gr * l.weight[r * d + c];
                    }
                }
            }
            _ => panic!("fusion gradient buffer variant mismatch"),
        }
    }

    pub fn named_params(&self) -> Vec<(&'static str, &[f64])> {
        match self {
            Fusion::Identity { .. } => Vec::new(),
            Fusion::SelfAttention(w) | Fusion::CrossAttention { weights: w, .. } => {
                w.named_params().to_vec()
            }
            Fusion::Mlp(l) => vec![("weight", &l.weight[..]), ("bias", &l.bias[..])],
        }
    }

    pub fn named_params_mut(&mut self) -> Vec<(&'static str, &mut Vec<f64>)> {
        match self {
            Fusion::Identity { .. } => Vec::new(),
            Fusion::SelfAttention(w) | Fusion::CrossAttention { weights: w, .. } => {
                w.named_params_mut().into_iter().collect()
            }
            Fusion::Mlp(l) => vec![("weight", &mut l.weight), ("bias", &mut l.bias)],
        }
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }

    /// Zero-parameter layout for `kind`, to be filled by a loader.
    pub fn empty(kind: FusionKind, color_dim: usize, feature_dim: usize, heads: usize) -> Self {
        let dim = color_dim + feature_dim;
        match kind {
            FusionKind::None => Fusion::Identity { dim },
            FusionKind::SelfAttention => Fusion::SelfAttention(AttentionWeights::zeros(dim, heads)),
            FusionKind::CrossAttention => Fusion::CrossAttention {
                weights: AttentionWeights::zeros(dim, heads),
                color_dim,
            },
            FusionKind::Mlp => Fusion::Mlp(LinearFusion::zeros(dim)),
        }
    }
}
