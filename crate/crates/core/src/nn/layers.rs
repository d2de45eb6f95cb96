use rand::Rng;

use super::{Binding, ParamId, ParamStore};
use crate::autodiff::Var;
use crate::error::{config_err, dim_err, Result};
use crate::tensor::Tensor;

/// Affine map `x·W + b` applied to every row.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::randn([in_dim, out_dim], std, rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([out_dim])));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t>(&self, p: &Binding<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(p.get(self.weight))?;
        match self.bias {
            Some(b) => y.add_row(p.get(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones([dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([dim])),
        }
    }

    pub fn forward<'t>(&self, p: &Binding<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(p.get(self.gamma), p.get(self.beta))
    }
}

/// Scaled dot-product attention split over `heads` column blocks.
///
/// `q` is `Lq×d`, `k` and `v` are `Lk×d`; `mask`, when given, is an
/// additive `Lq×Lk` score offset shared by all heads. Returns the heads
/// concatenated back to `Lq×d`.
pub fn attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    heads: usize,
    mask: Option<&Tensor>,
) -> Result<Var<'t>> {
    let (_, d) = q.value().dims2()?;
    let (lk, dk) = k.value().dims2()?;
    if dk != d || v.value().dims2()? != (lk, d) {
        return Err(dim_err!(
            "attention: q {:?}, k {:?}, v {:?} do not line up",
            q.shape(),
            k.shape(),
            v.shape()
        ));
    }
    if heads == 0 || d % heads != 0 {
        return Err(config_err!(
            "embedding width {d} is not divisible by {heads} heads"
        ));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mask = mask.map(|m| q.tape().constant(m.clone()));
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                q.narrow_cols(h * dh, dh)?,
                k.narrow_cols(h * dh, dh)?,
                v.narrow_cols(h * dh, dh)?,
            )
        };
        let mut scores = qh.matmul_t(kh)?.scale(scale)?;
        if let Some(m) = mask {
            scores = scores.add(m)?;
        }
        outs.push(scores.softmax()?.matmul(vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        Var::concat_cols(&outs)
    }
}

/// Multi-head attention with bias-free query, key, value and output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(config_err!(
                "{name}: embedding width {dim} is not divisible by {heads} heads"
            ));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, false, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, false, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, false, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, false, rng),
            heads,
        })
    }

    pub fn forward<'t>(
        &self,
        p: &Binding<'t>,
        query: Var<'t>,
        key: Var<'t>,
        value: Var<'t>,
        mask: Option<&Tensor>,
    ) -> Result<Var<'t>> {
        let q = self.q.forward(p, query)?;
        let k = self.k.forward(p, key)?;
        let v = self.v.forward(p, value)?;
        let ctx = attention(q, k, v, self.heads, mask)?;
        self.o.forward(p, ctx)
    }

    /// Per-head attention weight matrices, for inspection.
    pub fn weights<'t>(
        &self,
        p: &Binding<'t>,
        query: Var<'t>,
        key: Var<'t>,
    ) -> Result<Vec<Tensor>> {
        let q = self.q.forward(p, query)?;
        let k = self.k.forward(p, key)?;
        let d = self.q.out_dim;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        (0..self.heads)
            .map(|h| {
                let qh = q.narrow_cols(h * dh, dh)?;
                let kh = k.narrow_cols(h * dh, dh)?;
                Ok(qh.matmul_t(kh)?.scale(scale)?.softmax()?.to_tensor())
            })
            .collect()
    }
}

/// Two-layer GELU feed-forward.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true, rng),
        }
    }

    pub fn forward<'t>(&self, p: &Binding<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.fc2.forward(p, self.fc1.forward(p, x)?.gelu()?)
    }
}

/// Pre-norm transformer block: `x + MHA(LN x)` then `x + MLP(LN x)`.
#[derive(Clone, Debug)]
pub struct SelfAttentionBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl SelfAttentionBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, mlp_hidden, rng),
        })
    }

    pub fn forward<'t>(
        &self,
        p: &Binding<'t>,
        x: Var<'t>,
        mask: Option<&Tensor>,
    ) -> Result<Var<'t>> {
        let h = self.norm1.forward(p, x)?;
        let x = x.add(self.attn.forward(p, h, h, h, mask)?)?;
        let h = self.norm2.forward(p, x)?;
        x.add(self.mlp.forward(p, h)?)
    }
}

/// Splits a `C×H×W` image into non-overlapping `p×p` patches, projects each
/// to `dim`, and optionally adds a learned positional embedding.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub pos: Option<ParamId>,
    pub grid: (usize, usize),
    pub patch: usize,
    pub channels: usize,
    index: Vec<usize>,
}

impl PatchEmbed {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        (channels, height, width): (usize, usize, usize),
        patch: usize,
        dim: usize,
        positional: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if patch == 0 || height % patch != 0 || width % patch != 0 {
            return Err(config_err!(
                "{height}×{width} image is not divisible into {patch}×{patch} patches"
            ));
        }
        let (gh, gw) = (height / patch, width / patch);
        let mut index = Vec::with_capacity(gh * gw * channels * patch * patch);
        for gi in 0..gh {
            for gj in 0..gw {
                for c in 0..channels {
                    for di in 0..patch {
                        for dj in 0..patch {
                            index.push(
                                c * height * width + (gi * patch + di) * width + gj * patch + dj,
                            );
                        }
                    }
                }
            }
        }
        let feat = channels * patch * patch;
        let proj = Linear::new(store, &format!("{name}.proj"), feat, dim, true, rng);
        let pos = positional
            .then(|| store.add(format!("{name}.pos"), Tensor::randn([gh * gw, dim], 0.02, rng)));
        Ok(Self {
            proj,
            pos,
            grid: (gh, gw),
            patch,
            channels,
            index,
        })
    }

    pub fn tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// `C×H×W` image to `L×dim` tokens, row-major over the patch grid.
    pub fn forward<'t>(&self, p: &Binding<'t>, image: Var<'t>) -> Result<Var<'t>> {
        let expected = self.index.len();
        if image.numel() != expected {
            return Err(dim_err!(
                "patch embedding expects {expected} image values, got shape {:?}",
                image.shape()
            ));
        }
        let feat = self.channels * self.patch * self.patch;
        let patches = image.gather(self.index.clone(), &[self.tokens(), feat])?;
        let x = self.proj.forward(p, patches)?;
        match self.pos {
            Some(pos) => x.add(p.get(pos)),
            None => Ok(x),
        }
    }
}
