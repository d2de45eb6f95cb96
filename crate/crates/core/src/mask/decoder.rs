use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{config_err, dim_err, Result};
use crate::nn::{Binding, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskDecoderConfig {
    /// Number of two-way blocks.
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Channels per pixel embedding in the dot-product head.
    pub pixel_channels: usize,
    /// Add 3×3 convolution features of the raw image to the pixel embeddings.
    pub pixel_skip: bool,
}

impl Default for MaskDecoderConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            pixel_channels: 8,
            pixel_skip: true,
        }
    }
}

/// One block: query self-attention, queries→tokens, query MLP, tokens→queries.
#[derive(Clone, Debug)]
struct TwoWayBlock {
    self_attn: MultiHeadAttention,
    norm1: LayerNorm,
    to_image: MultiHeadAttention,
    norm2: LayerNorm,
    mlp: Mlp,
    norm3: LayerNorm,
    to_query: MultiHeadAttention,
    norm4: LayerNorm,
}

impl TwoWayBlock {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        cfg: &MaskDecoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let n = |s: &str| format!("{name}.{s}");
        Ok(Self {
            self_attn: MultiHeadAttention::new(store, &n("self_attn"), d, cfg.heads, rng)?,
            norm1: LayerNorm::new(store, &n("norm1"), d),
            to_image: MultiHeadAttention::new(store, &n("to_image"), d, cfg.heads, rng)?,
            norm2: LayerNorm::new(store, &n("norm2"), d),
            mlp: Mlp::new(store, &n("mlp"), d, d * cfg.mlp_ratio, rng),
            norm3: LayerNorm::new(store, &n("norm3"), d),
            to_query: MultiHeadAttention::new(store, &n("to_query"), d, cfg.heads, rng)?,
            norm4: LayerNorm::new(store, &n("norm4"), d),
        })
    }

    fn forward<'t>(
        &self,
        p: &Binding<'t>,
        q: Var<'t>,
        t: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let q = self.norm1.forward(p, q.add(self.self_attn.forward(p, q, q, q, None)?)?)?;
        let q = self.norm2.forward(p, q.add(self.to_image.forward(p, q, t, t, None)?)?)?;
        let q = self.norm3.forward(p, q.add(self.mlp.forward(p, q)?)?)?;
        let t = self.norm4.forward(p, t.add(self.to_query.forward(p, t, q, q, None)?)?)?;
        Ok((q, t))
    }
}

/// Two-way transformer over query features and image tokens, followed by a
/// per-patch pixel-embedding head modulated by a vector from the queries.
#[derive(Clone, Debug)]
pub struct MaskDecoder {
    blocks: Vec<TwoWayBlock>,
    final_attn: MultiHeadAttention,
    final_norm: LayerNorm,
    pixel: Linear,
    hyper: Mlp,
    hyper_out: Linear,
    bias: ParamId,
    skip: Option<(ParamId, ParamId)>,
    grid: (usize, usize),
    patch: usize,
    channels: usize,
    unpatch: Vec<usize>,
}

impl MaskDecoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        image_channels: usize,
        grid: (usize, usize),
        patch: usize,
        cfg: &MaskDecoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.pixel_channels == 0 || cfg.mlp_ratio == 0 || patch == 0 {
            return Err(config_err!("mask decoder sizes must be positive"));
        }
        let blocks = (0..cfg.depth)
            .map(|i| TwoWayBlock::new(store, &format!("{name}.block{i}"), dim, cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        let c = cfg.pixel_channels;
        let (gh, gw) = grid;
        let (h, w) = (gh * patch, gw * patch);
        let mut unpatch = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                let token = (y / patch) * gw + x / patch;
                let src = token * patch * patch + (y % patch) * patch + x % patch;
                unpatch.extend((0..c).map(|ch| src * c + ch));
            }
        }
        let skip = cfg.pixel_skip.then(|| {
            let std = (2.0 / (image_channels * 9) as f64).sqrt();
            (
                store.add(
                    format!("{name}.skip.kernel"),
                    Tensor::randn([c, image_channels, 3, 3], std, rng),
                ),
                store.add(format!("{name}.skip.bias"), Tensor::zeros([c])),
            )
        });
        Ok(Self {
            blocks,
            final_attn: MultiHeadAttention::new(store, &format!("{name}.final_attn"), dim, cfg.heads, rng)?,
            final_norm: LayerNorm::new(store, &format!("{name}.final_norm"), dim),
            pixel: Linear::new(store, &format!("{name}.pixel"), dim, patch * patch * c, true, rng),
            hyper: Mlp::new(store, &format!("{name}.hyper"), dim, dim, rng),
            hyper_out: Linear::new(store, &format!("{name}.hyper_out"), dim, c, true, rng),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([1])),
            skip,
            grid,
            patch,
            channels: c,
            unpatch,
        })
    }

    pub fn output_size(&self) -> (usize, usize) {
        (self.grid.0 * self.patch, self.grid.1 * self.patch)
    }

    /// `H×W` forged-pixel probabilities. `image` (`C×H×W`) feeds the pixel
    /// skip path and is ignored when that path is disabled.
    pub fn forward<'t>(
        &self,
        p: &Binding<'t>,
        queries: Var<'t>,
        image_tokens: Var<'t>,
        image: Var<'t>,
    ) -> Result<Var<'t>> {
        self.forward_logits(p, queries, image_tokens, image)?.sigmoid()
    }

    pub fn forward_logits<'t>(
        &self,
        p: &Binding<'t>,
        queries: Var<'t>,
        image_tokens: Var<'t>,
        image: Var<'t>,
    ) -> Result<Var<'t>> {
        let l = self.grid.0 * self.grid.1;
        let shape = image_tokens.shape();
        if shape.len() != 2 || shape[0] != l {
            return Err(dim_err!(
                "mask decoder expects {l} image tokens, got {shape:?}"
            ));
        }
        let (mut q, mut t) = (queries, image_tokens);
        for block in &self.blocks {
            (q, t) = block.forward(p, q, t)?;
        }
        let q = self
            .final_norm
            .forward(p, q.add(self.final_attn.forward(p, q, t, t, None)?)?)?;

        let (h, w) = self.output_size();
        let c = self.channels;
        let mut pixels = self
            .pixel
            .forward(p, t)?
            .gather(self.unpatch.clone(), &[h * w, c])?;
        if let Some((kernel, bias)) = self.skip {
            let local = image
                .conv2d(p.get(kernel), Some(p.get(bias)), 1, 1)?
                .gelu()?
                .reshape(&[c, h * w])?
                .transpose()?;
            pixels = pixels.add(local)?;
        }
        let hyper = self
            .hyper_out
            .forward(p, self.hyper.forward(p, q.mean_rows()?)?)?;
        pixels
            .matmul_t(hyper)?
            .add_row(p.get(self.bias))?
            .reshape(&[h, w])
    }
}
