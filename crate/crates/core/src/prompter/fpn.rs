use rand::Rng;
use serde::{Deserialize, Serialize};

use super::registry::{Registry, NUM_REGIONS};
use crate::autodiff::{Tape, Var};
use crate::error::{config_err, Result};
use crate::nn::{
    check_positive, Binding, LayerNorm, Linear, ParamId, ParamStore, PatchEmbed,
    SelfAttentionBlock,
};
use crate::tensor::Tensor;

/// Shape of the region prompter and its loss weighting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FpnConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Number of leading attention blocks whose output receives convolutional features.
    pub fused_layers: usize,
    pub conv_channels: usize,
    /// Weight of the negative-class BCE term.
    pub omega: f64,
    /// Add the overlap (Dice) term to the BCE.
    pub dice: bool,
}

impl Default for FpnConfig {
    fn default() -> Self {
        Self {
            image_size: 48,
            channels: 3,
            patch_size: 8,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 2,
            fused_layers: 2,
            conv_channels: 16,
            omega: 0.2,
            dice: true,
        }
    }
}

/// Kernel size, stride and padding of the two convolution-branch layers;
/// the first one also sees coordinate planes.
const CONV_LAYERS: [(usize, usize, usize); 2] = [(3, 2, 1), (5, 2, 2)];

fn conv_out(n: usize, k: usize, s: usize, p: usize) -> usize {
    (n + 2 * p).saturating_sub(k) / s + 1
}

impl FpnConfig {
    pub fn validate(&self) -> Result<()> {
        check_positive("image_size", self.image_size)?;
        check_positive("channels", self.channels)?;
        check_positive("patch_size", self.patch_size)?;
        check_positive("embed_dim", self.embed_dim)?;
        check_positive("depth", self.depth)?;
        check_positive("heads", self.heads)?;
        check_positive("mlp_ratio", self.mlp_ratio)?;
        check_positive("conv_channels", self.conv_channels)?;
        if self.image_size % self.patch_size != 0 {
            return Err(config_err!(
                "image size {} is not divisible by patch size {}",
                self.image_size,
                self.patch_size
            ));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(config_err!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim,
                self.heads
            ));
        }
        if self.fused_layers > self.depth || self.fused_layers > CONV_LAYERS.len() {
            return Err(config_err!(
                "fused_layers {} exceeds depth {} or the {} convolution layers",
                self.fused_layers,
                self.depth,
                CONV_LAYERS.len()
            ));
        }
        if !(self.omega > 0.0 && self.omega <= 1.0) {
            return Err(config_err!("omega {} outside (0, 1]", self.omega));
        }
        let grid = self.grid();
        let mut side = self.image_size;
        for (i, &(k, s, p)) in CONV_LAYERS.iter().take(self.fused_layers).enumerate() {
            side = conv_out(side, k, s, p);
            if side < grid || side % grid != 0 {
                return Err(config_err!(
                    "convolution layer {i} output {side}×{side} does not pool onto the {grid}×{grid} token grid"
                ));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }
}

#[derive(Clone, Debug)]
struct ConvLayer {
    kernel: ParamId,
    bias: ParamId,
    stride: usize,
    pad: usize,
    coord: bool,
    /// Space-to-depth gather from the `C×S×S` output onto `L×(C·f²)` token rows.
    to_tokens: Vec<usize>,
}

/// Index that moves each `f×f` block of a `c×(g·f)×(g·f)` map into one row.
fn space_to_depth(c: usize, g: usize, f: usize) -> Vec<usize> {
    let side = g * f;
    let mut index = Vec::with_capacity(c * side * side);
    for gi in 0..g {
        for gj in 0..g {
            for ch in 0..c {
                for di in 0..f {
                    for dj in 0..f {
                        index.push(ch * side * side + (gi * f + di) * side + gj * f + dj);
                    }
                }
            }
        }
    }
    index
}

/// Tape handles produced by one prompter forward pass.
pub struct FpnOutput<'t> {
    /// `1×21` pre-sigmoid region logits.
    pub logits: Var<'t>,
    /// `L×d` normalised final token features.
    pub tokens: Var<'t>,
}

/// Dual-branch region prompter: a ViT trunk whose first `fused_layers`
/// block outputs are summed with CoordConv/conv features folded onto the token grid.
#[derive(Clone, Debug)]
pub struct Fpn {
    pub cfg: FpnConfig,
    pub store: ParamStore,
    embed: PatchEmbed,
    blocks: Vec<SelfAttentionBlock>,
    convs: Vec<ConvLayer>,
    align: Vec<Linear>,
    norm: LayerNorm,
    head: Linear,
}

impl Fpn {
    pub fn new<R: Rng + ?Sized>(cfg: FpnConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let d = cfg.embed_dim;
        let embed = PatchEmbed::new(
            &mut store,
            "embed",
            (cfg.channels, cfg.image_size, cfg.image_size),
            cfg.patch_size,
            d,
            true,
            rng,
        )?;
        let blocks = (0..cfg.depth)
            .map(|i| {
                SelfAttentionBlock::new(
                    &mut store,
                    &format!("block{i}"),
                    d,
                    cfg.heads,
                    d * cfg.mlp_ratio,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mut convs = Vec::new();
        let mut align = Vec::new();
        let mut side = cfg.image_size;
        let mut cin = cfg.channels;
        let cc = cfg.conv_channels;
        for (i, &(k, stride, pad)) in CONV_LAYERS.iter().take(cfg.fused_layers).enumerate() {
            let coord = i == 0;
            let kin = if coord { cin + 2 } else { cin };
            let std = (2.0 / (kin * k * k) as f64).sqrt();
            let kernel = store.add(format!("conv{i}.kernel"), Tensor::randn([cc, kin, k, k], std, rng));
            let bias = store.add(format!("conv{i}.bias"), Tensor::zeros([cc]));
            side = conv_out(side, k, stride, pad);
            let f = side / cfg.grid();
            convs.push(ConvLayer {
                kernel,
                bias,
                stride,
                pad,
                coord,
                to_tokens: space_to_depth(cc, cfg.grid(), f),
            });
            align.push(Linear::new(&mut store, &format!("align{i}"), cc * f * f, d, false, rng));
            cin = cc;
        }
        let norm = LayerNorm::new(&mut store, "norm", d);
        let head = Linear::new(&mut store, "head", d, NUM_REGIONS, true, rng);
        Ok(Self {
            cfg,
            store,
            embed,
            blocks,
            convs,
            align,
            norm,
            head,
        })
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Binding<'t> {
        self.store.bind(tape, trainable)
    }

    pub fn forward<'t>(&self, p: &Binding<'t>, image: Var<'t>) -> Result<FpnOutput<'t>> {
        let mut g = self.embed.forward(p, image)?;
        let mut l = image;
        for (i, block) in self.blocks.iter().enumerate() {
            g = block.forward(p, g, None)?;
            if let Some(conv) = self.convs.get(i) {
                let k = p.get(conv.kernel);
                let b = Some(p.get(conv.bias));
                l = if conv.coord {
                    l.coordconv2d(k, b, conv.stride, conv.pad)?
                } else {
                    l.conv2d(k, b, conv.stride, conv.pad)?
                }
                .gelu()?;
                let width = conv.to_tokens.len() / self.cfg.tokens();
                let local = l.gather(conv.to_tokens.clone(), &[self.cfg.tokens(), width])?;
                g = g.add(self.align[i].forward(p, local)?)?;
            }
        }
        let tokens = self.norm.forward(p, g)?;
        let logits = self.head.forward(p, tokens.mean_rows()?)?;
        Ok(FpnOutput { logits, tokens })
    }

    /// Training objective for one image: BCE (+ Dice when configured) on sigmoid probabilities.
    pub fn loss<'t>(&self, out: &FpnOutput<'t>, gt: &[f64]) -> Result<Var<'t>> {
        let bce = super::loss::bce_loss_logits(out.logits, gt, self.cfg.omega)?;
        if self.cfg.dice {
            let dice = super::loss::dice_loss(out.logits.sigmoid()?, gt)?;
            super::loss::combine(bce, dice)
        } else {
            Ok(bce)
        }
    }

    /// Frozen forward: region logits and final token features.
    pub fn infer(&self, image: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let tape = Tape::new();
        let p = self.bind(&tape, false);
        let out = self.forward(&p, tape.constant(image.clone()))?;
        let logits = out.logits.value().data().to_vec();
        Ok((logits, out.tokens.to_tensor()))
    }

    pub fn head_bias(&self) -> Option<ParamId> {
        self.head.bias
    }

    pub fn head_weight(&self) -> ParamId {
        self.head.weight
    }
}

/// Regions whose probability exceeds `threshold`, in registry order; if none
/// does, the single most probable region.
pub fn predict_regions(logits: &[f64], registry: &Registry, threshold: f64) -> Vec<String> {
    predict_indices(logits, threshold)
        .into_iter()
        .map(|i| registry.name(i).to_string())
        .collect()
}

pub fn predict_indices(logits: &[f64], threshold: f64) -> Vec<usize> {
    let chosen: Vec<usize> = (0..logits.len())
        .filter(|&i| crate::autodiff::sigmoid_scalar(logits[i]) > threshold)
        .collect();
    if !chosen.is_empty() || logits.is_empty() {
        return chosen;
    }
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    vec![best]
}
