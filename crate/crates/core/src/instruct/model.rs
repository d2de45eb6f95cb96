use rand::Rng;
use serde::{Deserialize, Serialize};

use super::text::{Vocab, BOS, EOS, PAD, UNK};
use crate::autodiff::{Tape, Var, NEG_MASK};
use crate::error::{config_err, contract_err, dim_err, Result};
use crate::mask::{mask_loss_logits, MaskDecoder, MaskDecoderConfig, MaskGrid};
use crate::nn::{
    check_positive, expect_rows, Binding, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamId,
    ParamStore, PatchEmbed, SelfAttentionBlock,
};
use crate::tensor::Tensor;

/// Sizes of the query-token fusion module and the caption decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QFormerConfig {
    pub num_query_tokens: usize,
    pub embed_dim: usize,
    pub heads: usize,
    /// Fusion blocks.
    pub depth: usize,
    pub decoder_depth: usize,
    pub mlp_ratio: usize,
    /// Longest token sequence for captions and instructions (`K`).
    pub max_len: usize,
    /// Self-attention blocks of the stage-2 image encoder.
    pub encoder_depth: usize,
}

impl Default for QFormerConfig {
    fn default() -> Self {
        Self {
            num_query_tokens: 4,
            embed_dim: 64,
            heads: 4,
            depth: 2,
            decoder_depth: 2,
            mlp_ratio: 2,
            max_len: 160,
            encoder_depth: 1,
        }
    }
}

impl QFormerConfig {
    pub fn validate(&self) -> Result<()> {
        check_positive("num_query_tokens", self.num_query_tokens)?;
        check_positive("embed_dim", self.embed_dim)?;
        check_positive("heads", self.heads)?;
        check_positive("depth", self.depth)?;
        check_positive("decoder_depth", self.decoder_depth)?;
        check_positive("mlp_ratio", self.mlp_ratio)?;
        check_positive("max_len", self.max_len)?;
        if self.embed_dim % self.heads != 0 {
            return Err(config_err!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim,
                self.heads
            ));
        }
        Ok(())
    }
}

/// Rows `start..start + len` of an `L×d` matrix.
fn rows<'t>(x: Var<'t>, start: usize, len: usize) -> Result<Var<'t>> {
    let d = *x.shape().last().unwrap_or(&0);
    x.gather((start * d..(start + len) * d).collect(), &[len, d])
}

/// `n×n` additive mask hiding future positions.
pub fn causal_mask(n: usize) -> Tensor {
    let mut m = Tensor::zeros([n, n]);
    for i in 0..n {
        for j in i + 1..n {
            m.data_mut()[i * n + j] = NEG_MASK;
        }
    }
    m
}

#[derive(Clone, Debug)]
struct FusionBlock {
    norm1: LayerNorm,
    self_attn: MultiHeadAttention,
    norm2: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm3: LayerNorm,
    mlp: Mlp,
}

/// Learned query tokens that read image patches under an instruction.
#[derive(Clone, Debug)]
pub struct QFormer {
    pub queries: ParamId,
    tok: ParamId,
    pos: ParamId,
    blocks: Vec<FusionBlock>,
    norm: LayerNorm,
    num_query: usize,
    dim: usize,
    max_len: usize,
}

impl QFormer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: &QFormerConfig,
        vocab_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let n = |s: &str| format!("{name}.{s}");
        let blocks = (0..cfg.depth)
            .map(|i| {
                let b = |s: &str| format!("{name}.block{i}.{s}");
                Ok(FusionBlock {
                    norm1: LayerNorm::new(store, &b("norm1"), d),
                    self_attn: MultiHeadAttention::new(store, &b("self_attn"), d, cfg.heads, rng)?,
                    norm2: LayerNorm::new(store, &b("norm2"), d),
                    cross_attn: MultiHeadAttention::new(store, &b("cross_attn"), d, cfg.heads, rng)?,
                    norm3: LayerNorm::new(store, &b("norm3"), d),
                    mlp: Mlp::new(store, &b("mlp"), d, d * cfg.mlp_ratio, rng),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            queries: store.add(n("queries"), Tensor::randn([cfg.num_query_tokens, d], 0.5, rng)),
            tok: store.add(n("tok"), Tensor::randn([vocab_size, d], 0.5, rng)),
            pos: store.add(n("pos"), Tensor::randn([cfg.max_len, d], 0.1, rng)),
            blocks,
            norm: LayerNorm::new(store, &n("norm"), d),
            num_query: cfg.num_query_tokens,
            dim: d,
            max_len: cfg.max_len,
        })
    }

    /// Query-position outputs, `num_query×d`. Queries and instruction tokens
    /// attend to each other jointly; only the queries read `image` (`L×d`).
    pub fn forward<'t>(&self, p: &Binding<'t>, image: Var<'t>, instruction: &[usize]) -> Result<Var<'t>> {
        expect_rows("qformer image features", &image, self.dim)?;
        let n = instruction.len();
        if n > self.max_len {
            return Err(contract_err!("instruction of {n} tokens exceeds {}", self.max_len));
        }
        let nq = self.num_query;
        let mut x = p.get(self.queries);
        if n > 0 {
            let pos: Vec<usize> = (0..n).collect();
            let text = p.get(self.tok).embed(instruction)?.add(p.get(self.pos).embed(&pos)?)?;
            x = Var::concat_rows(&[x, text])?;
        }
        for b in &self.blocks {
            let h = b.norm1.forward(p, x)?;
            x = x.add(b.self_attn.forward(p, h, h, h, None)?)?;
            let q = rows(x, 0, nq)?;
            let h = b.norm2.forward(p, q)?;
            let q = q.add(b.cross_attn.forward(p, h, image, image, None)?)?;
            x = if n > 0 { Var::concat_rows(&[q, rows(x, nq, n)?])? } else { q };
            let h = b.norm3.forward(p, x)?;
            x = x.add(b.mlp.forward(p, h)?)?;
        }
        let q = if n > 0 { rows(x, 0, nq)? } else { x };
        self.norm.forward(p, q)
    }
}

/// Residual cross-attention from fused queries onto the prompter's final tokens.
#[derive(Clone, Debug)]
pub struct FpnCrossAttention {
    proj: Option<Linear>,
    attn: MultiHeadAttention,
    dim: usize,
    fpn_dim: usize,
}

impl FpnCrossAttention {
    /// `project` adds a bias-free `fpn_dim → dim` map; without it the widths must agree.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        fpn_dim: usize,
        heads: usize,
        project: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if fpn_dim != dim && !project {
            return Err(config_err!(
                "prompter width {fpn_dim} differs from fusion width {dim} and no projection is configured"
            ));
        }
        Ok(Self {
            proj: project.then(|| Linear::new(store, &format!("{name}.proj"), fpn_dim, dim, false, rng)),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            dim,
            fpn_dim,
        })
    }

    pub fn forward<'t>(&self, p: &Binding<'t>, fused: Var<'t>, fpn_tokens: Var<'t>) -> Result<Var<'t>> {
        expect_rows("fused queries", &fused, self.dim)?;
        expect_rows("prompter tokens", &fpn_tokens, self.fpn_dim)?;
        let kv = match &self.proj {
            Some(proj) => proj.forward(p, fpn_tokens)?,
            None => fpn_tokens,
        };
        fused.add(self.attn.forward(p, fused, kv, kv, None)?)
    }

    pub fn weights<'t>(&self, p: &Binding<'t>, fused: Var<'t>, fpn_tokens: Var<'t>) -> Result<Vec<Tensor>> {
        let kv = match &self.proj {
            Some(proj) => proj.forward(p, fpn_tokens)?,
            None => fpn_tokens,
        };
        self.attn.weights(p, fused, kv)
    }
}

#[derive(Clone, Debug)]
struct DecoderBlock {
    norm1: LayerNorm,
    self_attn: MultiHeadAttention,
    norm2: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm3: LayerNorm,
    mlp: Mlp,
}

/// Causal word-level decoder. Its cross-attention memory is the fused query
/// features followed by the embedded instruction.
#[derive(Clone, Debug)]
pub struct TextDecoder {
    tok: ParamId,
    pos: ParamId,
    mem_pos: ParamId,
    blocks: Vec<DecoderBlock>,
    norm: LayerNorm,
    head: Linear,
    dim: usize,
    max_len: usize,
    vocab_size: usize,
}

impl TextDecoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: &QFormerConfig,
        vocab_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let blocks = (0..cfg.decoder_depth)
            .map(|i| {
                let b = |s: &str| format!("{name}.block{i}.{s}");
                Ok(DecoderBlock {
                    norm1: LayerNorm::new(store, &b("norm1"), d),
                    self_attn: MultiHeadAttention::new(store, &b("self_attn"), d, cfg.heads, rng)?,
                    norm2: LayerNorm::new(store, &b("norm2"), d),
                    cross_attn: MultiHeadAttention::new(store, &b("cross_attn"), d, cfg.heads, rng)?,
                    norm3: LayerNorm::new(store, &b("norm3"), d),
                    mlp: Mlp::new(store, &b("mlp"), d, d * cfg.mlp_ratio, rng),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            tok: store.add(format!("{name}.tok"), Tensor::randn([vocab_size, d], 0.5, rng)),
            pos: store.add(format!("{name}.pos"), Tensor::randn([cfg.max_len, d], 0.1, rng)),
            mem_pos: store.add(format!("{name}.mem_pos"), Tensor::randn([cfg.max_len, d], 0.1, rng)),
            blocks,
            norm: LayerNorm::new(store, &format!("{name}.norm"), d),
            head: Linear::new(store, &format!("{name}.head"), d, vocab_size, true, rng),
            dim: d,
            max_len: cfg.max_len,
            vocab_size,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Cross-attention memory: `fused` rows then instruction embeddings.
    pub fn memory<'t>(&self, p: &Binding<'t>, fused: Var<'t>, instruction: &[usize]) -> Result<Var<'t>> {
        expect_rows("fused features", &fused, self.dim)?;
        if instruction.is_empty() {
            return Ok(fused);
        }
        if instruction.len() > self.max_len {
            return Err(contract_err!(
                "instruction of {} tokens exceeds {}",
                instruction.len(),
                self.max_len
            ));
        }
        let pos: Vec<usize> = (0..instruction.len()).collect();
        let text = p.get(self.tok).embed(instruction)?.add(p.get(self.mem_pos).embed(&pos)?)?;
        Var::concat_rows(&[fused, text])
    }

    /// `n×V` next-token logits for the input prefix `ids`.
    pub fn forward<'t>(&self, p: &Binding<'t>, memory: Var<'t>, ids: &[usize]) -> Result<Var<'t>> {
        let n = ids.len();
        if n == 0 || n > self.max_len {
            return Err(contract_err!("decoder input of {n} tokens outside 1..={}", self.max_len));
        }
        let pos: Vec<usize> = (0..n).collect();
        let mut x = p.get(self.tok).embed(ids)?.add(p.get(self.pos).embed(&pos)?)?;
        let mask = causal_mask(n);
        for b in &self.blocks {
            let h = b.norm1.forward(p, x)?;
            x = x.add(b.self_attn.forward(p, h, h, h, Some(&mask))?)?;
            let h = b.norm2.forward(p, x)?;
            x = x.add(b.cross_attn.forward(p, h, memory, memory, None)?)?;
            let h = b.norm3.forward(p, x)?;
            x = x.add(b.mlp.forward(p, h)?)?;
        }
        self.head.forward(p, self.norm.forward(p, x)?)
    }
}

/// Teacher-forcing pair for a caption: `[BOS, t…]` in, `[t…, EOS]` out.
pub fn teacher_forcing(caption_ids: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut input = Vec::with_capacity(caption_ids.len() + 1);
    input.push(BOS);
    input.extend_from_slice(caption_ids);
    let mut target = caption_ids.to_vec();
    target.push(EOS);
    (input, target)
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of
/// `logits` (`n×V`), skipping PAD targets.
pub fn lm_loss<'t>(logits: Var<'t>, targets: &[usize], max_len: usize) -> Result<Var<'t>> {
    if targets.len() > max_len {
        return Err(contract_err!(
            "target of {} tokens exceeds the limit {max_len}",
            targets.len()
        ));
    }
    let shape = logits.shape();
    let [n, v] = shape[..] else {
        return Err(dim_err!("lm_loss expects n×V logits, got {shape:?}"));
    };
    if n != targets.len() {
        return Err(dim_err!("{n} logit rows for {} targets", targets.len()));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
        return Err(dim_err!("target id {bad} outside vocabulary of {v}"));
    }
    let index: Vec<usize> = targets
        .iter()
        .enumerate()
        .filter(|(_, &t)| t != PAD)
        .map(|(i, &t)| i * v + t)
        .collect();
    if index.is_empty() {
        return Err(contract_err!("target holds only padding"));
    }
    let m = index.len();
    logits.log_softmax()?.gather(index, &[m])?.mean()?.scale(-1.0)
}

/// Joint objective `L_t + L_m`.
pub fn stage2_loss<'t>(lm: Var<'t>, mask: Var<'t>) -> Result<Var<'t>> {
    lm.add(mask)
}

/// Greedy choice over real tokens: PAD, BOS and UNK are never emitted.
fn argmax_token(row: &[f64]) -> usize {
    let mut best = EOS;
    for (i, &v) in row.iter().enumerate() {
        if matches!(i, PAD | BOS | UNK) {
            continue;
        }
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding from BOS until EOS or `max_len` tokens (capped at the
/// decoder's limit). Returns the emitted ids without EOS.
pub fn generate_ids(decoder: &TextDecoder, store: &ParamStore, memory: &Tensor, max_len: usize) -> Result<Vec<usize>> {
    let limit = max_len.min(decoder.max_len);
    let mut ids = vec![BOS];
    let mut out = Vec::new();
    while out.len() < limit {
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let logits = decoder.forward(&p, tape.constant(memory.clone()), &ids)?;
        let v = logits.value();
        let vs = decoder.vocab_size;
        let last = &v.data()[(ids.len() - 1) * vs..ids.len() * vs];
        let next = argmax_token(last);
        if next == EOS {
            break;
        }
        out.push(next);
        ids.push(next);
    }
    Ok(out)
}

/// Greedy caption text for a precomputed memory.
pub fn generate(decoder: &TextDecoder, store: &ParamStore, memory: &Tensor, vocab: &Vocab, max_len: usize) -> Result<String> {
    Ok(vocab.detokenize(&generate_ids(decoder, store, memory, max_len)?))
}

/// Everything trained in the second stage.
#[derive(Clone, Debug)]
pub struct Stage2Model {
    pub cfg: QFormerConfig,
    pub mask_cfg: MaskDecoderConfig,
    pub store: ParamStore,
    encoder: PatchEmbed,
    encoder_blocks: Vec<SelfAttentionBlock>,
    pub qformer: QFormer,
    pub fpn_attn: FpnCrossAttention,
    pub decoder: TextDecoder,
    pub mask: MaskDecoder,
}

/// Tape handles of one stage-2 forward pass.
pub struct Stage2Output<'t> {
    pub fused: Var<'t>,
    pub memory: Var<'t>,
    pub mask_logits: Var<'t>,
}

/// Per-sample stage-2 training inputs, already tokenized.
pub struct Stage2Sample<'a> {
    pub image: &'a Tensor,
    pub fpn_tokens: &'a Tensor,
    pub instruction: &'a [usize],
    pub caption: &'a [usize],
    pub mask: &'a MaskGrid,
}

impl Stage2Model {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        cfg: QFormerConfig,
        mask_cfg: MaskDecoderConfig,
        (channels, image_size): (usize, usize),
        patch_size: usize,
        fpn_dim: usize,
        vocab_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        if vocab_size <= UNK {
            return Err(config_err!("vocabulary of {vocab_size} lacks the reserved tokens"));
        }
        let d = cfg.embed_dim;
        let mut store = ParamStore::new();
        let encoder = PatchEmbed::new(
            &mut store,
            "encoder.embed",
            (channels, image_size, image_size),
            patch_size,
            d,
            true,
            rng,
        )?;
        let encoder_blocks = (0..cfg.encoder_depth)
            .map(|i| {
                SelfAttentionBlock::new(
                    &mut store,
                    &format!("encoder.block{i}"),
                    d,
                    cfg.heads,
                    d * cfg.mlp_ratio,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let qformer = QFormer::new(&mut store, "qformer", &cfg, vocab_size, rng)?;
        let fpn_attn = FpnCrossAttention::new(&mut store, "fpn_attn", d, fpn_dim, cfg.heads, fpn_dim != d, rng)?;
        let decoder = TextDecoder::new(&mut store, "decoder", &cfg, vocab_size, rng)?;
        let mask = MaskDecoder::new(
            &mut store,
            "mask",
            d,
            channels,
            encoder.grid,
            patch_size,
            &mask_cfg,
            rng,
        )?;
        Ok(Self {
            cfg,
            mask_cfg,
            store,
            encoder,
            encoder_blocks,
            qformer,
            fpn_attn,
            decoder,
            mask,
        })
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Binding<'t> {
        self.store.bind(tape, trainable)
    }

    /// Image tokens of the stage-2 encoder, `L×d`.
    pub fn encode<'t>(&self, p: &Binding<'t>, image: Var<'t>) -> Result<Var<'t>> {
        let mut x = self.encoder.forward(p, image)?;
        for b in &self.encoder_blocks {
            x = b.forward(p, x, None)?;
        }
        Ok(x)
    }

    pub fn forward<'t>(
        &self,
        p: &Binding<'t>,
        image: Var<'t>,
        fpn_tokens: Var<'t>,
        instruction: &[usize],
    ) -> Result<Stage2Output<'t>> {
        let tokens = self.encode(p, image)?;
        let fused = self.qformer.forward(p, tokens, instruction)?;
        let fused = self.fpn_attn.forward(p, fused, fpn_tokens)?;
        let memory = self.decoder.memory(p, fused, instruction)?;
        let mask_logits = self.mask.forward_logits(p, fused, tokens, image)?;
        Ok(Stage2Output {
            fused,
            memory,
            mask_logits,
        })
    }

    /// `(L, L_t, L_m)` under teacher forcing.
    pub fn loss<'t>(&self, p: &Binding<'t>, s: &Stage2Sample<'_>) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        let tape = p.get(self.qformer.queries).tape();
        let out = self.forward(p, tape.constant(s.image.clone()), tape.constant(s.fpn_tokens.clone()), s.instruction)?;
        let (input, target) = teacher_forcing(s.caption);
        let logits = self.decoder.forward(p, out.memory, &input)?;
        let lt = lm_loss(logits, &target, self.cfg.max_len)?;
        let lm = mask_loss_logits(out.mask_logits, s.mask)?;
        Ok((stage2_loss(lt, lm)?, lt, lm))
    }

    /// Forged-pixel probabilities and caption token ids.
    pub fn predict(&self, image: &Tensor, fpn_tokens: &Tensor, instruction: &[usize], max_len: usize) -> Result<(MaskGrid, Vec<usize>)> {
        let tape = Tape::new();
        let p = self.bind(&tape, false);
        let out = self.forward(&p, tape.constant(image.clone()), tape.constant(fpn_tokens.clone()), instruction)?;
        let probs = MaskGrid::from_tensor(&out.mask_logits.sigmoid()?.to_tensor())?;
        let memory = out.memory.to_tensor();
        drop(p);
        let ids = generate_ids(&self.decoder, &self.store, &memory, max_len)?;
        Ok((probs, ids))
    }
}
