//! Instruction template, word-level tokenizer, query-token fusion and the
//! caption decoder.

mod model;
mod text;

pub use text::{
    build_instruction, canonical_form, is_punct, join_tokens, split_tokens, word_count,
    Instruction, Vocab, BOS, EOS, PAD, UNK,
};
pub use model::{
    causal_mask, generate, generate_ids, lm_loss, stage2_loss, teacher_forcing, FpnCrossAttention,
    QFormer, QFormerConfig, Stage2Model, Stage2Output, Stage2Sample, TextDecoder,
};
