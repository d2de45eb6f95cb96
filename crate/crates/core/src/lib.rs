//! Face-forgery localization and interpretation at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: dense `f64` tensors with a reverse-mode tape.
//! - [`nn`]: parameter storage, layers, checkpoints and the optimizer.
//! - [`prompter`]: the region prompter network, its 21-way region head and losses.
//! - [`instruct`]: instruction template, tokenizer, query-token fusion and the caption decoder.
//! - [`mask`]: two-way mask decoder and the per-pixel mask loss.
//! - [`forge`]: procedural faces, forgery masks, compositing and caption synthesis.
//! - [`qc`]: annotation quality control, dataset statistics and splitting.
//! - [`metrics`]: PLM, mask IoU/precision/recall, BLEU, ROUGE-L and CIDEr.
//! - [`harness`]: the command implementations behind the `forgetalk` binary.

pub mod autodiff;
mod error;
pub mod forge;
pub mod harness;
pub mod instruct;
pub mod mask;
pub mod nn;
pub mod metrics;
pub mod prompter;
pub mod qc;
mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
