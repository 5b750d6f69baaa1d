//! Power-law graph attention (PLGA) encoder-decoder transducer.
//!
//! The crate is organised bottom-up:
//!
//! - [`ndgrad`]: dense `f64` tensors and a tape-based reverse-mode autodiff.
//! - [`attention`]: the three-stage power-law graph attention layer
//!   (metric tensor, energy-curvature tensor, localized operator) and the
//!   scaled dot-product baseline.
//! - [`model`]: embeddings, encoder/decoder stacks and parameter layout.
//! - [`textpipe`]: byte-level BPE vocabularies, corpora and padded batches.
//! - [`trainkit`]: loss, Adam, warmup schedule, training loop, checkpoints.
//! - [`decode`]: greedy and beam decoding, corpus BLEU.
//! - [`inspect`]: capture and export of the per-head deductive tensors.

pub mod attention;
pub mod decode;
mod error;
pub mod inspect;
pub mod kv;
pub mod model;
pub mod ndgrad;
pub mod rng;
pub mod textpipe;
pub mod trainkit;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use ndgrad::{Tape, Tensor, Var};
pub use rng::SeedStream;
