//! Text-to-tune generation toolkit.
//!
//! Natural-language descriptions are tokenized with a byte-level BPE
//! ([`bpe`]), tunes in ABC notation with a fixed 164-token character vocabulary
//! ([`abc`]). An encoder-decoder transformer ([`model`]) built on hand-written
//! numerics ([`nn`]) is optionally pretrained ([`pretrain`]), fine-tuned with
//! AdamW ([`train`]), sampled with nucleus sampling ([`sampler`]) and scored
//! with BLEU, DIST and edit-distance similarity ([`metrics`]).
//!
//! Numerics are generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! name the common instantiations.

pub mod abc;
pub mod bpe;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pretrain;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use scalar::Scalar;

/// Single-precision tensor used for training.
pub type Tensor32 = nn::Tensor<f32>;
/// Double-precision tensor used for gradient checks.
pub type Tensor64 = nn::Tensor<f64>;
pub type Model32 = model::Seq2SeqModel<f32>;
pub type Model64 = model::Seq2SeqModel<f64>;
