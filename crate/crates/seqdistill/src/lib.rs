//! Teacher-student distillation for small attentional sequence-to-sequence models.
//!
//! The crate trains LSTM encoder-decoder translation models on a synthetic
//! desk-scale task, transfers knowledge from a large teacher into a small
//! student at the word level (soft cross-entropy) or at the sequence level
//! (training on teacher beam outputs, or on the beam hypothesis closest to
//! the gold target), and compresses students further with magnitude pruning
//! plus masked retraining.
//!
//! Everything runs on a self-contained f64 tensor library with tape-based
//! reverse-mode differentiation, so results are deterministic given seeds
//! and cheap to verify against finite differences and brute-force oracles.

pub mod bench;
pub mod bleu;
pub mod cfgfile;
pub mod cli;
pub mod data;
pub mod decode;
pub mod distill;
pub mod error;
pub mod experiment;
pub mod model;
pub mod prune;
pub(crate) mod seed;
pub mod tensor;
#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
