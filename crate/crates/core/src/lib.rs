//! Original-translated contrastive (OTC) training lab.
//!
//! Synthetic parallel corpora, a small reverse-mode autodiff engine, a
//! transformer-style encoder, the pair-aware minibatch sampler, AdamW
//! training and per-language evaluation.

pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval_stats;
pub mod loss;
pub mod par;
pub mod sampler;
pub mod selfcheck;
pub mod sweep;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
