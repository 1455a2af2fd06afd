//! Minimal deterministic decoder-only transformer.

mod config;
mod kv;
mod mask;
mod model;
pub mod rng;
pub mod rope;
mod tokenizer;

pub use config::ModelConfig;
pub use kv::{KvCache, KvTensor};
pub use mask::AttentionMask;
pub use model::{Fingerprint, ForwardOutput, Model, Projection};
pub use rope::apply_rope;
pub use tokenizer::{detokenize, encode, tokenize, TokenSequence, BOS, EOS, NO, VOCAB_SIZE, YES};
