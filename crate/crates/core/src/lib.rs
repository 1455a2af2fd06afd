//! Adaptive many-shot in-context inference over a reusable KV cache.
//!
//! Demonstrations are prefilled once into a [`CachePool`] at origin
//! positions. Per query, cached examples are ranked by attention relevance,
//! candidate shot counts are probed in parallel under a tree attention mask
//! and scored by two-class output entropy, and the chosen prefix is
//! assembled by rotating cached keys to their new positions instead of
//! re-running the model over the shot tokens.

pub mod engine;
pub mod error;
pub mod kvpool;
pub mod probe;
pub mod reposition;
pub mod retrieval;
pub mod tinylm;
pub mod verify;

pub use engine::{bench, BenchMode, BenchReport, Engine, InferenceReport, ShotPolicy, Timing};
pub use error::{Error, Result};
pub use kvpool::{build_pool, build_pool_with_instruction, load_pool, prefill_example, save_pool, CachePool, KvBlock};
pub use probe::{adaptive_select, probe_entropy, select_shot_count, EntropyTrace, ProbeConfig, ProbePlan};
pub use reposition::{assemble_context, reencode_key, rotation_factors, AssembledContext};
pub use retrieval::{encode_query, rank, score_example, ActiveSet, HeadMode, Scope};
pub use tinylm::{AttentionMask, ForwardOutput, Model, ModelConfig, TokenSequence};
