//! Reference forward passes for RoPE, GQA and MLA, plus cache accounting.

pub mod cache;
pub mod gqa;
pub mod kernel;
pub mod mla;
pub mod rope;

pub use cache::{kv_cache_bytes, reduction_label, CacheSpec, DecodeLayer, GqaDecoder, KvCache, MlaDecoder};
pub use gqa::{gqa_forward, GqaLayer};
pub use kernel::{causal_attention, causal_scores, softmax_in_place};
pub use mla::{mla_forward_absorbed, mla_forward_mha_paradigm, MlaLayer, QueryProjection};
pub use rope::{apply_rope, RopeSchedule};
