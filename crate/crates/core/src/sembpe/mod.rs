//! Semantic subword composition over SID token sequences.
//!
//! Adjacent tokens inside one item's SID are merged into reusable subwords
//! when they are both frequent and geometrically compatible. Merge scores mix
//! normalized pair frequency with the cosine of the token embeddings; a small
//! learned gate decides whether an eligible pair may merge at all.

mod gate;
mod stats;
mod vocab;

pub use gate::{
    relaxed_gate, sample_gumbel_noise, GateGradient, MergeGate, DEFAULT_GATE_HIDDEN,
    DEFAULT_GUMBEL_TEMPERATURE,
};
pub use stats::{candidate_filter, collect_pair_stats, merge_score, PairStats, TokenEmbeddings};
pub use vocab::{apply_merges_greedy, bpe_fit, expand, BpeConfig, MergeRule, SubwordVocabulary};

/// Flat token id: base SID codes first, merged subwords after them.
pub type TokenId = u32;
