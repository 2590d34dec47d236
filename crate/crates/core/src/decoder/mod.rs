//! Trie-constrained decoding of item SIDs under an n-gram next-token model.
//!
//! Token ids `0..vocab_size` are SID tokens (base or merged). One extra id,
//! `vocab_size`, marks end of item.

mod beam;
mod ngram;
mod trie;

pub use beam::{beam_search_constrained, decode_topk_items, DecodeConfig, RankedItem};
pub use ngram::{flatten_history, ngram_fit, NgramModel};
pub use trie::{build_trie, SidTrie};
