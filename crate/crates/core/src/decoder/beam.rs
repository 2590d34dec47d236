use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::ngram::NgramModel;
use super::trie::SidTrie;
use crate::error::{Error, Result};
use crate::sembpe::TokenId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Maximum SID tokens per decoded item, end of item excluded.
    pub max_length: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 50,
            max_length: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedItem {
    pub item: String,
    pub log_prob: f64,
}

#[derive(Clone, Debug)]
struct Beam {
    node: usize,
    tokens: Vec<TokenId>,
    log_prob: f64,
}

#[derive(Clone, Debug)]
enum Candidate {
    Done(RankedItem),
    Live(Beam),
}

impl Candidate {
    fn log_prob(&self) -> f64 {
        match self {
            Candidate::Done(r) => r.log_prob,
            Candidate::Live(b) => b.log_prob,
        }
    }

    fn rank(&self, other: &Self) -> Ordering {
        other
            .log_prob()
            .total_cmp(&self.log_prob())
            .then_with(|| match (self, other) {
                (Candidate::Done(a), Candidate::Done(b)) => a.item.cmp(&b.item),
                (Candidate::Live(a), Candidate::Live(b)) => a.tokens.cmp(&b.tokens),
                (Candidate::Done(_), Candidate::Live(_)) => Ordering::Less,
                (Candidate::Live(_), Candidate::Done(_)) => Ordering::Greater,
            })
    }
}

/// Beam search where each step may only follow trie edges, and an item is
/// emitted only through its end-of-item edge. Finished items keep their beam
/// slot. The result is sorted by descending log-probability, then item id.
pub fn beam_search_constrained(
    context: &[TokenId],
    model: &NgramModel,
    trie: &SidTrie,
    cfg: &DecodeConfig,
) -> Result<Vec<RankedItem>> {
    if trie.is_empty() {
        return Err(Error::Empty("SID trie"));
    }
    if cfg.beam_size == 0 {
        return Err(Error::invalid("beam size must be at least 1"));
    }
    if model.vocab_size != trie.vocab_size() + 1 {
        return Err(Error::invalid(format!(
            "model vocabulary {} does not match trie vocabulary {} plus end of item",
            model.vocab_size,
            trie.vocab_size()
        )));
    }
    let eoi = trie.end_of_item() as usize;
    let mut live = vec![Beam {
        node: trie.root(),
        tokens: Vec::new(),
        log_prob: 0.0,
    }];
    let mut finished = Vec::new();
    let mut prefix = context.to_vec();
    for step in 0..=cfg.max_length {
        let mut candidates = Vec::new();
        for beam in &live {
            prefix.truncate(context.len());
            prefix.extend_from_slice(&beam.tokens);
            let dist = model.distribution(&prefix);
            for item in trie.items_at(beam.node) {
                candidates.push(Candidate::Done(RankedItem {
                    item: item.clone(),
                    log_prob: beam.log_prob + dist[eoi].ln(),
                }));
            }
            if step < cfg.max_length {
                for (t, child) in trie.children(beam.node) {
                    let mut tokens = beam.tokens.clone();
                    tokens.push(t);
                    candidates.push(Candidate::Live(Beam {
                        node: child,
                        tokens,
                        log_prob: beam.log_prob + dist[t as usize].ln(),
                    }));
                }
            }
        }
        candidates.sort_by(Candidate::rank);
        candidates.truncate(cfg.beam_size);
        live.clear();
        for c in candidates {
            match c {
                Candidate::Done(r) => finished.push(r),
                Candidate::Live(b) => live.push(b),
            }
        }
        if live.is_empty() {
            break;
        }
    }
    finished.sort_by(|a, b| {
        b.log_prob
            .total_cmp(&a.log_prob)
            .then_with(|| a.item.cmp(&b.item))
    });
    Ok(finished)
}

/// The first `k` items of [`beam_search_constrained`].
pub fn decode_topk_items(
    context: &[TokenId],
    k: usize,
    model: &NgramModel,
    trie: &SidTrie,
    cfg: &DecodeConfig,
) -> Result<Vec<String>> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let ranked = beam_search_constrained(context, model, trie, cfg)?;
    Ok(ranked.into_iter().take(k).map(|r| r.item).collect())
}
