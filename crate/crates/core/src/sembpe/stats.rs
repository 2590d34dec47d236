use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::TokenId;
use crate::capsule::CapsuleStack;
use crate::error::{Error, Result};
use crate::linalg::{cosine, normalized};

/// Adjacent ordered pair counts over a corpus of token sequences.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    pub counts: BTreeMap<(TokenId, TokenId), u64>,
    pub max_count: u64,
    /// Number of adjacent-pair positions in the corpus.
    pub corpus_size: u64,
}

impl PairStats {
    pub fn count(&self, pair: (TokenId, TokenId)) -> u64 {
        self.counts.get(&pair).copied().unwrap_or(0)
    }

    /// `count / max_count`, zero for unseen pairs or an empty corpus.
    pub fn normalized_frequency(&self, pair: (TokenId, TokenId)) -> f64 {
        if self.max_count == 0 {
            0.0
        } else {
            self.count(pair) as f64 / self.max_count as f64
        }
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

fn count_chunk(chunk: &[Vec<TokenId>]) -> BTreeMap<(TokenId, TokenId), u64> {
    let mut counts = BTreeMap::new();
    for seq in chunk {
        for w in seq.windows(2) {
            *counts.entry((w[0], w[1])).or_insert(0) += 1;
        }
    }
    counts
}

/// Counts every adjacent ordered pair. Sequences never contribute pairs
/// across their boundaries.
pub fn collect_pair_stats(corpus: &[Vec<TokenId>]) -> PairStats {
    let partial: Vec<_> = corpus.par_chunks(512).map(count_chunk).collect();
    let mut counts = BTreeMap::new();
    for part in partial {
        for (pair, c) in part {
            *counts.entry(pair).or_insert(0) += c;
        }
    }
    let max_count = counts.values().copied().max().unwrap_or(0);
    let corpus_size = counts.values().sum();
    PairStats {
        counts,
        max_count,
        corpus_size,
    }
}

/// Embeddings for base and merged tokens, indexed by [`TokenId`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenEmbeddings {
    vectors: Vec<Vec<f64>>,
}

impl TokenEmbeddings {
    pub fn new(vectors: Vec<Vec<f64>>) -> Result<Self> {
        if vectors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("token embedding".into()));
        }
        Ok(Self { vectors })
    }

    /// Base-token embeddings are the capsule centers, in flat code order.
    pub fn from_stack(stack: &CapsuleStack) -> Self {
        Self {
            vectors: stack
                .layers
                .iter()
                .flat_map(|l| l.centers.iter().cloned())
                .collect(),
        }
    }

    pub fn get(&self, token: TokenId) -> Result<&[f64]> {
        self.vectors
            .get(token as usize)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownToken(token))
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    pub fn cosine(&self, pair: (TokenId, TokenId)) -> Result<f64> {
        Ok(cosine(self.get(pair.0)?, self.get(pair.1)?))
    }

    /// Appends the unit-normalized mean of two constituents and returns its id.
    pub fn push_merged(&mut self, left: TokenId, right: TokenId) -> Result<TokenId> {
        let (a, b) = (self.get(left)?, self.get(right)?);
        let mean: Vec<f64> = a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect();
        self.vectors.push(normalized(&mean));
        Ok((self.vectors.len() - 1) as TokenId)
    }
}

/// `α · freq̂ + (1 − α) · cos(e_a, e_b)`.
pub fn merge_score(
    pair: (TokenId, TokenId),
    stats: &PairStats,
    embeddings: &TokenEmbeddings,
    alpha: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    let cos = embeddings.cosine(pair)?;
    Ok(alpha * stats.normalized_frequency(pair) + (1.0 - alpha) * cos)
}

/// Pairs seen at least `n_min` times whose embedding cosine exceeds `theta`.
pub fn candidate_filter(
    stats: &PairStats,
    embeddings: &TokenEmbeddings,
    theta: f64,
    n_min: u64,
) -> Result<Vec<(TokenId, TokenId)>> {
    let mut out = Vec::new();
    for (&pair, &count) in &stats.counts {
        if count >= n_min && embeddings.cosine(pair)? > theta {
            out.push(pair);
        }
    }
    Ok(out)
}
