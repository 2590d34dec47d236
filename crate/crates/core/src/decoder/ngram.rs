use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sembpe::TokenId;

/// Add-k smoothed n-gram model over SID tokens plus end of item. Contexts
/// never seen in training back off to the longest seen suffix, and finally to
/// the smoothed unigram.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "NgramParts")]
pub struct NgramModel {
    pub order: usize,
    pub k: f64,
    /// Vocabulary size including the end-of-item token.
    pub vocab_size: u32,
    /// `(context, [(next, count)])` for context lengths `1..order`.
    contexts: Vec<(Vec<TokenId>, Vec<(TokenId, u64)>)>,
    unigram: Vec<u64>,
    #[serde(skip)]
    index: BTreeMap<Vec<TokenId>, usize>,
}

#[derive(Deserialize)]
struct NgramParts {
    order: usize,
    k: f64,
    vocab_size: u32,
    contexts: Vec<(Vec<TokenId>, Vec<(TokenId, u64)>)>,
    unigram: Vec<u64>,
}

impl From<NgramParts> for NgramModel {
    fn from(p: NgramParts) -> Self {
        NgramModel::from_parts(p.order, p.k, p.vocab_size, p.contexts, p.unigram)
    }
}

/// Concatenates item SIDs, each followed by `end_of_item`.
pub fn flatten_history(items: &[Vec<TokenId>], end_of_item: TokenId) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(items.iter().map(|s| s.len() + 1).sum());
    for s in items {
        out.extend_from_slice(s);
        out.push(end_of_item);
    }
    out
}

/// Counts every n-gram of length `1..=order` inside each history.
pub fn ngram_fit(
    histories: &[Vec<TokenId>],
    order: usize,
    k: f64,
    vocab_size: u32,
) -> Result<NgramModel> {
    if order == 0 {
        return Err(Error::invalid("n-gram order must be at least 1"));
    }
    if !(k > 0.0 && k.is_finite()) {
        return Err(Error::invalid("smoothing constant must be positive"));
    }
    if vocab_size == 0 {
        return Err(Error::invalid("vocabulary must be nonempty"));
    }
    let mut unigram = vec![0u64; vocab_size as usize];
    let mut table: BTreeMap<Vec<TokenId>, BTreeMap<TokenId, u64>> = BTreeMap::new();
    for h in histories {
        for (i, &t) in h.iter().enumerate() {
            if t >= vocab_size {
                return Err(Error::UnknownToken(t));
            }
            unigram[t as usize] += 1;
            for len in 1..order.min(i + 1) {
                *table
                    .entry(h[i - len..i].to_vec())
                    .or_default()
                    .entry(t)
                    .or_default() += 1;
            }
        }
    }
    let contexts = table
        .into_iter()
        .map(|(c, m)| (c, m.into_iter().collect()))
        .collect();
    Ok(NgramModel::from_parts(
        order, k, vocab_size, contexts, unigram,
    ))
}

impl NgramModel {
    fn from_parts(
        order: usize,
        k: f64,
        vocab_size: u32,
        contexts: Vec<(Vec<TokenId>, Vec<(TokenId, u64)>)>,
        unigram: Vec<u64>,
    ) -> Self {
        let index = contexts
            .iter()
            .enumerate()
            .map(|(i, (c, _))| (c.clone(), i))
            .collect();
        Self {
            order,
            k,
            vocab_size,
            contexts,
            unigram,
            index,
        }
    }

    pub fn end_of_item(&self) -> TokenId {
        self.vocab_size - 1
    }

    /// Next-token distribution over the whole vocabulary.
    pub fn distribution(&self, context: &[TokenId]) -> Vec<f64> {
        let v = self.vocab_size as f64;
        let longest = (self.order - 1).min(context.len());
        for len in (1..=longest).rev() {
            if let Some(&i) = self.index.get(&context[context.len() - len..]) {
                let counts = &self.contexts[i].1;
                let total: u64 = counts.iter().map(|(_, c)| c).sum();
                let denom = total as f64 + self.k * v;
                let mut p = vec![self.k / denom; self.vocab_size as usize];
                for &(t, c) in counts {
                    p[t as usize] = (c as f64 + self.k) / denom;
                }
                return p;
            }
        }
        let total: u64 = self.unigram.iter().sum();
        let denom = total as f64 + self.k * v;
        self.unigram
            .iter()
            .map(|&c| (c as f64 + self.k) / denom)
            .collect()
    }

    pub fn log_prob(&self, context: &[TokenId], token: TokenId) -> f64 {
        self.distribution(context)[token as usize].ln()
    }
}
