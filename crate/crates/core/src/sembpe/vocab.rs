use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::stats::{candidate_filter, collect_pair_stats, merge_score, TokenEmbeddings};
use super::{MergeGate, TokenId};
use crate::error::{Error, Result};
use crate::schedule::AnnealSchedule;

const VOCAB_MAGIC: &str = "# capsid-vocab";
const VOCAB_VERSION: u32 = 1;

/// Fitting hyperparameters for [`bpe_fit`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BpeConfig {
    /// Frequency weight `α` in the merge score.
    pub alpha: f64,
    /// Similarity threshold `θ`, annealed over merge rounds.
    pub theta: AnnealSchedule,
    /// Minimum pair count `n_min`.
    pub n_min: u64,
    /// Maximum number of merge rules `M`.
    pub budget: usize,
}

impl Default for BpeConfig {
    fn default() -> Self {
        Self {
            alpha: 0.6,
            theta: AnnealSchedule::merge_threshold(63),
            n_min: 20,
            budget: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeRule {
    pub left: TokenId,
    pub right: TokenId,
    pub new: TokenId,
    /// Zero-based fitting round that produced the rule.
    pub round: usize,
    pub score: f64,
}

/// Ordered merge rules. Rule order is application order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubwordVocabulary {
    pub rules: Vec<MergeRule>,
    /// Number of base tokens; merged ids start here.
    pub base_size: u32,
    pub alpha: f64,
    pub theta: AnnealSchedule,
    pub n_min: u64,
}

impl SubwordVocabulary {
    pub fn empty(base_size: u32, cfg: &BpeConfig) -> Self {
        Self {
            rules: Vec::new(),
            base_size,
            alpha: cfg.alpha,
            theta: cfg.theta,
            n_min: cfg.n_min,
        }
    }

    /// Total token count including merged subwords.
    pub fn size(&self) -> u32 {
        self.base_size + self.rules.len() as u32
    }

    /// Base embeddings extended with every merged subword embedding.
    pub fn extend_embeddings(&self, base: &TokenEmbeddings) -> Result<TokenEmbeddings> {
        let mut table = base.clone();
        for rule in &self.rules {
            let id = table.push_merged(rule.left, rule.right)?;
            if id != rule.new {
                return Err(Error::invalid(format!(
                    "rule produces token {} but the embedding table assigned {id}",
                    rule.new
                )));
            }
        }
        Ok(table)
    }

    /// Line-delimited text: a header, then one `left right new round score`
    /// record per rule.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{VOCAB_MAGIC} v{VOCAB_VERSION}");
        let _ = writeln!(
            out,
            "# base_size={} alpha={} theta_start={} theta_end={} theta_steps={} n_min={}",
            self.base_size,
            self.alpha,
            self.theta.start,
            self.theta.end,
            self.theta.total_steps,
            self.n_min
        );
        for r in &self.rules {
            let _ = writeln!(
                out,
                "{} {} {} {} {}",
                r.left, r.right, r.new, r.round, r.score
            );
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut offset = 0u64;
        let mut lines = text.split_inclusive('\n');
        let mut next_line = |offset: &mut u64| {
            lines.next().map(|l| {
                let start = *offset;
                *offset += l.len() as u64;
                (start, l.trim_end_matches(['\n', '\r']))
            })
        };
        let (start, magic) =
            next_line(&mut offset).ok_or_else(|| Error::format(0, "empty vocabulary file"))?;
        let version = magic
            .strip_prefix(VOCAB_MAGIC)
            .and_then(|v| v.trim().strip_prefix('v'))
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| Error::format(start, "missing vocabulary header"))?;
        if version > VOCAB_VERSION {
            return Err(Error::Version {
                found: version,
                supported: VOCAB_VERSION,
            });
        }
        let (start, header) = next_line(&mut offset)
            .ok_or_else(|| Error::format(offset, "missing parameter line"))?;
        let mut fields = HashMap::new();
        for kv in header.trim_start_matches('#').split_whitespace() {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::format(start, format!("bad header field {kv:?}")))?;
            fields.insert(k, v);
        }
        let get = |k: &str| -> Result<&str> {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| Error::format(start, format!("header lacks {k}")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::format(start, format!("bad value for {k}")))
        };
        let int = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::format(start, format!("bad value for {k}")))
        };
        let mut vocab = SubwordVocabulary {
            rules: Vec::new(),
            base_size: int("base_size")? as u32,
            alpha: num("alpha")?,
            theta: AnnealSchedule {
                start: num("theta_start")?,
                end: num("theta_end")?,
                total_steps: int("theta_steps")? as usize,
            },
            n_min: int("n_min")?,
        };
        while let Some((start, line)) = next_line(&mut offset) {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 5 {
                return Err(Error::format(
                    start,
                    format!("expected 5 fields, found {}", parts.len()),
                ));
            }
            let bad = |what: &str| Error::format(start, format!("bad {what}"));
            let rule = MergeRule {
                left: parts[0].parse().map_err(|_| bad("left token"))?,
                right: parts[1].parse().map_err(|_| bad("right token"))?,
                new: parts[2].parse().map_err(|_| bad("new token"))?,
                round: parts[3].parse().map_err(|_| bad("round"))?,
                score: parts[4].parse().map_err(|_| bad("score"))?,
            };
            if rule.new != vocab.size() {
                return Err(Error::format(start, "merge rule ids must be consecutive"));
            }
            if rule.left >= rule.new || rule.right >= rule.new {
                return Err(Error::format(start, "merge rule refers to a later token"));
            }
            vocab.rules.push(rule);
        }
        Ok(vocab)
    }
}

/// Merges every non-overlapping occurrence of `(left, right)` in one
/// left-to-right pass.
fn merge_pass(tokens: &[TokenId], rule: &MergeRule) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(tokens.len());
    let mut i = 0;
    while i < tokens.len() {
        if i + 1 < tokens.len() && tokens[i] == rule.left && tokens[i + 1] == rule.right {
            out.push(rule.new);
            i += 2;
        } else {
            out.push(tokens[i]);
            i += 1;
        }
    }
    out
}

/// Applies the vocabulary's rules in order, one greedy non-overlapping pass
/// per rule.
pub fn apply_merges_greedy(tokens: &[TokenId], vocab: &SubwordVocabulary) -> Vec<TokenId> {
    let mut current = tokens.to_vec();
    for rule in &vocab.rules {
        if current.len() < 2 {
            break;
        }
        current = merge_pass(&current, rule);
    }
    current
}

/// Recursively expands merged subwords back into base tokens.
pub fn expand(tokens: &[TokenId], vocab: &SubwordVocabulary) -> Result<Vec<TokenId>> {
    let mut out = Vec::with_capacity(tokens.len() * 2);
    let mut stack: Vec<TokenId> = tokens.iter().rev().copied().collect();
    while let Some(t) = stack.pop() {
        if t < vocab.base_size {
            out.push(t);
            continue;
        }
        let rule = vocab
            .rules
            .get((t - vocab.base_size) as usize)
            .ok_or(Error::UnknownToken(t))?;
        stack.push(rule.right);
        stack.push(rule.left);
    }
    Ok(out)
}

/// Builds a subword vocabulary: each round scores the eligible pairs, keeps the
/// best one as a rule and re-encodes the corpus with it. When a gate is given,
/// a pair is eligible only if the gate's hard decision is to merge.
pub fn bpe_fit(
    corpus: &[Vec<TokenId>],
    base_embeddings: &TokenEmbeddings,
    cfg: &BpeConfig,
    gate: Option<&MergeGate>,
) -> Result<SubwordVocabulary> {
    if corpus.is_empty() {
        return Err(Error::Empty("BPE corpus"));
    }
    if !(0.0..=1.0).contains(&cfg.alpha) {
        return Err(Error::invalid(format!(
            "alpha must lie in [0, 1], got {}",
            cfg.alpha
        )));
    }
    let base_size = base_embeddings.len() as u32;
    if let Some(&bad) = corpus.iter().flatten().find(|&&t| t >= base_size) {
        return Err(Error::UnknownToken(bad));
    }
    let mut vocab = SubwordVocabulary::empty(base_size, cfg);
    let mut embeddings = base_embeddings.clone();
    let mut current: Vec<Vec<TokenId>> = corpus.to_vec();
    for round in 0..cfg.budget {
        let stats = collect_pair_stats(&current);
        let theta = cfg.theta.value(round);
        let mut best: Option<((TokenId, TokenId), f64)> = None;
        for pair in candidate_filter(&stats, &embeddings, theta, cfg.n_min)? {
            if let Some(gate) = gate {
                let features = MergeGate::features(
                    embeddings.get(pair.0)?,
                    embeddings.get(pair.1)?,
                    stats.normalized_frequency(pair),
                    embeddings.cosine(pair)?,
                );
                if !gate.merges(&features)? {
                    continue;
                }
            }
            let score = merge_score(pair, &stats, &embeddings, cfg.alpha)?;
            // Candidates arrive in ascending pair order, so strict `>` keeps
            // the smallest pair among equal scores.
            if best.map_or(true, |(_, s)| score > s) {
                best = Some((pair, score));
            }
        }
        let Some(((left, right), score)) = best else {
            break;
        };
        let new = embeddings.push_merged(left, right)?;
        let rule = MergeRule {
            left,
            right,
            new,
            round,
            score,
        };
        for seq in &mut current {
            *seq = merge_pass(seq, &rule);
        }
        vocab.rules.push(rule);
    }
    Ok(vocab)
}
