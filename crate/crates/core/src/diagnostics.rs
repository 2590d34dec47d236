//! Tokenizer quality metrics and the report they are collected into.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::capsule::CapsuleStack;
use crate::decoder::{flatten_history, NgramModel};
use crate::error::{Error, Result};
use crate::linalg::cosine;
use crate::routing::{SemanticId, StopCause};
use crate::sembpe::TokenId;

/// `1 − distinct / N`, comparing full token sequences.
pub fn collision_rate(sids: &[SemanticId]) -> Result<f64> {
    if sids.is_empty() {
        return Err(Error::Empty("SID set"));
    }
    let distinct: HashSet<&[usize]> = sids.iter().map(|s| s.tokens.as_slice()).collect();
    Ok(1.0 - distinct.len() as f64 / sids.len() as f64)
}

/// Usage count of every `(depth, capsule)` code in flat code order.
pub fn code_usage(sids: &[SemanticId], stack: &CapsuleStack) -> Result<Vec<u64>> {
    let offsets = stack.code_offsets();
    let per_depth = stack.capsules_per_depth();
    let mut usage = vec![0u64; stack.total_codes()];
    for sid in sids {
        for (depth, k) in sid.codes() {
            if depth >= per_depth.len() || k >= per_depth[depth] {
                return Err(Error::invalid(format!(
                    "code ({depth}, {k}) is outside the stack"
                )));
            }
            usage[offsets[depth] + k] += 1;
        }
    }
    Ok(usage)
}

/// Share of codes used at least once.
pub fn code_utilization(sids: &[SemanticId], stack: &CapsuleStack) -> Result<f64> {
    let usage = code_usage(sids, stack)?;
    Ok(usage.iter().filter(|&&c| c > 0).count() as f64 / usage.len() as f64)
}

/// Gini coefficient `Σ_i Σ_j |u_i − u_j| / (2 n Σ u)`.
pub fn gini(counts: &[f64]) -> Result<f64> {
    if counts.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
        return Err(Error::invalid(
            "usage counts must be finite and non-negative",
        ));
    }
    let total: f64 = counts.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("Gini needs at least one positive count"));
    }
    let mut sorted = counts.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    // Σ_i Σ_j |u_i − u_j| = 2 Σ_i (2i − n + 1) u_(i) over ascending order.
    let weighted: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, u)| (2.0 * i as f64 - n + 1.0) * u)
        .sum();
    Ok((weighted / (n * total)).max(0.0))
}

/// Mean cosine over unordered item pairs that share their first SID token.
/// `None` when no group has two members.
pub fn intra_code_similarity(items: &[Vec<f64>], sids: &[SemanticId]) -> Result<Option<f64>> {
    if items.len() != sids.len() {
        return Err(Error::DimensionMismatch {
            context: "items vs SIDs",
            expected: sids.len(),
            got: items.len(),
        });
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, sid) in sids.iter().enumerate() {
        if let Some(&first) = sid.tokens.first() {
            groups.entry(first).or_default().push(i);
        }
    }
    let (mut sum, mut pairs) = (0.0, 0u64);
    for members in groups.values() {
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                sum += cosine(&items[i], &items[j]);
                pairs += 1;
            }
        }
    }
    Ok((pairs > 0).then(|| sum / pairs as f64))
}

/// Whether `target` is among the `m` most probable tokens, ties broken by
/// token index.
fn in_top(dist: &[f64], target: TokenId, m: usize) -> bool {
    let p = dist[target as usize];
    let better = dist
        .iter()
        .enumerate()
        .filter(|&(t, &q)| q > p || (q == p && t < target as usize))
        .count();
    better < m
}

/// Fraction of next items whose first token is in the model's top-`m`, given
/// the flattened history of previous items. Each user's sequence holds item
/// SIDs in interaction order.
pub fn code_recall_at_m(
    histories: &[Vec<Vec<TokenId>>],
    model: &NgramModel,
    m: usize,
) -> Result<f64> {
    let eoi = model.end_of_item();
    let (mut hits, mut total) = (0u64, 0u64);
    for user in histories {
        for i in 1..user.len() {
            let Some(&target) = user[i].first() else {
                continue;
            };
            let context = flatten_history(&user[..i], eoi);
            total += 1;
            hits += in_top(&model.distribution(&context), target, m) as u64;
        }
    }
    if total == 0 {
        return Err(Error::Empty("evaluable transitions"));
    }
    Ok(hits as f64 / total as f64)
}

/// Top-n token accuracy at one SID position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionAccuracy {
    pub position: usize,
    pub support: u64,
    /// `(n, accuracy)` per requested `n`.
    pub accuracy: Vec<(usize, f64)>,
}

/// For every SID position, how often the true token is in the top-`n` given
/// the history and the item's gold prefix.
pub fn per_position_accuracy(
    histories: &[Vec<Vec<TokenId>>],
    model: &NgramModel,
    top_ns: &[usize],
) -> Result<Vec<PositionAccuracy>> {
    let eoi = model.end_of_item();
    let mut hits: Vec<Vec<u64>> = Vec::new();
    let mut support: Vec<u64> = Vec::new();
    for user in histories {
        for i in 1..user.len() {
            let mut context = flatten_history(&user[..i], eoi);
            for (p, &tok) in user[i].iter().enumerate() {
                if support.len() <= p {
                    support.push(0);
                    hits.push(vec![0; top_ns.len()]);
                }
                let dist = model.distribution(&context);
                support[p] += 1;
                for (h, &n) in hits[p].iter_mut().zip(top_ns) {
                    *h += in_top(&dist, tok, n) as u64;
                }
                context.push(tok);
            }
        }
    }
    if support.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    Ok(support
        .iter()
        .zip(&hits)
        .enumerate()
        .map(|(position, (&s, h))| PositionAccuracy {
            position,
            support: s,
            accuracy: top_ns
                .iter()
                .zip(h)
                .map(|(&n, &c)| (n, c as f64 / s as f64))
                .collect(),
        })
        .collect())
}

/// SID length distribution and stop-cause breakdown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    /// `histogram[L − 1]` items have length `L`.
    pub histogram: Vec<u64>,
    pub mean: f64,
    /// Counts in [`StopCause::ALL`] order.
    pub stop_counts: [u64; 3],
    pub stop_fractions: [f64; 3],
}

pub fn length_and_stopping_stats(sids: &[SemanticId], max_depth: usize) -> Result<LengthStats> {
    if sids.is_empty() {
        return Err(Error::Empty("SID set"));
    }
    let mut histogram = vec![0u64; max_depth];
    let mut stop_counts = [0u64; 3];
    for sid in sids {
        if sid.is_empty() || sid.len() > max_depth {
            return Err(Error::invalid(format!(
                "SID length {} outside 1..={max_depth}",
                sid.len()
            )));
        }
        histogram[sid.len() - 1] += 1;
        stop_counts[StopCause::ALL
            .iter()
            .position(|c| *c == sid.stop_cause)
            .expect("known cause")] += 1;
    }
    let n = sids.len() as f64;
    let mean = sids.iter().map(SemanticId::len).sum::<usize>() as f64 / n;
    Ok(LengthStats {
        histogram,
        mean,
        stop_counts,
        stop_fractions: stop_counts.map(|c| c as f64 / n),
    })
}

/// Every tokenizer diagnostic for one tokenized item set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerReport {
    pub num_items: usize,
    pub collision_rate: f64,
    pub code_utilization: f64,
    pub gini: f64,
    pub intra_code_similarity: Option<f64>,
    pub code_recall_m: usize,
    pub code_recall: Option<f64>,
    pub length: LengthStats,
    pub residual_monotonicity_fraction: f64,
    pub per_position_accuracy: Vec<PositionAccuracy>,
}

impl TokenizerReport {
    /// Checks the documented metric ranges.
    pub fn check_invariants(&self) -> Result<()> {
        let n = self.num_items as f64;
        let fail = |what: &str| Err(Error::invalid(format!("report invariant violated: {what}")));
        if !(0.0..=1.0 - 1.0 / n + 1e-12).contains(&self.collision_rate) {
            return fail("collision rate range");
        }
        if !(self.code_utilization > 0.0 && self.code_utilization <= 1.0) {
            return fail("utilization range");
        }
        if !(0.0..1.0).contains(&self.gini) {
            return fail("gini range");
        }
        if self.length.stop_counts.iter().sum::<u64>() != self.num_items as u64 {
            return fail("stop causes do not cover every item");
        }
        if (self.length.stop_fractions.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return fail("stop fractions do not sum to one");
        }
        Ok(())
    }

    /// Flat `key=value` lines followed by CSV histogram lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let opt = |v: Option<f64>| v.map_or("none".to_string(), |x| x.to_string());
        let _ = writeln!(out, "num_items={}", self.num_items);
        let _ = writeln!(out, "collision_rate={}", self.collision_rate);
        let _ = writeln!(out, "code_utilization={}", self.code_utilization);
        let _ = writeln!(out, "gini={}", self.gini);
        let _ = writeln!(
            out,
            "intra_code_similarity={}",
            opt(self.intra_code_similarity)
        );
        let _ = writeln!(
            out,
            "code_recall_at_{}={}",
            self.code_recall_m,
            opt(self.code_recall)
        );
        let _ = writeln!(out, "mean_length={}", self.length.mean);
        for (cause, f) in StopCause::ALL.iter().zip(self.length.stop_fractions) {
            let _ = writeln!(out, "stop_fraction_{cause}={f}");
        }
        let _ = writeln!(
            out,
            "residual_monotonicity_fraction={}",
            self.residual_monotonicity_fraction
        );
        for p in &self.per_position_accuracy {
            for (n, a) in &p.accuracy {
                let _ = writeln!(out, "position_{}_top{}_accuracy={a}", p.position + 1, n);
            }
        }
        let _ = writeln!(out, "# length_histogram,length,count");
        for (i, c) in self.length.histogram.iter().enumerate() {
            let _ = writeln!(out, "length_histogram,{},{}", i + 1, c);
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::capsule::StackShape;
    use crate::decoder::ngram_fit;

    fn sid(tokens: &[usize], cause: StopCause) -> SemanticId {
        SemanticId {
            tokens: tokens.to_vec(),
            confidences: vec![0.5; tokens.len()],
            stop_cause: cause,
        }
    }

    fn quadratic_dedup(sids: &[SemanticId]) -> f64 {
        let mut distinct = 0;
        for i in 0..sids.len() {
            if (0..i).all(|j| sids[j].tokens != sids[i].tokens) {
                distinct += 1;
            }
        }
        1.0 - distinct as f64 / sids.len() as f64
    }

    fn gini_oracle(u: &[f64]) -> f64 {
        let mut s = 0.0;
        for a in u {
            for b in u {
                s += (a - b).abs();
            }
        }
        s / (2.0 * u.len() as f64 * u.iter().sum::<f64>())
    }

    #[test]
    fn collision_examples() {
        let distinct = vec![
            sid(&[0], StopCause::Cap),
            sid(&[0, 1], StopCause::Cap),
            sid(&[1], StopCause::Cap),
        ];
        assert_eq!(collision_rate(&distinct).unwrap(), 0.0);
        let same = vec![sid(&[2, 1], StopCause::Cap); 4];
        assert!((collision_rate(&same).unwrap() - 0.75).abs() < 1e-15);
        assert!(collision_rate(&[]).is_err());
    }

    #[test]
    fn utilization_examples() {
        let stack = CapsuleStack::random(&StackShape::uniform(2, 2, 3, 2), 0).unwrap();
        let all: Vec<_> = (0..3).map(|k| sid(&[k, k], StopCause::Cap)).collect();
        assert_eq!(code_utilization(&all, &stack).unwrap(), 1.0);
        assert_eq!(
            code_utilization(&[sid(&[1], StopCause::Confidence)], &stack).unwrap(),
            1.0 / 6.0
        );
        assert!(code_utilization(&[sid(&[3], StopCause::Confidence)], &stack).is_err());
    }

    #[test]
    fn gini_examples() {
        assert_eq!(gini(&[3.0, 3.0, 3.0]).unwrap(), 0.0);
        assert!((gini(&[1.0, 0.0, 0.0, 0.0]).unwrap() - 0.75).abs() < 1e-15);
        assert!(gini(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn intra_code_examples() {
        let items = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let s = vec![
            sid(&[0], StopCause::Cap),
            sid(&[0], StopCause::Cap),
            sid(&[1], StopCause::Cap),
        ];
        assert!((intra_code_similarity(&items, &s).unwrap().unwrap() - 1.0).abs() < 1e-12);
        let ortho = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let s2 = vec![sid(&[4], StopCause::Cap), sid(&[4, 1], StopCause::Cap)];
        assert_eq!(intra_code_similarity(&ortho, &s2).unwrap(), Some(0.0));
        let s3 = vec![sid(&[0], StopCause::Cap), sid(&[1], StopCause::Cap)];
        assert_eq!(intra_code_similarity(&ortho, &s3).unwrap(), None);
    }

    #[test]
    fn length_stats_examples() {
        let ones = vec![sid(&[0], StopCause::Confidence); 5];
        let st = length_and_stopping_stats(&ones, 3).unwrap();
        assert_eq!(st.mean, 1.0);
        assert_eq!(st.stop_fractions, [1.0, 0.0, 0.0]);
        assert_eq!(st.histogram, vec![5, 0, 0]);
        let capped = vec![sid(&[0, 1, 2], StopCause::Cap); 2];
        assert_eq!(
            length_and_stopping_stats(&capped, 3)
                .unwrap()
                .stop_fractions,
            [0.0, 0.0, 1.0]
        );
    }

    fn deterministic_histories() -> Vec<Vec<Vec<TokenId>>> {
        // Items alternate between SIDs [0, 1] and [2, 3] for every user.
        (0..4)
            .map(|_| {
                (0..6)
                    .map(|i| if i % 2 == 0 { vec![0, 1] } else { vec![2, 3] })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn recall_and_position_accuracy_on_deterministic_corpus() {
        let h = deterministic_histories();
        let flat: Vec<Vec<TokenId>> = h.iter().map(|u| flatten_history(u, 4)).collect();
        let model = ngram_fit(&flat, 3, 1e-3, 5).unwrap();
        assert_eq!(code_recall_at_m(&h, &model, 1).unwrap(), 1.0);
        let acc = per_position_accuracy(&h, &model, &[1, 5]).unwrap();
        assert_eq!(acc.len(), 2);
        for p in &acc {
            assert_eq!(p.accuracy, vec![(1, 1.0), (5, 1.0)]);
        }
    }

    #[test]
    fn recall_matches_per_transition_oracle() {
        let h: Vec<Vec<Vec<TokenId>>> = vec![
            vec![vec![0, 1], vec![2], vec![1, 3], vec![0]],
            vec![vec![3], vec![0, 2], vec![2, 2]],
        ];
        let flat: Vec<Vec<TokenId>> = h.iter().map(|u| flatten_history(u, 4)).collect();
        let model = ngram_fit(&flat, 2, 0.5, 5).unwrap();
        for m in 1..=5 {
            let (mut hits, mut total) = (0, 0);
            for u in &h {
                for i in 1..u.len() {
                    let ctx = flatten_history(&u[..i], 4);
                    let dist = model.distribution(&ctx);
                    let mut order: Vec<usize> = (0..5).collect();
                    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
                    total += 1;
                    hits += order[..m].contains(&(u[i][0] as usize)) as usize;
                }
            }
            assert_eq!(
                code_recall_at_m(&h, &model, m).unwrap(),
                hits as f64 / total as f64
            );
        }
        assert_eq!(code_recall_at_m(&h, &model, 5).unwrap(), 1.0);
        assert!(code_recall_at_m(&[vec![vec![0]]], &model, 1).is_err());
    }

    #[test]
    fn report_text_lists_every_metric() {
        let report = TokenizerReport {
            num_items: 2,
            collision_rate: 0.0,
            code_utilization: 0.5,
            gini: 0.25,
            intra_code_similarity: None,
            code_recall_m: 50,
            code_recall: Some(0.5),
            length: length_and_stopping_stats(
                &[
                    sid(&[0], StopCause::Confidence),
                    sid(&[0, 1], StopCause::Cap),
                ],
                2,
            )
            .unwrap(),
            residual_monotonicity_fraction: 1.0,
            per_position_accuracy: vec![],
        };
        report.check_invariants().unwrap();
        let text = report.to_text();
        for key in [
            "collision_rate=0",
            "intra_code_similarity=none",
            "code_recall_at_50=0.5",
            "length_histogram,2,1",
        ] {
            assert!(text.contains(key), "{key}");
        }
        let back: TokenizerReport = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(back, report);
    }

    proptest! {
        #[test]
        fn collision_rate_matches_quadratic_oracle(
            toks in prop::collection::vec(prop::collection::vec(0usize..3, 1..3), 1..30)
        ) {
            let sids: Vec<_> = toks.iter().map(|t| sid(t, StopCause::Cap)).collect();
            let got = collision_rate(&sids).unwrap();
            prop_assert!((got - quadratic_dedup(&sids)).abs() < 1e-15);
            let mut rev = sids.clone();
            rev.reverse();
            prop_assert_eq!(collision_rate(&rev).unwrap(), got);
        }

        #[test]
        fn gini_matches_pairwise_oracle_and_is_scale_invariant(
            u in prop::collection::vec(0.0f64..100.0, 1..20), s in 0.1f64..50.0
        ) {
            prop_assume!(u.iter().sum::<f64>() > 0.0);
            let g = gini(&u).unwrap();
            prop_assert!((g - gini_oracle(&u)).abs() < 1e-9);
            prop_assert!((0.0..1.0).contains(&g));
            let scaled: Vec<f64> = u.iter().map(|x| x * s).collect();
            prop_assert!((gini(&scaled).unwrap() - g).abs() < 1e-9);
        }

        #[test]
        fn recall_is_monotone_in_m(
            h in prop::collection::vec(prop::collection::vec(prop::collection::vec(0u32..4, 1..3), 2..5), 1..4)
        ) {
            let flat: Vec<Vec<TokenId>> = h.iter().map(|u| flatten_history(u, 4)).collect();
            let model = ngram_fit(&flat, 2, 0.5, 5).unwrap();
            let mut prev = 0.0;
            for m in 1..=5 {
                let r = code_recall_at_m(&h, &model, m).unwrap();
                prop_assert!(r >= prev);
                prev = r;
            }
            prop_assert_eq!(prev, 1.0);
        }

        #[test]
        fn utilization_matches_set_scan(
            toks in prop::collection::vec(prop::collection::vec(0usize..3, 1..3), 1..30)
        ) {
            let stack = CapsuleStack::random(&StackShape::uniform(2, 2, 3, 2), 0).unwrap();
            let sids: Vec<_> = toks.iter().map(|t| sid(t, StopCause::Cap)).collect();
            let set: HashSet<(usize, usize)> = sids.iter().flat_map(|s| s.codes()).collect();
            prop_assert_eq!(code_utilization(&sids, &stack).unwrap(), set.len() as f64 / 6.0);
        }
    }
}
