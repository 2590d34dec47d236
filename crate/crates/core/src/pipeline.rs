//! End-to-end steps shared by the CLI and the integration tests. Each step
//! takes plain values so the CLI can pass them through files.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::capsule::CapsuleStack;
use crate::config::RunConfig;
use crate::decoder::{
    beam_search_constrained, build_trie, flatten_history, ngram_fit, NgramModel, RankedItem,
    SidTrie,
};
use crate::diagnostics::{
    code_recall_at_m, code_usage, code_utilization, collision_rate, gini, intra_code_similarity,
    length_and_stopping_stats, per_position_accuracy, TokenizerReport,
};
use crate::error::{Error, Result};
use crate::io::{load_container, save_container, EmbeddingTable, InteractionLog, SidRecord};
use crate::routing::{
    calibrate_tau, residual_monotonicity_fraction, tokenize_batch_traced, ItemVector,
    RoutingConfig, RoutingMode, SemanticId,
};
use crate::sembpe::{
    apply_merges_greedy, bpe_fit, MergeGate, SubwordVocabulary, TokenEmbeddings, TokenId,
    DEFAULT_GATE_HIDDEN,
};
use crate::theory::{
    check_length_bound, check_reconstruction_bound, check_routing_agreement, LengthBoundReport,
    ReconstructionBoundReport, RoutingAgreementReport,
};
use crate::training::{fit_tokenizer, EpochStats};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CSCK";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const NGRAM_MAGIC: &[u8; 4] = b"CSNG";
pub const NGRAM_VERSION: u32 = 1;

/// Fixed offset so the gate never shares a random stream with the stack.
const GATE_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

/// Everything `tokenize` needs from training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerCheckpoint {
    pub stack: CapsuleStack,
    pub routing: RoutingConfig,
    pub gate: Option<MergeGate>,
    pub history: Vec<EpochStats>,
}

impl TokenizerCheckpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ckpt: Self = load_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        ckpt.stack.validate()?;
        ckpt.routing.validate(&ckpt.stack)?;
        Ok(ckpt)
    }

    /// Base token ids of a SID: capsule `k` at depth `ℓ` maps to `offset_ℓ + k`.
    pub fn base_tokens(&self, sid: &SemanticId) -> Vec<TokenId> {
        sid.flat_tokens(&self.stack.code_offsets())
    }

    pub fn base_vocab_size(&self) -> u32 {
        self.stack.total_codes() as u32
    }
}

pub fn save_ngram(model: &NgramModel, path: impl AsRef<Path>) -> Result<()> {
    save_container(path, NGRAM_MAGIC, NGRAM_VERSION, model)
}

pub fn load_ngram(path: impl AsRef<Path>) -> Result<NgramModel> {
    load_container(path, NGRAM_MAGIC, NGRAM_VERSION)
}

/// Fits a fresh stack on `items`. Training always routes softly; the
/// configured routing mode only applies when the checkpoint is used.
pub fn train_tokenizer(items: &[ItemVector], cfg: &RunConfig) -> Result<TokenizerCheckpoint> {
    cfg.validate()?;
    let dim = items.first().ok_or(Error::Empty("training items"))?.dim();
    let mut stack = CapsuleStack::random(&cfg.stack_shape(dim), cfg.model_seed)?;
    stack.ema_decay = cfg.ema_decay;
    let gate = cfg.use_gate.then(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.model_seed.wrapping_add(GATE_SEED_OFFSET));
        MergeGate::random(cfg.capsule_dim, DEFAULT_GATE_HIDDEN, &mut rng)
    });
    let train_routing = RoutingConfig {
        mode: RoutingMode::Soft,
        ..cfg.routing_config()
    };
    let fit = fit_tokenizer(
        items,
        stack,
        gate,
        &train_routing,
        &cfg.train_config(),
        &cfg.loss_weights(),
    )?;
    let mut routing = cfg.routing_config();
    if let Some(target) = cfg.target_mean_length {
        routing.tau = calibrate_tau(items, &fit.stack, &routing, target)?;
    }
    Ok(TokenizerCheckpoint {
        stack: fit.stack,
        routing,
        gate: fit.gate,
        history: fit.history,
    })
}

/// Tokenizes every row of `table`, returning the records and the share of
/// residual updates that shrank the residual.
pub fn tokenize_table(
    table: &EmbeddingTable,
    ckpt: &TokenizerCheckpoint,
) -> Result<(Vec<SidRecord>, f64)> {
    let traced = tokenize_batch_traced(&table.item_vectors(), &ckpt.stack, &ckpt.routing)?;
    let monotone =
        residual_monotonicity_fraction(&traced.iter().map(|(_, t)| t.clone()).collect::<Vec<_>>());
    let records = table
        .ids()
        .iter()
        .zip(traced)
        .map(|(id, (sid, _))| SidRecord {
            item_id: id.clone(),
            sid,
        })
        .collect();
    Ok((records, monotone))
}

/// SemanticBPE over the per-item base token sequences, with centers as base
/// embeddings.
pub fn fit_vocabulary(
    records: &[SidRecord],
    ckpt: &TokenizerCheckpoint,
    cfg: &RunConfig,
) -> Result<SubwordVocabulary> {
    let corpus: Vec<Vec<TokenId>> = records.iter().map(|r| ckpt.base_tokens(&r.sid)).collect();
    let gate = if cfg.use_gate {
        ckpt.gate.as_ref()
    } else {
        None
    };
    bpe_fit(
        &corpus,
        &TokenEmbeddings::from_stack(&ckpt.stack),
        &cfg.bpe_config(),
        gate,
    )
}

/// Item id to its decode-time token sequence: merged when a vocabulary is
/// given, base tokens otherwise.
pub fn encode_items(
    records: &[SidRecord],
    ckpt: &TokenizerCheckpoint,
    vocab: Option<&SubwordVocabulary>,
) -> HashMap<String, Vec<TokenId>> {
    records
        .iter()
        .map(|r| {
            let base = ckpt.base_tokens(&r.sid);
            let tokens = vocab.map_or(base.clone(), |v| apply_merges_greedy(&base, v));
            (r.item_id.clone(), tokens)
        })
        .collect()
}

/// Users whose index is `4 (mod 5)` are held out for evaluation.
pub fn is_eval_user(user: usize) -> bool {
    user % 5 == 4
}

fn user_token_histories(
    log: &InteractionLog,
    encoded: &HashMap<String, Vec<TokenId>>,
) -> Result<Vec<Vec<Vec<TokenId>>>> {
    log.users
        .iter()
        .enumerate()
        .map(|(u, seq)| {
            seq.iter()
                .map(|id| {
                    encoded
                        .get(id)
                        .cloned()
                        .ok_or_else(|| Error::invalid(format!("user {u}: item {id:?} has no SID")))
                })
                .collect()
        })
        .collect()
}

fn split_users<T: Clone>(histories: &[T]) -> (Vec<T>, Vec<T>) {
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for (u, h) in histories.iter().enumerate() {
        if is_eval_user(u) {
            eval.push(h.clone());
        } else {
            train.push(h.clone());
        }
    }
    (train, eval)
}

/// Decoding run over held-out users: each user's last item is the target and
/// the earlier items are the context.
#[derive(Clone, Debug)]
pub struct DecodeOutcome {
    pub trie: SidTrie,
    pub model: NgramModel,
    pub recall_at_k: f64,
    pub evaluated: usize,
    /// `(user, target item, ranked items)` per evaluated user.
    pub rankings: Vec<(usize, String, Vec<RankedItem>)>,
}

impl DecodeOutcome {
    pub fn to_text(&self, k: usize) -> String {
        let mut out = String::from("# capsid-decoded v1\n");
        for (user, target, ranked) in &self.rankings {
            let _ = write!(out, "{user} {target}");
            for r in ranked.iter().take(k) {
                let _ = write!(out, " {}:{}", r.item, r.log_prob);
            }
            out.push('\n');
        }
        out
    }
}

pub fn decode_eval(
    records: &[SidRecord],
    ckpt: &TokenizerCheckpoint,
    vocab: Option<&SubwordVocabulary>,
    log: &InteractionLog,
    cfg: &RunConfig,
) -> Result<DecodeOutcome> {
    let vocab_size = vocab.map_or(ckpt.base_vocab_size(), SubwordVocabulary::size);
    let encoded = encode_items(records, ckpt, vocab);
    let trie = build_trie(
        records
            .iter()
            .map(|r| (r.item_id.as_str(), encoded[&r.item_id].as_slice())),
        vocab_size,
    )?;
    let histories = user_token_histories(log, &encoded)?;
    let eoi = trie.end_of_item();
    let (train, _) = split_users(&histories);
    let flat: Vec<Vec<TokenId>> = train.iter().map(|h| flatten_history(h, eoi)).collect();
    let model = ngram_fit(&flat, cfg.ngram_order, cfg.ngram_k, vocab_size + 1)?;

    let mut rankings = Vec::new();
    let mut hits = 0usize;
    for (user, seq) in log.users.iter().enumerate() {
        if !is_eval_user(user) || seq.len() < 2 {
            continue;
        }
        let context = flatten_history(&histories[user][..seq.len() - 1], eoi);
        let ranked = beam_search_constrained(&context, &model, &trie, &cfg.decode_config())?;
        let target = seq[seq.len() - 1].clone();
        hits += ranked.iter().take(cfg.top_k).any(|r| r.item == target) as usize;
        rankings.push((user, target, ranked));
    }
    let evaluated = rankings.len();
    Ok(DecodeOutcome {
        trie,
        model,
        recall_at_k: if evaluated == 0 {
            0.0
        } else {
            hits as f64 / evaluated as f64
        },
        evaluated,
        rankings,
    })
}

/// Aligns SID records to table rows by item id.
fn aligned_items(table: &EmbeddingTable, records: &[SidRecord]) -> Result<Vec<Vec<f64>>> {
    let index = table.index_of();
    records
        .iter()
        .map(|r| {
            let row = *index
                .get(r.item_id.as_str())
                .ok_or_else(|| Error::invalid(format!("SID for unknown item {:?}", r.item_id)))?;
            Ok(table.row(row).iter().map(|&v| f64::from(v)).collect())
        })
        .collect()
}

/// All tokenizer diagnostics. CodeRecall and per-position accuracy use a
/// base-token n-gram model fit on the training users and scored on the
/// held-out users.
pub fn diagnose(
    table: &EmbeddingTable,
    ckpt: &TokenizerCheckpoint,
    records: &[SidRecord],
    log: &InteractionLog,
    cfg: &RunConfig,
) -> Result<TokenizerReport> {
    let sids: Vec<SemanticId> = records.iter().map(|r| r.sid.clone()).collect();
    let items = aligned_items(table, records)?;
    let usage: Vec<f64> = code_usage(&sids, &ckpt.stack)?
        .into_iter()
        .map(|c| c as f64)
        .collect();
    let (_, monotone) = tokenize_table(table, ckpt)?;

    let encoded = encode_items(records, ckpt, None);
    let histories = user_token_histories(log, &encoded)?;
    let (train, eval) = split_users(&histories);
    let eoi = ckpt.base_vocab_size();
    let flat: Vec<Vec<TokenId>> = train.iter().map(|h| flatten_history(h, eoi)).collect();
    let (code_recall, per_position) = if flat.is_empty() || eval.iter().all(|h| h.len() < 2) {
        (None, Vec::new())
    } else {
        let model = ngram_fit(&flat, cfg.ngram_order, cfg.ngram_k, eoi + 1)?;
        (
            Some(code_recall_at_m(&eval, &model, cfg.recall_m)?),
            per_position_accuracy(&eval, &model, &[1, 5])?,
        )
    };
    let report = TokenizerReport {
        num_items: sids.len(),
        collision_rate: collision_rate(&sids)?,
        code_utilization: code_utilization(&sids, &ckpt.stack)?,
        gini: gini(&usage)?,
        intra_code_similarity: intra_code_similarity(&items, &sids)?,
        code_recall_m: cfg.recall_m,
        code_recall,
        length: length_and_stopping_stats(&sids, ckpt.routing.max_depth)?,
        residual_monotonicity_fraction: monotone,
        per_position_accuracy: per_position,
    };
    report.check_invariants()?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub reconstruction: ReconstructionBoundReport,
    pub length_bound: LengthBoundReport,
    pub agreement: RoutingAgreementReport,
}

impl TheoryReport {
    pub fn to_text(&self) -> String {
        format!(
            "{}{}{}",
            self.reconstruction.to_text(),
            self.length_bound.to_text(),
            self.agreement.to_text()
        )
    }
}

pub fn check_theory(
    table: &EmbeddingTable,
    ckpt: &TokenizerCheckpoint,
    cfg: &RunConfig,
) -> Result<TheoryReport> {
    let items = table.item_vectors();
    let reconstruction = check_reconstruction_bound(&items, &ckpt.stack, &ckpt.routing)?;
    let (records, _) = tokenize_table(table, ckpt)?;
    let sids: Vec<SemanticId> = records.into_iter().map(|r| r.sid).collect();
    let length_bound = check_length_bound(
        &sids,
        ckpt.routing.max_depth,
        cfg.bootstrap_samples,
        cfg.bootstrap_seed,
    )?;
    let agreement = check_routing_agreement(&items, &ckpt.stack, &ckpt.routing)?;
    Ok(TheoryReport {
        reconstruction,
        length_bound,
        agreement,
    })
}
