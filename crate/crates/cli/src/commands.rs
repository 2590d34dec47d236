use std::fs;
use std::path::Path;

use capsid::config::RunConfig;
use capsid::io::{sids_from_text, sids_to_text, EmbeddingTable, InteractionLog, SidRecord};
use capsid::pipeline::{self, save_ngram, TokenizerCheckpoint};
use capsid::sembpe::SubwordVocabulary;

use crate::error::CliError;

type Outcome = Result<String, CliError>;

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::at(path)(e.into()))
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => fs::create_dir_all(dir).map_err(|e| CliError::at(dir)(e.into())),
        None => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| CliError::at(path)(e.into()))
}

fn load_table(cfg: &RunConfig) -> Result<EmbeddingTable, CliError> {
    let p = cfg.path(&cfg.embeddings_path);
    EmbeddingTable::load(&p).map_err(CliError::at(p))
}

fn load_log(cfg: &RunConfig) -> Result<InteractionLog, CliError> {
    let p = cfg.path(&cfg.interactions_path);
    InteractionLog::load(&p).map_err(CliError::at(p))
}

fn load_checkpoint(cfg: &RunConfig) -> Result<TokenizerCheckpoint, CliError> {
    let p = cfg.path(&cfg.checkpoint_path);
    TokenizerCheckpoint::load(&p).map_err(CliError::at(p))
}

fn load_sids(cfg: &RunConfig) -> Result<Vec<SidRecord>, CliError> {
    let p = cfg.path(&cfg.sids_path);
    sids_from_text(&read_text(&p)?).map_err(CliError::at(p))
}

pub fn synth(cfg: &RunConfig) -> Outcome {
    let corpus = capsid::synth::synth_generate(&cfg.synth_config())?;
    let table_path = cfg.path(&cfg.embeddings_path);
    let log_path = cfg.path(&cfg.interactions_path);
    ensure_parent(&table_path)?;
    corpus
        .table
        .save(&table_path)
        .map_err(CliError::at(&table_path))?;
    ensure_parent(&log_path)?;
    corpus
        .log
        .save(&log_path)
        .map_err(CliError::at(&log_path))?;
    let boundary = corpus.is_boundary.iter().filter(|&&b| b).count();
    Ok(format!(
        "synth: {} items (d={}, {} boundary), {} users -> {}, {}",
        corpus.table.len(),
        corpus.table.dim(),
        boundary,
        corpus.log.users.len(),
        table_path.display(),
        log_path.display()
    ))
}

pub fn train(cfg: &RunConfig) -> Outcome {
    let table = load_table(cfg)?;
    let ckpt = pipeline::train_tokenizer(&table.item_vectors(), cfg)?;
    let out = cfg.path(&cfg.checkpoint_path);
    ensure_parent(&out)?;
    ckpt.save(&out).map_err(CliError::at(&out))?;
    let last = ckpt.history.last();
    Ok(format!(
        "train: {} items, {} epochs, final loss {:.4}, tau {:.4} -> {}",
        table.len(),
        ckpt.history.len(),
        last.map_or(f64::NAN, |h| h.total),
        ckpt.routing.tau,
        out.display()
    ))
}

pub fn tokenize(cfg: &RunConfig) -> Outcome {
    let ckpt = load_checkpoint(cfg)?;
    let table = load_table(cfg)?;
    let (records, monotone) = pipeline::tokenize_table(&table, &ckpt)?;
    let out = cfg.path(&cfg.sids_path);
    write_text(&out, &sids_to_text(&records))?;
    let mean = records.iter().map(|r| r.sid.len()).sum::<usize>() as f64 / records.len() as f64;
    Ok(format!(
        "tokenize: {} items, mean length {mean:.3}, residual monotonicity {monotone:.3} -> {}",
        records.len(),
        out.display()
    ))
}

pub fn bpe(cfg: &RunConfig) -> Outcome {
    let ckpt = load_checkpoint(cfg)?;
    let records = load_sids(cfg)?;
    let vocab = pipeline::fit_vocabulary(&records, &ckpt, cfg)?;
    let out = cfg.path(&cfg.vocab_path);
    write_text(&out, &vocab.to_text())?;
    Ok(format!(
        "bpe: {} merge rules, vocabulary {} -> {}",
        vocab.rules.len(),
        vocab.size(),
        out.display()
    ))
}

pub fn decode(cfg: &RunConfig, use_vocab: bool) -> Outcome {
    let ckpt = load_checkpoint(cfg)?;
    let records = load_sids(cfg)?;
    let log = load_log(cfg)?;
    let vocab = if use_vocab {
        let p = cfg.path(&cfg.vocab_path);
        Some(SubwordVocabulary::from_text(&read_text(&p)?).map_err(CliError::at(p))?)
    } else {
        None
    };
    let outcome = pipeline::decode_eval(&records, &ckpt, vocab.as_ref(), &log, cfg)?;
    let trie_path = cfg.path(&cfg.trie_path);
    write_text(&trie_path, &outcome.trie.to_text())?;
    let ngram_path = cfg.path(&cfg.ngram_path);
    ensure_parent(&ngram_path)?;
    save_ngram(&outcome.model, &ngram_path).map_err(CliError::at(&ngram_path))?;
    let out = cfg.path(&cfg.decode_path);
    write_text(&out, &outcome.to_text(cfg.top_k))?;
    Ok(format!(
        "decode: {} held-out users, recall@{} {:.4} -> {}",
        outcome.evaluated,
        cfg.top_k,
        outcome.recall_at_k,
        out.display()
    ))
}

pub fn diagnose(cfg: &RunConfig) -> Outcome {
    let ckpt = load_checkpoint(cfg)?;
    let table = load_table(cfg)?;
    let records = load_sids(cfg)?;
    let log = load_log(cfg)?;
    let report = pipeline::diagnose(&table, &ckpt, &records, &log, cfg)?;
    let text_path = cfg.path(&cfg.report_path);
    write_text(&text_path, &report.to_text())?;
    let json_path = cfg.path(&cfg.report_json_path);
    write_text(&json_path, &report.to_json())?;
    Ok(format!(
        "diagnose: collision {:.4}, utilization {:.4}, mean length {:.3} -> {}",
        report.collision_rate,
        report.code_utilization,
        report.length.mean,
        text_path.display()
    ))
}

pub fn check_theory(cfg: &RunConfig) -> Outcome {
    let ckpt = load_checkpoint(cfg)?;
    let table = load_table(cfg)?;
    let report = pipeline::check_theory(&table, &ckpt, cfg)?;
    let out = cfg.path(&cfg.theory_path);
    write_text(&out, &report.to_text())?;
    if report.reconstruction.violations > 0 {
        return Err(CliError::TheoryViolation {
            violations: report.reconstruction.violations,
            report: out,
        });
    }
    Ok(format!(
        "check-theory: reconstruction bound holds on {} items, mean length {:.3} vs bound {:.3} (holds: {}) -> {}",
        report.reconstruction.lhs.len(),
        report.length_bound.mean_length,
        report.length_bound.bound,
        report.length_bound.holds(),
        out.display()
    ))
}
