//! Flat `key=value` run configuration with typed parsing and strict key
//! checking.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::capsule::StackShape;
use crate::decoder::DecodeConfig;
use crate::error::{Error, Result};
use crate::io::lines_with_offsets;
use crate::routing::{RoutingConfig, RoutingMode};
use crate::schedule::AnnealSchedule;
use crate::sembpe::BpeConfig;
use crate::synth::SynthConfig;
use crate::training::{LossWeights, TrainConfig};

/// A value that can appear on the right of `key=value`.
pub trait ConfigValue: Sized {
    fn parse_value(raw: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! from_str_value {
    ($($ty:ty),*) => {$(
        impl ConfigValue for $ty {
            fn parse_value(raw: &str) -> std::result::Result<Self, String> {
                raw.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

from_str_value!(f64, usize, u64, bool, String);

impl ConfigValue for PathBuf {
    fn parse_value(raw: &str) -> std::result::Result<Self, String> {
        Ok(PathBuf::from(raw))
    }
    fn render(&self) -> String {
        self.display().to_string()
    }
}

impl ConfigValue for Option<f64> {
    fn parse_value(raw: &str) -> std::result::Result<Self, String> {
        match raw {
            "none" => Ok(None),
            v => v.parse().map(Some).map_err(|e| format!("{e}")),
        }
    }
    fn render(&self) -> String {
        self.map_or("none".into(), |v| v.to_string())
    }
}

impl ConfigValue for RoutingMode {
    fn parse_value(raw: &str) -> std::result::Result<Self, String> {
        match raw {
            "soft" => Ok(RoutingMode::Soft),
            "one_hot" => Ok(RoutingMode::OneHot),
            other => Err(format!("expected soft or one_hot, got {other:?}")),
        }
    }
    fn render(&self) -> String {
        match self {
            RoutingMode::Soft => "soft".into(),
            RoutingMode::OneHot => "one_hot".into(),
        }
    }
}

macro_rules! run_config {
    ($($(#[doc = $doc:literal])* $field:ident: $ty:ty = $default:expr,)*) => {
        /// Every tunable of a run. Defaults are the reference
        /// hyperparameters; [`RunConfig::desk`] scales the capsule layers
        /// down to the synthetic catalog.
        #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
        pub struct RunConfig {
            $($(#[doc = $doc])* pub $field: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $($field: $default,)* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),*];

            /// Sets one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let bad = |e: String| Error::Config(format!("{key}: {e}"));
                match key {
                    $(stringify!($field) => self.$field = <$ty as ConfigValue>::parse_value(value).map_err(bad)?,)*
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
                Ok(())
            }

            pub fn to_text(&self) -> String {
                let mut out = String::from("# capsid-config v1\n");
                $(let _ = writeln!(out, "{}={}", stringify!($field), ConfigValue::render(&self.$field));)*
                out
            }
        }
    };
}

run_config! {
    /// Capsules per depth `K`.
    capsules_per_depth: usize = 256,
    capsule_dim: usize = 64,
    iterations: usize = 3,
    max_depth: usize = 6,
    tau: f64 = 0.82,
    pose_gain: f64 = 1.0,
    epsilon: f64 = 0.08,
    routing_mode: RoutingMode = RoutingMode::Soft,
    /// When set, `τ` is re-calibrated after training so the mean SID length
    /// is as close as possible to this target without exceeding it.
    target_mean_length: Option<f64> = None,
    alpha: f64 = 0.6,
    theta_start: f64 = 0.90,
    theta_end: f64 = 0.55,
    n_min: u64 = 20,
    bpe_budget: usize = 64,
    use_gate: bool = true,
    lambda_reconstruction: f64 = 1.0,
    lambda_spread: f64 = 0.1,
    lambda_length: f64 = 0.05,
    lambda_bpe: f64 = 0.2,
    spread_margin_start: f64 = 0.2,
    spread_margin_end: f64 = 0.9,
    learning_rate: f64 = 0.05,
    epochs: usize = 30,
    batch_size: usize = 64,
    length_temperature: f64 = 0.1,
    cosine_decay: bool = true,
    ema_decay: f64 = 0.99,
    beam_size: usize = 50,
    max_decode_length: usize = 16,
    top_k: usize = 10,
    ngram_order: usize = 2,
    ngram_k: f64 = 0.1,
    recall_m: usize = 50,
    num_items: usize = 2000,
    dim: usize = 32,
    num_clusters: usize = 8,
    cluster_spread: f64 = 0.05,
    boundary_fraction: f64 = 0.0,
    num_users: usize = 400,
    history_length: usize = 20,
    stay_probability: f64 = 0.5,
    jump_probability: f64 = 0.1,
    /// Seed of the synthetic catalog.
    seed: u64 = 0,
    /// Seed of parameter initialization and batch shuffling.
    model_seed: u64 = 0,
    bootstrap_samples: usize = 1000,
    bootstrap_seed: u64 = 0,
    /// Relative paths below resolve against this directory.
    work_dir: PathBuf = PathBuf::from("."),
    embeddings_path: PathBuf = PathBuf::from("embeddings.bin"),
    interactions_path: PathBuf = PathBuf::from("interactions.txt"),
    checkpoint_path: PathBuf = PathBuf::from("tokenizer.ckpt"),
    sids_path: PathBuf = PathBuf::from("sids.txt"),
    vocab_path: PathBuf = PathBuf::from("vocab.txt"),
    trie_path: PathBuf = PathBuf::from("trie.txt"),
    ngram_path: PathBuf = PathBuf::from("ngram.bin"),
    decode_path: PathBuf = PathBuf::from("decoded.txt"),
    report_path: PathBuf = PathBuf::from("report.txt"),
    report_json_path: PathBuf = PathBuf::from("report.json"),
    theory_path: PathBuf = PathBuf::from("theory.txt"),
}

impl RunConfig {
    /// Settings for the synthetic catalog: one capsule per cluster, `d_c = d`,
    /// a shorter schedule and τ calibrated to a mean length of 2.
    pub fn desk() -> Self {
        let base = Self::default();
        Self {
            capsules_per_depth: base.num_clusters,
            capsule_dim: base.dim,
            learning_rate: 0.3,
            epochs: 20,
            target_mean_length: Some(2.0),
            recall_m: 5,
            ..base
        }
    }

    /// Parses `key=value` lines on top of `self`. `#` starts a comment line.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (start, line) in lines_with_offsets(text) {
            let line = line.trim();
            if let Some(rest) = line.strip_prefix("# capsid-config v") {
                let version: u32 = rest
                    .trim()
                    .parse()
                    .map_err(|_| Error::format(start, "bad config version"))?;
                if version > 1 {
                    return Err(Error::Version {
                        found: version,
                        supported: 1,
                    });
                }
                continue;
            }
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("byte {start}: expected key=value, got {line:?}"))
            })?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("byte {start}: {e}")))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn path(&self, relative: &Path) -> PathBuf {
        self.work_dir.join(relative)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.capsules_per_depth == 0 || self.capsule_dim == 0 || self.dim == 0 {
            return fail("capsules_per_depth, capsule_dim and dim must be positive");
        }
        if self.iterations == 0 || self.max_depth == 0 {
            return fail("iterations and max_depth must be positive");
        }
        if !(self.tau < 1.0) || !(self.epsilon >= 0.0) {
            return fail("tau must be below 1 and epsilon non-negative");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail("alpha must lie in [0, 1]");
        }
        if self.beam_size == 0 || self.top_k == 0 || self.recall_m == 0 || self.ngram_order == 0 {
            return fail("beam_size, top_k, recall_m and ngram_order must be positive");
        }
        if !(self.ngram_k > 0.0) {
            return fail("ngram_k must be positive");
        }
        if self.batch_size == 0 || !(self.learning_rate >= 0.0) {
            return fail("batch_size must be positive and learning_rate non-negative");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return fail("ema_decay must lie in [0, 1)");
        }
        self.synth_config().validate()
    }

    pub fn stack_shape(&self, input_dim: usize) -> StackShape {
        StackShape {
            pose_gain: self.pose_gain,
            ..StackShape::uniform(
                input_dim,
                self.capsule_dim,
                self.capsules_per_depth,
                self.max_depth,
            )
        }
    }

    pub fn routing_config(&self) -> RoutingConfig {
        RoutingConfig {
            iterations: self.iterations,
            tau: self.tau,
            epsilon: self.epsilon,
            max_depth: self.max_depth,
            mode: self.routing_mode,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let steps = self.epochs.saturating_sub(1);
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.model_seed,
            length_temperature: self.length_temperature,
            cosine_decay: self.cosine_decay,
            spread_margin: AnnealSchedule::linear(
                self.spread_margin_start,
                self.spread_margin_end,
                steps,
            ),
            merge_threshold: AnnealSchedule::linear(self.theta_start, self.theta_end, steps),
            n_min: self.n_min,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            reconstruction: self.lambda_reconstruction,
            spread: self.lambda_spread,
            length: self.lambda_length,
            bpe: self.lambda_bpe,
        }
    }

    pub fn bpe_config(&self) -> BpeConfig {
        BpeConfig {
            alpha: self.alpha,
            theta: AnnealSchedule::linear(
                self.theta_start,
                self.theta_end,
                self.bpe_budget.saturating_sub(1),
            ),
            n_min: self.n_min,
            budget: self.bpe_budget,
        }
    }

    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            beam_size: self.beam_size,
            max_length: self.max_decode_length,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            num_items: self.num_items,
            dim: self.dim,
            num_clusters: self.num_clusters,
            cluster_spread: self.cluster_spread,
            boundary_fraction: self.boundary_fraction,
            num_users: self.num_users,
            history_length: self.history_length,
            stay_probability: self.stay_probability,
            jump_probability: self.jump_probability,
            seed: self.seed,
        }
    }
}
