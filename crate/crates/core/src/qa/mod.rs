//! Cloze question answering with interchangeable attention blocks.
//!
//! Documents and queries are read by two independent GRU encoders. The
//! query encoder's last state `q` looks up the document through one of the
//! attention modes, and an affine head maps `[R; q]` to entity logits. Only
//! the attention block differs between modes.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::KeyValues;
use crate::error::{Error, Result};

pub mod adam;
pub mod data;
pub mod model;
pub mod train;

pub use adam::AdamState;
pub use data::{
    generate_synthetic_cloze, ingest_examples, ingest_examples_with_vocab, ClozeExample, Dataset,
    Vocabulary,
};
pub use model::{cross_entropy_loss, model_forward, Checkpoint, ModelParams};
pub use train::{evaluate, train, train_on, train_with_callback, EpochRecord, TrainReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// `[q; q]` into the head; the document is never read.
    None,
    Softmax,
    Linear,
    Gated,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 4] = [
        AttentionMode::None,
        AttentionMode::Softmax,
        AttentionMode::Linear,
        AttentionMode::Gated,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionMode::None => "none",
            AttentionMode::Softmax => "softmax",
            AttentionMode::Linear => "linear",
            AttentionMode::Gated => "gated",
        }
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(AttentionMode::None),
            "softmax" => Ok(AttentionMode::Softmax),
            "linear" => Ok(AttentionMode::Linear),
            "gated" | "gated-linear" => Ok(AttentionMode::Gated),
            other => Err(format!(
                "unknown attention mode {other:?} (expected none, softmax, linear or gated)"
            )),
        }
    }
}

/// Data and optimization settings for one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Hidden size of both encoders.
    pub k: usize,
    /// Word embedding size.
    pub d: usize,
    pub n_docs: usize,
    pub valid_docs: usize,
    pub doc_len: usize,
    /// Queries per document (`m`).
    pub queries_per_doc: usize,
    pub entities: usize,
    pub relations: usize,
    /// Size of the distractor word vocabulary.
    pub distractors: usize,
    pub facts_per_doc: usize,
    /// Probability that a filler position holds an entity outside any fact.
    pub mention_rate: f64,
    pub epochs: usize,
    /// Documents per optimizer step; each contributes all its queries.
    pub batch_size: usize,
    pub lr: f64,
    /// The learning rate decays linearly to `lr * final_lr_fraction` at the last step.
    pub final_lr_fraction: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub mode: AttentionMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 32,
            d: 32,
            n_docs: 2000,
            valid_docs: 500,
            doc_len: 60,
            queries_per_doc: 4,
            entities: 20,
            relations: 4,
            distractors: 40,
            facts_per_doc: 10,
            mention_rate: 0.0,
            epochs: 30,
            batch_size: 8,
            lr: 3e-3,
            final_lr_fraction: 0.1,
            clip_norm: 5.0,
            seed: 1,
            mode: AttentionMode::Gated,
        }
    }
}

const TRAIN_KEYS: &[&str] = &[
    "preset",
    "k",
    "d",
    "n_docs",
    "valid_docs",
    "doc_len",
    "queries_per_doc",
    "entities",
    "relations",
    "distractors",
    "facts_per_doc",
    "mention_rate",
    "epochs",
    "batch_size",
    "lr",
    "final_lr_fraction",
    "clip_norm",
    "seed",
    "mode",
    "dataset",
    "valid_dataset",
];

impl TrainConfig {
    /// Hidden and embedding sizes of 100.
    pub fn wide_preset() -> Self {
        TrainConfig {
            k: 100,
            d: 100,
            ..TrainConfig::default()
        }
    }

    /// Reads a `key = value` file. `preset = wide` starts from
    /// [`TrainConfig::wide_preset`]; `dataset`/`valid_dataset` are read by
    /// the caller.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(TRAIN_KEYS)?;
        let mut cfg = match kv.raw("preset") {
            None | Some("desk") => TrainConfig::default(),
            Some("wide") => TrainConfig::wide_preset(),
            Some(other) => return Err(Error::Contract(format!("unknown preset {other:?}"))),
        };
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = kv.get(stringify!($field))? { cfg.$field = v; })*
            };
        }
        set!(k, d, n_docs, valid_docs, doc_len, queries_per_doc, entities, relations);
        set!(distractors, facts_per_doc, mention_rate, epochs, batch_size, lr, final_lr_fraction, clip_norm, seed, mode);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_key_values(&KeyValues::from_file(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k", self.k),
            ("d", self.d),
            ("n_docs", self.n_docs),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Contract(format!("{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::Contract("final_lr_fraction must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.mention_rate) {
            return Err(Error::Contract("mention_rate must lie in [0, 1]".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.clip_norm > 0.0) {
            return Err(Error::Contract("lr and clip_norm must be positive".into()));
        }
        Ok(())
    }
}
