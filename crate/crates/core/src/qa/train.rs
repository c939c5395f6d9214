//! Training loop and evaluation.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::adam::{clip_global_norm, AdamState};
use super::data::{generate_synthetic_cloze, Dataset, Vocabulary};
use super::model::{accumulate_document_gradients, argmax, document_logits, ModelParams};
use super::{AttentionMode, TrainConfig};

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mode: AttentionMode,
    pub seed: u64,
    pub train_loss: f64,
    pub valid_acc: f64,
    pub wall_ms: u64,
}

impl EpochRecord {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log: Vec<EpochRecord>,
    /// Validation accuracy before the first update.
    pub initial_valid_acc: f64,
    pub params: ModelParams,
}

impl TrainReport {
    pub fn final_valid_acc(&self) -> f64 {
        self.log.last().map_or(self.initial_valid_acc, |r| r.valid_acc)
    }

    /// First epoch whose validation accuracy reaches `threshold`.
    pub fn epochs_to_reach(&self, threshold: f64) -> Option<usize> {
        self.log.iter().find(|r| r.valid_acc >= threshold).map(|r| r.epoch)
    }

    /// Writes the log as one JSON object per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for r in &self.log {
            writeln!(out, "{}", r.to_json_line()?).map_err(|e| Error::io("writing training log", e))?;
        }
        Ok(())
    }
}

/// Generates the synthetic task from `cfg.seed` and trains on it.
pub fn train(cfg: &TrainConfig) -> Result<(TrainReport, Vocabulary)> {
    let (train_set, valid_set, vocab) = generate_synthetic_cloze(cfg, cfg.seed)?;
    let report = train_on(cfg, &train_set, &valid_set, &vocab)?;
    Ok((report, vocab))
}

pub fn train_on(cfg: &TrainConfig, train_set: &Dataset, valid_set: &Dataset, vocab: &Vocabulary) -> Result<TrainReport> {
    train_with_callback(cfg, train_set, valid_set, vocab, |_| {})
}

/// Like [`train_on`], calling `on_epoch` after every epoch.
pub fn train_with_callback<F: FnMut(&EpochRecord)>(
    cfg: &TrainConfig,
    train_set: &Dataset,
    valid_set: &Dataset,
    vocab: &Vocabulary,
    mut on_epoch: F,
) -> Result<TrainReport> {
    cfg.validate()?;
    if vocab.entity_count() == 0 {
        return Err(Error::Contract("vocabulary has no entities".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::random(cfg.mode, vocab.len(), vocab.entity_count(), cfg.d, cfg.k, &mut rng);
    let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let mut adam = AdamState::new(cfg.lr, &shapes);
    let initial_valid_acc = evaluate(&params, vocab, valid_set)?;

    let mut docs = train_set.documents();
    let total_steps = (cfg.epochs * docs.len().div_ceil(cfg.batch_size)).max(1);
    let mut step = 0usize;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        docs.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut examples = 0;
        for batch in docs.chunks(cfg.batch_size) {
            let count: usize = batch.iter().map(|d| d.len()).sum();
            if count == 0 {
                continue;
            }
            let weight = 1.0 / count as f64;
            let mut grads = params.zeros_like();
            for doc in batch {
                let stats = accumulate_document_gradients(&params, vocab, doc, weight, &mut grads)?;
                loss_sum += stats.loss_sum;
                examples += stats.examples;
            }
            if !loss_sum.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    msg: format!("training loss became {loss_sum} after {examples} examples"),
                });
            }
            let mut g = grads.tensors_mut();
            let norm = clip_global_norm(&mut g, cfg.clip_norm);
            if !norm.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    msg: format!("gradient norm became {norm}"),
                });
            }
            let g: Vec<&[f64]> = g.into_iter().map(|t| &*t).collect();
            let progress = step as f64 / total_steps as f64;
            adam.lr = cfg.lr * (1.0 - (1.0 - cfg.final_lr_fraction) * progress);
            step += 1;
            adam.update(&mut params.tensors_mut(), &g)?;
        }
        let record = EpochRecord {
            epoch,
            mode: cfg.mode,
            seed: cfg.seed,
            train_loss: if examples == 0 { 0.0 } else { loss_sum / examples as f64 },
            valid_acc: evaluate(&params, vocab, valid_set)?,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        log::info!(
            "epoch {epoch} mode {} loss {:.4} valid {:.4}",
            cfg.mode,
            record.train_loss,
            record.valid_acc
        );
        on_epoch(&record);
        log.push(record);
    }
    Ok(TrainReport {
        log,
        initial_valid_acc,
        params,
    })
}

/// Fraction of examples whose highest-scoring entity is the answer.
/// Answers outside the entity set count as wrong. An empty dataset scores 0.
pub fn evaluate(params: &ModelParams, vocab: &Vocabulary, dataset: &Dataset) -> Result<f64> {
    let mut correct = 0;
    let mut total = 0;
    for doc in dataset.documents() {
        let queries: Vec<&[usize]> = doc.iter().map(|e| e.query_tokens.as_slice()).collect();
        let logits = document_logits(params, &doc[0].doc_tokens, &queries)?;
        for (ex, l) in doc.iter().zip(&logits) {
            total += 1;
            if vocab.entity_slot(ex.answer).is_some_and(|slot| argmax(l.as_slice()) == slot) {
                correct += 1;
            }
        }
    }
    Ok(if total == 0 { 0.0 } else { correct as f64 / total as f64 })
}
