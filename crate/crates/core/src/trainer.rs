//! SGD training loop: teacher forcing over shuffled mini-batches, a halving
//! learning-rate schedule, inverted dropout after every layer, per-epoch
//! perplexity rows, and deterministic checkpointing.
//!
//! Reproducibility contract: per-example forward/backward runs on the rayon
//! pool, but example order inside a batch is fixed and the gradient
//! reduction folds results left to right, so runs are bit-identical at any
//! thread count with the same seed.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::checkpoint::save_model;
use crate::data::{EncodedPair, EOS_ID, PAD_ID};
use crate::error::{Error, Result};
use crate::model::{DropoutPlan, LossStats, Seq2Seq};
use crate::tensor::{Rng, Scalar};

/// Knobs for one training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    /// The learning rate is halved after every this many epochs.
    pub halve_every: usize,
    /// Keep probability; 1.0 turns dropout off.
    pub dropout_keep: f64,
    pub seed: u64,
    /// Global-norm gradient clipping threshold; off when unset.
    pub max_grad_norm: Option<f64>,
    /// Per-epoch checkpoints land here when set.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            initial_lr: 1.0,
            halve_every: 3,
            dropout_keep: 0.5,
            seed: 0,
            max_grad_norm: None,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::Config(format!(
                "initial_lr must be positive and finite, got {}",
                self.initial_lr
            )));
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return Err(Error::Config(format!(
                "dropout_keep must be in (0, 1], got {}",
                self.dropout_keep
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.halve_every == 0 {
            return Err(Error::Config("halve_every must be at least 1".into()));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!(
                    "max_grad_norm must be positive and finite, got {c}"
                )));
            }
        }
        Ok(())
    }

    /// Stepped halving schedule over 0-based epochs.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.initial_lr * 0.5f64.powi((epoch / self.halve_every) as i32)
    }
}

/// One teacher-forced example, possibly padded on the target side.
#[derive(Debug, Clone)]
pub struct Example {
    pub src: Vec<usize>,
    pub dec_in: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

impl Example {
    /// Decoder input starts at the end marker and the target sequence ends
    /// with it; `pad_to` extends the target side with masked padding.
    pub fn from_pair(pair: &EncodedPair, pad_to: usize) -> Example {
        let real = pair.tgt.len() + 1;
        let width = pad_to.max(real);
        let mut dec_in = Vec::with_capacity(width);
        dec_in.push(EOS_ID);
        dec_in.extend_from_slice(&pair.tgt);
        let mut targets = pair.tgt.clone();
        targets.push(EOS_ID);
        let mut mask = vec![true; real];
        dec_in.resize(width, PAD_ID);
        targets.resize(width, PAD_ID);
        mask.resize(width, false);
        Example { src: pair.src.clone(), dec_in, targets, mask }
    }
}

/// Pads every pair to the longest target in the batch.
pub fn build_batch(pairs: &[&EncodedPair]) -> Vec<Example> {
    let widest = pairs.iter().map(|p| p.tgt.len() + 1).max().unwrap_or(0);
    pairs.iter().map(|p| Example::from_pair(p, widest)).collect()
}

/// Mean-token cross-entropy over the batch plus its exact gradients.
/// `dropout` supplies one mask plan per example; examples run concurrently
/// and the reduction order is fixed, so the result does not depend on the
/// thread count.
pub fn batch_loss<F: Scalar>(
    model: &Seq2Seq<F>,
    batch: &[Example],
    dropout: Option<&[DropoutPlan]>,
) -> Result<(LossStats, Seq2Seq<F>)> {
    if batch.is_empty() {
        return Err(Error::Argument("batch is empty".into()));
    }
    if let Some(plans) = dropout {
        if plans.len() != batch.len() {
            return Err(Error::Argument(format!(
                "{} dropout plans for {} examples",
                plans.len(),
                batch.len()
            )));
        }
    }
    let real_tokens: usize = batch
        .iter()
        .map(|ex| ex.mask.iter().filter(|&&m| m).count())
        .sum();
    if real_tokens == 0 {
        return Err(Error::Argument("every position in the batch is padding".into()));
    }

    let per_example: Vec<(LossStats, Seq2Seq<F>)> = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let plan = dropout.map(|p| p[i]);
            model.sequence_grads(&ex.src, &ex.dec_in, &ex.targets, &ex.mask, plan)
        })
        .collect::<Result<_>>()?;

    let mut stats = LossStats::zero();
    let mut grads = model.zeros_like();
    for (s, g) in &per_example {
        stats.add(*s);
        grads.axpy_model(F::one(), g);
    }
    grads.scale(F::from_f64(1.0 / stats.tokens as f64));
    Ok((stats, grads))
}

/// In-place SGD update `p <- p - lr * g`, with optional global-norm
/// clipping. Returns the pre-clip gradient norm.
pub fn sgd_step<F: Scalar>(
    model: &mut Seq2Seq<F>,
    grads: &Seq2Seq<F>,
    lr: f64,
    max_grad_norm: Option<f64>,
) -> Result<f64> {
    let norm = grads.sq_norm().sqrt();
    if !norm.is_finite() {
        let tensor = grads.first_non_finite().unwrap_or_else(|| "unknown".into());
        return Err(Error::Numeric(format!("gradient for {tensor} is not finite")));
    }
    let scale = match max_grad_norm {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    model.axpy_model(F::from_f64(-lr * scale), grads);
    Ok(norm)
}

/// Teacher-forced loss over a whole split, no dropout, no padding.
pub fn evaluate_pairs<F: Scalar>(model: &Seq2Seq<F>, pairs: &[EncodedPair]) -> Result<LossStats> {
    if pairs.is_empty() {
        return Err(Error::Argument("evaluation split is empty".into()));
    }
    let mut stats = LossStats::zero();
    for p in pairs {
        let ex = Example::from_pair(p, 0);
        stats.add(model.sequence_loss(&ex.src, &ex.dec_in, &ex.targets, &ex.mask)?);
    }
    Ok(stats)
}

/// One learning-curve row; `seconds` is wall-clock and is the one column
/// excluded from reproducibility comparisons.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub epoch: usize,
    pub split: &'static str,
    pub perplexity: f64,
    pub lr: f64,
    pub seconds: f64,
}

/// Renders rows as `epoch,split,perplexity,lr,seconds` CSV.
pub fn curves_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from("epoch,split,perplexity,lr,seconds\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.17e},{},{:.3}\n",
            r.epoch, r.split, r.perplexity, r.lr, r.seconds
        ));
    }
    out
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub rows: Vec<CurveRow>,
    pub steps: usize,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainReport {
    /// Final training perplexity, for quick convergence checks.
    pub fn last_train_perplexity(&self) -> Option<f64> {
        self.rows.iter().rev().find(|r| r.split == "train").map(|r| r.perplexity)
    }

    pub fn last_valid_perplexity(&self) -> Option<f64> {
        self.rows.iter().rev().find(|r| r.split == "valid").map(|r| r.perplexity)
    }
}

fn diverged(epoch: usize, step: usize, inner: Error, last: Option<&Path>) -> Error {
    let kept = match last {
        Some(p) => format!("last good checkpoint: {}", p.display()),
        None => "no checkpoint was written yet".to_string(),
    };
    Error::Numeric(format!("training diverged at epoch {epoch}, step {step}: {inner}; {kept}"))
}

/// Runs the full schedule: shuffle, batch, step, report, checkpoint. The
/// model is updated in place; on divergence the error names the last
/// checkpoint still on disk.
pub fn train<F: Scalar>(
    model: &mut Seq2Seq<F>,
    train_pairs: &[EncodedPair],
    valid_pairs: &[EncodedPair],
    cfg: &TrainConfig,
    vocab_hash: u64,
    mut progress: impl FnMut(&CurveRow),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_pairs.is_empty() {
        return Err(Error::Argument("training corpus is empty".into()));
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut rng = Rng::new(cfg.seed);
    let mut order: Vec<usize> = (0..train_pairs.len()).collect();
    let mut report = TrainReport::default();
    let mut last_ckpt: Option<PathBuf> = None;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let started = Instant::now();
        rng.shuffle(&mut order);
        let mut epoch_stats = LossStats::zero();

        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&EncodedPair> = chunk.iter().map(|&i| &train_pairs[i]).collect();
            let batch = build_batch(&refs);
            let plans: Option<Vec<DropoutPlan>> = (cfg.dropout_keep < 1.0).then(|| {
                batch
                    .iter()
                    .map(|_| DropoutPlan { seed: rng.next_u64(), keep: cfg.dropout_keep })
                    .collect()
            });
            let step = report.steps;
            let (stats, grads) = batch_loss(model, &batch, plans.as_deref())
                .map_err(|e| diverged(epoch, step, e, last_ckpt.as_deref()))?;
            if !stats.mean_nll().is_finite() {
                let inner = Error::Numeric(format!("batch loss is {}", stats.mean_nll()));
                return Err(diverged(epoch, step, inner, last_ckpt.as_deref()));
            }
            sgd_step(model, &grads, lr, cfg.max_grad_norm)
                .map_err(|e| diverged(epoch, step, e, last_ckpt.as_deref()))?;
            epoch_stats.add(stats);
            report.steps += 1;
        }

        let row = CurveRow {
            epoch,
            split: "train",
            perplexity: epoch_stats.perplexity(),
            lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        progress(&row);
        report.rows.push(row);

        if !valid_pairs.is_empty() {
            let started = Instant::now();
            let vstats = evaluate_pairs(model, valid_pairs)?;
            let row = CurveRow {
                epoch,
                split: "valid",
                perplexity: vstats.perplexity(),
                lr,
                seconds: started.elapsed().as_secs_f64(),
            };
            progress(&row);
            report.rows.push(row);
        }

        if let Some(dir) = &cfg.checkpoint_dir {
            let path = dir.join(format!("epoch-{epoch}.ckpt"));
            save_model(&path, model, vocab_hash)?;
            save_model(&dir.join("model.ckpt"), model, vocab_hash)?;
            last_ckpt = Some(path.clone());
            report.checkpoints.push(path);
        }
    }
    Ok(report)
}
