//! The stage loop shared by every trainable model.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::Trainee;
use super::optim::{clip_grad_norm, AdamW};
use super::runlog::RunLog;
use crate::error::{Error, Result};
use crate::eval::{accuracy, auroc};
use crate::nn::{derive_seed, seeded_rng, sigmoid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    /// Optimizer steps taken so far in the stage.
    pub step: usize,
    pub train_loss: f64,
    pub selection_auroc: Option<f64>,
    pub selection_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSettings {
    pub stage: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub max_steps: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct StageOutcome<M> {
    /// Parameters from the epoch with the best selection AUROC.
    pub best: M,
    pub history: Vec<EpochRecord>,
    pub steps: usize,
    pub best_epoch: usize,
}

/// One optimizer step. A non-finite loss is returned without touching the
/// parameters so the caller can abort.
pub fn train_step<M: Trainee>(
    model: &mut M,
    ctx: &M::Context,
    batch: &[&M::Sample],
    optim: &mut AdamW,
    grad_clip: f64,
    dropout_seed: u64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::arg("training batch is empty"));
    }
    let mut grad = model.zeros_like();
    let loss = model.loss_and_grad(ctx, batch, dropout_seed, &mut grad)?;
    if !loss.is_finite() {
        return Ok(loss);
    }
    clip_grad_norm(grad.trainable_mut(), grad_clip);
    optim.update(model.trainable_mut(), &grad.trainable())?;
    Ok(loss)
}

/// Inference-mode probabilities, computed in parallel, in input order.
pub fn predict_probs<M: Trainee>(model: &M, ctx: &M::Context, samples: &[M::Sample]) -> Result<Vec<f64>> {
    samples
        .par_iter()
        .map(|s| model.logit(ctx, s).map(sigmoid))
        .collect()
}

fn selection_metrics<M: Trainee>(model: &M, ctx: &M::Context, samples: &[M::Sample]) -> Result<(Option<f64>, Option<f64>)> {
    if samples.is_empty() {
        return Ok((None, None));
    }
    let probs = predict_probs(model, ctx, samples)?;
    let labels: Vec<u8> = samples.iter().map(M::label).collect();
    let acc = accuracy(&probs, &labels, 0.5)?;
    let auc = match auroc(&probs, &labels) {
        Ok(a) => Some(a),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok((auc, Some(acc)))
}

/// Runs one stage: seeded shuffling per epoch, AdamW with clipping, and
/// best-epoch selection by AUROC on `selection`. AUROC ties fall back to
/// selection accuracy, then to the later epoch.
pub fn train_stage<M: Trainee>(
    mut model: M,
    ctx: &M::Context,
    train: &[M::Sample],
    selection: &[M::Sample],
    settings: &StageSettings,
    log: &mut dyn RunLog,
) -> Result<StageOutcome<M>> {
    if train.is_empty() {
        return Err(Error::arg(format!("{}: training split is empty", settings.stage)));
    }
    if settings.batch_size == 0 {
        return Err(Error::config("batch_size", "must be positive"));
    }
    let mut optim = AdamW::new(settings.lr, settings.weight_decay);
    let mut history = Vec::new();
    let mut best: Option<((f64, f64), usize, M)> = None;
    let mut step = 0usize;
    let cap = settings.max_steps.unwrap_or(usize::MAX);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..settings.epochs {
        if step >= cap {
            break;
        }
        order.sort_unstable();
        order.shuffle(&mut seeded_rng(settings.seed, &format!("{}-shuffle-{epoch}", settings.stage)));
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(settings.batch_size) {
            if step >= cap {
                break;
            }
            let batch: Vec<&M::Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let dropout_seed = derive_seed(settings.seed, &format!("{}-dropout-{step}", settings.stage));
            let loss = train_step(&mut model, ctx, &batch, &mut optim, settings.grad_clip, dropout_seed)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    stage: settings.stage.clone(),
                    step,
                    loss,
                });
            }
            step += 1;
            loss_sum += loss;
            batches += 1;
            log.record(&settings.stage, step, loss, settings.lr)?;
        }
        let (sel_auc, sel_acc) = selection_metrics(&model, ctx, selection)?;
        history.push(EpochRecord {
            stage: settings.stage.clone(),
            epoch,
            step,
            train_loss: loss_sum / batches.max(1) as f64,
            selection_auroc: sel_auc,
            selection_accuracy: sel_acc,
        });
        let key = (
            sel_auc.unwrap_or(f64::NEG_INFINITY),
            sel_acc.unwrap_or(f64::NEG_INFINITY),
        );
        if best.as_ref().is_none_or(|(b, _, _)| key >= *b) {
            best = Some((key, epoch, model.clone()));
        }
    }
    let (best_epoch, best) = match best {
        Some((_, e, m)) => (e, m),
        None => (0, model),
    };
    Ok(StageOutcome {
        best,
        history,
        steps: step,
        best_epoch,
    })
}
