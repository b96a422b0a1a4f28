//! CALM pretraining and classification finetuning.
//!
//! Each sample gets its own tape; samples of a micro-batch run in parallel and
//! their gradients are summed in sample order, so results do not depend on
//! the thread count.

use psc_autodiff::{AdamW, AdamWConfig, AutodiffError, Gradients, Tape, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::auc;
use crate::model::{ContextModel, ModelInput, Stage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub micro_batch: usize,
    pub accumulation: usize,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping (finetuning only).
    pub patience: usize,
    /// Caps the optimizer steps per epoch; 0 means a full pass.
    pub max_steps_per_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            weight_decay: 0.01,
            max_grad_norm: 1.0,
            micro_batch: 8,
            accumulation: 1,
            epochs: 10,
            patience: 3,
            max_steps_per_epoch: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if self.micro_batch == 0 || self.accumulation == 0 {
            return Err(Error::config("train.micro_batch", "batch sizes must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be positive"));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.micro_batch * self.accumulation
    }

    fn optimizer(&self) -> AdamW {
        AdamW::new(AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            max_grad_norm: Some(self.max_grad_norm),
            ..AdamWConfig::default()
        })
    }
}

/// A classification example: model input and its up (1) / down (0) target.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub input: ModelInput,
    pub target: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CalmReport {
    /// Mean loss of every optimizer step.
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_auc: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_validation_auc: f64,
}

fn diverged(step: usize, op: &'static str) -> Error {
    Error::Divergence {
        step,
        source: AutodiffError::NonFinite { op },
    }
}

/// One optimizer step over `batch`; returns the mean loss.
fn step<F>(model: &mut ContextModel, opt: &mut AdamW, batch: &[usize], micro: usize, step_no: usize, loss: &F) -> Result<f64>
where
    F: Fn(&ContextModel, &mut Tape, usize) -> Result<Var> + Sync,
{
    let mut total = 0.0;
    for chunk in batch.chunks(micro) {
        let m = &*model;
        let results: Vec<(f64, Gradients)> = chunk
            .par_iter()
            .map(|&i| {
                let mut t = Tape::new();
                let l = loss(m, &mut t, i)?;
                let v = t.value(l).item()?;
                Ok((v, t.backward(l)?))
            })
            .collect::<Result<_>>()?;
        for (v, g) in &results {
            total += v;
            model.store.accumulate(g);
        }
    }
    let mean = total / batch.len() as f64;
    if !mean.is_finite() {
        model.store.zero_grads();
        return Err(diverged(step_no, "training loss"));
    }
    model.store.scale_grads(1.0 / batch.len() as f64);
    opt.step(&mut model.store).map_err(|source| Error::Divergence { step: step_no, source })?;
    Ok(mean)
}

fn epoch_batches(n: usize, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(cfg.batch_size()).map(<[usize]>::to_vec).collect();
    if cfg.max_steps_per_epoch > 0 {
        batches.truncate(cfg.max_steps_per_epoch);
    }
    batches
}

/// Trains summarizer, time embeddings and alignment on the next-token loss of
/// main articles given `n` contexts; the decoder stays frozen.
pub fn pretrain_calm(
    model: &mut ContextModel,
    inputs: &[ModelInput],
    n: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<CalmReport> {
    cfg.validate()?;
    if inputs.is_empty() {
        return Err(Error::Data("no pretraining samples".into()));
    }
    model.set_stage(Stage::Calm);
    let mut opt = cfg.optimizer();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = CalmReport::default();
    let loss = |m: &ContextModel, t: &mut Tape, i: usize| m.lm_loss(t, &inputs[i], n);
    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(inputs.len(), cfg, &mut rng);
        let mut sum = 0.0;
        for b in &batches {
            let l = step(model, &mut opt, b, cfg.micro_batch, report.step_losses.len(), &loss)?;
            report.step_losses.push(l);
            sum += l;
        }
        let mean = sum / batches.len() as f64;
        log::info!("calm epoch {}: loss {mean:.4}", epoch + 1);
        report.epoch_losses.push(mean);
    }
    Ok(report)
}

/// AUC of the model on `examples`; 0.5 when only one class is present.
pub fn validation_auc(model: &ContextModel, examples: &[Example], n: usize) -> Result<f64> {
    let inputs: Vec<ModelInput> = examples.iter().map(|e| e.input.clone()).collect();
    let scores = model.predict_batch(&inputs, n)?;
    let labels: Vec<bool> = examples.iter().map(|e| e.target > 0.5).collect();
    match auc(&scores, &labels) {
        Ok(a) => Ok(a),
        Err(Error::UndefinedAuc(_)) => Ok(0.5),
        Err(e) => Err(e),
    }
}

/// Binary cross-entropy finetuning with early stopping on validation AUC; the
/// best epoch's parameters are restored at the end.
pub fn finetune(
    model: &mut ContextModel,
    train: &[Example],
    validation: &[Example],
    n: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<FinetuneReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    if validation.is_empty() {
        return Err(Error::Data("empty validation split".into()));
    }
    model.set_stage(Stage::Finetune);
    let mut opt = cfg.optimizer();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let loss = |m: &ContextModel, t: &mut Tape, i: usize| m.bce_loss(t, &train[i].input, n, train[i].target);
    let mut report = FinetuneReport {
        best_validation_auc: f64::NEG_INFINITY,
        ..Default::default()
    };
    let mut best = model.store.clone();
    let mut steps = 0;
    let mut stale = 0;
    for epoch in 1..=cfg.epochs {
        let batches = epoch_batches(train.len(), cfg, &mut rng);
        let mut sum = 0.0;
        for b in &batches {
            sum += step(model, &mut opt, b, cfg.micro_batch, steps, &loss)?;
            steps += 1;
        }
        let train_loss = sum / batches.len() as f64;
        let validation_auc = validation_auc(model, validation, n)?;
        log::info!("finetune epoch {epoch}: loss {train_loss:.4}, validation AUC {validation_auc:.4}");
        report.epochs.push(EpochLog {
            epoch,
            train_loss,
            validation_auc,
        });
        if validation_auc > report.best_validation_auc {
            report.best_validation_auc = validation_auc;
            report.best_epoch = epoch;
            best.copy_values_from(&model.store);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience.max(1) {
                log::info!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    model.store.copy_values_from(&best);
    Ok(report)
}
