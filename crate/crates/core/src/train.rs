//! Minibatch cross-entropy training shared by both encoder stages.

use hier_tensor::{clip_grad_norm, mix64, Adam, AdamConfig, ParamSet, Tape, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CoreError, Result};
use crate::evalx::metrics::{score, MacroMetrics};

pub const DEGENERATE_LABELS: &str = "degenerate label distribution";

/// A two-class model over some example type.
pub trait Classifier: Sync {
    type Example: Sync;

    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    /// `[1, 2]` logits for one example.
    fn logits<'p>(&'p self, tape: &mut Tape<'p>, example: &Self::Example, train: bool) -> Result<Var>;
    fn target(example: &Self::Example) -> usize;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub clip_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub validation: Option<MacroMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub flags: Vec<String>,
}

/// Label 1 only when its logit is strictly larger, so ties go to 0.
pub fn argmax2(logits: &[f64]) -> usize {
    usize::from(logits[1] > logits[0])
}

/// Two-class softmax.
pub fn probabilities(logits: &[f64]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    [e0 / (e0 + e1), e1 / (e0 + e1)]
}

/// Inference-mode logits for every example, in order.
pub fn predict_logits<M: Classifier>(model: &M, examples: &[M::Example]) -> Result<Vec<[f64; 2]>> {
    examples
        .par_iter()
        .map(|ex| {
            let mut tape = Tape::inference(model.params());
            let l = model.logits(&mut tape, ex, false)?;
            let v = tape.value(l);
            Ok([v[0], v[1]])
        })
        .collect()
}

pub fn evaluate<M: Classifier>(model: &M, examples: &[M::Example]) -> Result<MacroMetrics> {
    let preds: Vec<usize> = predict_logits(model, examples)?.iter().map(|l| argmax2(l)).collect();
    let golds: Vec<usize> = examples.iter().map(M::target).collect();
    score(&preds, &golds)
}

/// Trains with Adam, evaluating on `val` after every epoch and restoring the
/// parameters of the epoch with the best validation accuracy (earliest on
/// ties; the last epoch when `val` is empty).
pub fn fit<M: Classifier>(model: &mut M, train: &[M::Example], val: &[M::Example], opts: &TrainOptions) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(CoreError::EmptyTrainingSet);
    }
    if opts.epochs == 0 {
        return Err(invalid("epochs must be at least 1"));
    }
    if opts.batch_size == 0 {
        return Err(invalid("batch_size must be at least 1"));
    }
    let mut flags = Vec::new();
    let first = M::target(&train[0]);
    if train.iter().all(|e| M::target(e) == first) {
        flags.push(DEGENERATE_LABELS.to_string());
    }

    let mut adam = Adam::new(
        model.params(),
        AdamConfig {
            lr: opts.lr,
            ..AdamConfig::default()
        },
    );
    let mut epochs = Vec::with_capacity(opts.epochs);
    let mut best: Option<(f64, usize, ParamSet)> = None;

    for epoch in 1..=opts.epochs {
        let epoch_seed = mix64(opts.seed, epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));

        let mut loss_total = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(opts.batch_size) {
            let mut grads: Option<Vec<Vec<f64>>> = None;
            for &i in batch {
                let mut tape = Tape::with_params(model.params());
                tape.set_dropout_seed(mix64(epoch_seed, i as u64));
                let logits = model.logits(&mut tape, &train[i], true)?;
                let target = M::target(&train[i]);
                if argmax2(tape.value(logits)) == target {
                    correct += 1;
                }
                let loss = tape.cross_entropy(logits, &[target])?;
                loss_total += tape.value(loss)[0];
                let g = tape.backward(loss)?.into_params();
                match grads.as_mut() {
                    None => grads = Some(g),
                    Some(acc) => {
                        for (a, x) in acc.iter_mut().zip(&g) {
                            a.iter_mut().zip(x).for_each(|(a, x)| *a += x);
                        }
                    }
                }
            }
            let mut grads = grads.expect("batch is non-empty");
            let inv = 1.0 / batch.len() as f64;
            grads.iter_mut().flatten().for_each(|g| *g *= inv);
            if let Some(max_norm) = opts.clip_norm {
                clip_grad_norm(&mut grads, max_norm);
            }
            adam.step(model.params_mut(), &grads)?;
        }

        let validation = if val.is_empty() { None } else { Some(evaluate(model, val)?) };
        let key = validation.as_ref().map_or(f64::INFINITY, |m| m.accuracy);
        let improved = match &best {
            None => true,
            Some((best_key, _, _)) => key > *best_key || (val.is_empty() && key >= *best_key),
        };
        if improved {
            best = Some((key, epoch, model.params().clone()));
        }
        epochs.push(EpochStats {
            epoch,
            train_loss: loss_total / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            validation,
        });
    }

    let (_, best_epoch, best_params) = best.expect("at least one epoch ran");
    model.params_mut().copy_from(&best_params)?;
    Ok(TrainReport {
        epochs,
        best_epoch,
        flags,
    })
}
