//! Local mini-batch training with best-checkpoint selection, and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::encoder::{argmax, forward, loss, loss_and_grad, Example};
use super::params::ParamVector;
use super::tem::{select_tokens, RetentionSchedule, TokenScorer};
use crate::crypto::Digest;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainHyper {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub val_fraction: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            batch_size: 8,
            learning_rate: 0.05,
            val_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean loss over the training split after the epoch.
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub steps: usize,
    pub max_grad_norm: f64,
    pub params_digest: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub retention: f64,
    pub train_size: usize,
    pub val_size: usize,
    pub initial_train_loss: f64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose checkpoint was returned; `None` when training did not run.
    pub best_epoch: Option<usize>,
    pub empty_dataset: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: ParamVector,
    pub trace: TrainTrace,
}

/// Retained indices for every sample at retention `k`.
pub fn retained_sets(data: &Dataset, k: f64, scorer: &dyn TokenScorer) -> Vec<Vec<usize>> {
    data.samples
        .iter()
        .map(|s| select_tokens(&scorer.score(s.tokens.view()), k))
        .collect()
}

fn examples<'a>(data: &'a Dataset, retained: &'a [Vec<usize>], idx: &[usize]) -> Vec<Example<'a>> {
    idx.iter()
        .map(|&i| Example {
            tokens: data.samples[i].tokens.view(),
            label: data.samples[i].label,
            retained: &retained[i],
        })
        .collect()
}

fn accuracy_on(params: &ParamVector, ex: &[Example<'_>]) -> Result<f64> {
    if ex.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for e in ex {
        let (logits, _) = forward(params, e.tokens, e.retained)?;
        hits += usize::from(argmax(&logits) == e.label);
    }
    Ok(hits as f64 / ex.len() as f64)
}

/// Trains for `epochs` epochs at the round's retention ratio and returns the
/// checkpoint with the highest accuracy on a held-back validation split
/// (earliest epoch on ties).
///
/// The split and the batch order are drawn from `rng_seed`. When the split
/// would leave the validation set empty the training split is used for
/// checkpoint selection instead.
#[allow(clippy::too_many_arguments)]
pub fn local_train(
    init: &ParamVector,
    data: &Dataset,
    epochs: usize,
    round: u32,
    sched: &RetentionSchedule,
    hyper: &TrainHyper,
    scorer: &dyn TokenScorer,
    rng_seed: [u8; 32],
) -> Result<TrainOutcome> {
    let k = sched.ratio(round)?;
    if data.is_empty() {
        return Ok(TrainOutcome {
            best: init.clone(),
            trace: TrainTrace {
                retention: k,
                empty_dataset: true,
                ..Default::default()
            },
        });
    }
    let mut rng = ChaCha20Rng::from_seed(rng_seed);
    let retained = retained_sets(data, k, scorer);

    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let val_size = (hyper.val_fraction * data.len() as f64).floor() as usize;
    let (val_idx, train_idx) = order.split_at(val_size.min(data.len() - 1));
    let mut train_idx = train_idx.to_vec();
    let val_ex = examples(data, &retained, val_idx);
    let train_ex_all = examples(data, &retained, &train_idx);
    let select_ex = if val_ex.is_empty() { &train_ex_all } else { &val_ex };

    let mut trace = TrainTrace {
        retention: k,
        train_size: train_idx.len(),
        val_size: val_ex.len(),
        initial_train_loss: loss(init, &train_ex_all)?,
        ..Default::default()
    };
    if epochs == 0 {
        return Ok(TrainOutcome {
            best: init.clone(),
            trace,
        });
    }

    let mut params = init.clone();
    let mut best: Option<(f64, usize, ParamVector)> = None;
    let batch = hyper.batch_size.max(1);
    for epoch in 1..=epochs {
        train_idx.shuffle(&mut rng);
        let mut steps = 0;
        let mut max_grad_norm: f64 = 0.0;
        for chunk in train_idx.chunks(batch) {
            let ex = examples(data, &retained, chunk);
            let (_, grad) = loss_and_grad(&params, &ex)?;
            max_grad_norm = max_grad_norm.max(grad.norm());
            params.add_scaled(-hyper.learning_rate, &grad)?;
            steps += 1;
        }
        let val_accuracy = accuracy_on(&params, select_ex)?;
        trace.epochs.push(EpochRecord {
            epoch,
            train_loss: loss(&params, &train_ex_all)?,
            val_accuracy,
            steps,
            max_grad_norm,
            params_digest: params.digest().to_hex(),
        });
        if best.as_ref().is_none_or(|(acc, _, _)| val_accuracy > *acc) {
            best = Some((val_accuracy, epoch, params.clone()));
        }
    }
    let (_, best_epoch, best_params) = best.expect("epochs >= 1");
    trace.best_epoch = Some(best_epoch);
    Ok(TrainOutcome {
        best: best_params,
        trace,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub total: usize,
    pub accuracy: f64,
    /// Per-class recall; `None` for classes absent from the data.
    pub recall: Vec<Option<f64>>,
}

/// Accuracy and per-class recall with tokens selected at retention `k`.
///
/// Accuracy of an empty dataset is reported as 0.
pub fn evaluate(params: &ParamVector, data: &Dataset, k: f64, scorer: &dyn TokenScorer) -> Result<Evaluation> {
    let c = params.config().num_classes;
    let mut hits = vec![0usize; c];
    let mut seen = vec![0usize; c];
    for s in &data.samples {
        let retained = select_tokens(&scorer.score(s.tokens.view()), k);
        let (logits, _) = forward(params, s.tokens.view(), &retained)?;
        seen[s.label] += 1;
        hits[s.label] += usize::from(argmax(&logits) == s.label);
    }
    let total: usize = seen.iter().sum();
    let correct: usize = hits.iter().sum();
    Ok(Evaluation {
        total,
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        recall: hits
            .iter()
            .zip(&seen)
            .map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64))
            .collect(),
    })
}

/// Parses a digest recorded in a trace.
pub fn trace_digest(hex: &str) -> Option<Digest> {
    if hex.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, b) in out.iter_mut().enumerate() {
        *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).ok()?;
    }
    Some(Digest(out))
}
