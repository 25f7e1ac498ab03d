//! Losses, optimizer, mini-batch training over cached features and the
//! repeated-split protocol.

mod loss;
mod optim;
mod protocol;

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{DataError, Dataset, Sample, Split};
use crate::metrics::EvalError;
use crate::model::{
    backward, forward_with_cache, predict, resolve_refs, retrieve_for, ModelConfig, ModelError, ModelState, ScoredRef,
};
use crate::numkit::{grad_check, GradCheckError, GradCheckReport, ParamRegistry, Rng};
use crate::retrieval::{ReferencePool, Strategy};

pub use loss::{
    loss_plcc, loss_plcc_grad, loss_rank, loss_rank_grad, loss_total, loss_total_grad, LossBreakdown, PLCC_EPS,
};
pub use optim::{adamw_step, lr_schedule, AdamW, AdamWConfig};
pub use protocol::{run_protocol, MeanStd, MetricSummary, ProtocolReport, RepeatReport};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0}")]
    Invalid(String),
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    GradCheck(#[from] GradCheckError),
}

impl TrainError {
    /// True for failures caused by NaN/inf arithmetic rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            TrainError::NonFiniteGradient(_)
                | TrainError::NonFiniteLoss { .. }
                | TrainError::GradCheck(_)
                | TrainError::Eval(EvalError::Degenerate { .. })
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub gamma: f64,
    pub warmup_frac: f64,
    /// Master seed for shuffling, dropout, random retrieval and splits.
    pub seed: u64,
    pub repeats: usize,
    pub train_frac: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            lr: 1e-5,
            weight_decay: 0.05,
            gamma: 0.3,
            warmup_frac: 0.1,
            seed: 0,
            repeats: 5,
            train_frac: 0.8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Invalid(format!("invalid train config: {m}")));
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2");
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0");
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return bad("gamma must be >= 0");
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return bad("warmup_frac must lie in [0, 1)");
        }
        if self.repeats == 0 {
            return bad("repeats must be >= 1");
        }
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return bad("train_frac must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Means over the epoch's batches, measured in training mode.
    pub plcc: f64,
    pub rank: f64,
    pub total: f64,
    /// Losses over the whole train split in eval mode after the epoch.
    pub train_loss: LossBreakdown,
    pub lr: f64,
    pub degenerate_batches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub steps: usize,
    pub n_train: usize,
    /// Samples per epoch left out because the tail batch had fewer than 2.
    pub dropped_per_epoch: usize,
    pub model_seed: u64,
    pub train_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

impl TrainReport {
    pub fn final_epoch(&self) -> &EpochStats {
        self.epochs.last().expect("at least one epoch")
    }

    pub fn without_timing(mut self) -> Self {
        self.wall_time_s = None;
        self
    }
}

/// One training example with its resolved references.
#[derive(Debug, Clone)]
pub struct BatchItem<'a> {
    pub sample: &'a Sample,
    pub refs: Vec<ScoredRef<'a>>,
}

fn mos_of(sample: &Sample) -> Result<f64, TrainError> {
    sample
        .mos
        .ok_or_else(|| TrainError::Invalid(format!("sample `{}` has no MOS", sample.id)))
}

/// Forward over the batch, total loss, and backward into `state.registry`
/// (gradients accumulate; callers zero them). Returns the loss and the
/// predictions.
pub fn batch_step(
    state: &mut ModelState,
    items: &[BatchItem<'_>],
    gamma: f64,
    training: bool,
    rng: &mut Rng,
) -> Result<(LossBreakdown, Vec<f64>), TrainError> {
    let mut preds = Vec::with_capacity(items.len());
    let mut caches = Vec::with_capacity(items.len());
    let mut mos = Vec::with_capacity(items.len());
    for item in items {
        let (score, _, cache) = forward_with_cache(item.sample, &item.refs, state, training, rng)?;
        preds.push(score);
        caches.push(cache);
        mos.push(mos_of(item.sample)?);
    }
    let (loss, grad) = loss_total_grad(&preds, &mos, gamma)?;
    for (cache, g) in caches.iter().zip(&grad) {
        backward(state, cache, *g);
    }
    Ok((loss, preds))
}

/// Finite-difference check of the full model under `loss_total` on one batch.
/// With `dropout_seed` set the batch runs in training mode under a fixed mask.
pub fn model_grad_check(
    state: &ModelState,
    items: &[BatchItem<'_>],
    gamma: f64,
    dropout_seed: Option<u64>,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport, TrainError> {
    let mut shell = state.clone();
    let mut reg = std::mem::take(&mut shell.registry);
    let mut failure = None;
    let report = grad_check(
        &mut reg,
        |reg: &mut ParamRegistry| {
            std::mem::swap(&mut shell.registry, reg);
            let mut rng = Rng::new(dropout_seed.unwrap_or(0));
            let out = batch_step(&mut shell, items, gamma, dropout_seed.is_some(), &mut rng);
            std::mem::swap(&mut shell.registry, reg);
            match out {
                Ok((loss, _)) => loss.total,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        h,
        tol,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(report?)
}

fn strategy_is_fixed(strategy: Strategy) -> bool {
    matches!(strategy, Strategy::Prompt | Strategy::Feature)
}

/// Trains a fresh model on the train split of `dataset`, retrieving
/// references from that split only.
pub fn train(
    dataset: &Dataset,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<(ModelState, TrainReport), TrainError> {
    train_config.validate()?;
    let start = Instant::now();
    let m = train_config.batch_size;
    let train_idx = dataset.indices(Split::Train);
    if train_idx.len() < 2 * m {
        return Err(TrainError::Invalid(format!(
            "train split has {} samples, need at least 2 x batch_size = {}",
            train_idx.len(),
            2 * m
        )));
    }
    for &i in &train_idx {
        mos_of(dataset.sample(i))?;
    }

    let pool = ReferencePool::from_dataset(dataset);
    let master = Rng::new(train_config.seed);
    let mut shuffle_rng = master.fork(0);
    let mut dropout_rng = master.fork(1);
    let mut retrieval_rng = master.fork(2);
    let mut measure_rng = master.fork(3);

    // prompt/feature graphs do not change during training
    let fixed: Vec<Vec<ScoredRef<'_>>> = if strategy_is_fixed(model_config.strategy) {
        let mut out = vec![Vec::new(); dataset.len()];
        for &i in &train_idx {
            let graph = retrieve_for(model_config, dataset.sample(i), &pool, None, &mut retrieval_rng)?;
            out[i] = resolve_refs(&graph, dataset)?;
        }
        out
    } else {
        Vec::new()
    };

    let mut state = ModelState::new(model_config.clone())?;
    let mut opt = AdamW::new(&state.registry, train_config.adamw());

    let tail = train_idx.len() % m;
    let dropped = if tail < 2 { tail } else { 0 };
    let steps_per_epoch = train_idx.len() / m + usize::from(tail >= 2);
    let total_steps = steps_per_epoch * train_config.epochs;
    let mut step = 0;
    let mut epochs = Vec::with_capacity(train_config.epochs);
    let mut order = train_idx.clone();

    for epoch in 0..train_config.epochs {
        shuffle_rng.shuffle(&mut order);
        let (mut sum_plcc, mut sum_rank, mut sum_total) = (0.0, 0.0, 0.0);
        let mut degenerate = 0;
        let mut lr = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(m).filter(|c| c.len() >= 2) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| dataset.sample(i)).collect();
            let mut items = Vec::with_capacity(chunk.len());
            for (&i, &sample) in chunk.iter().zip(&batch) {
                let refs = if strategy_is_fixed(model_config.strategy) {
                    fixed[i].clone()
                } else {
                    let batch_view = (model_config.strategy == Strategy::Batch).then_some(batch.as_slice());
                    let graph = retrieve_for(model_config, sample, &pool, batch_view, &mut retrieval_rng)?;
                    resolve_refs(&graph, dataset)?
                };
                items.push(BatchItem { sample, refs });
            }
            lr = lr_schedule(step, total_steps, train_config.lr, train_config.warmup_frac);
            let (loss, _) = batch_step(&mut state, &items, train_config.gamma, true, &mut dropout_rng)?;
            if !loss.total.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, step });
            }
            adamw_step(&mut state.registry, &mut opt, lr)?;
            sum_plcc += loss.plcc;
            sum_rank += loss.rank;
            sum_total += loss.total;
            degenerate += usize::from(loss.degenerate);
            batches += 1;
            step += 1;
        }
        let n = batches as f64;
        let train_loss = {
            let mut preds = Vec::with_capacity(train_idx.len());
            let mut mos = Vec::with_capacity(train_idx.len());
            for &i in &train_idx {
                let sample = dataset.sample(i);
                let refs = if strategy_is_fixed(model_config.strategy) {
                    fixed[i].clone()
                } else {
                    let graph = retrieve_for(model_config, sample, &pool, None, &mut measure_rng)?;
                    resolve_refs(&graph, dataset)?
                };
                preds.push(predict(sample, &refs, &state, false, &mut measure_rng)?.0);
                mos.push(mos_of(sample)?);
            }
            loss_total_grad(&preds, &mos, train_config.gamma)?.0
        };
        let stats = EpochStats {
            epoch: epoch + 1,
            plcc: sum_plcc / n,
            rank: sum_rank / n,
            total: sum_total / n,
            train_loss,
            lr,
            degenerate_batches: degenerate,
        };
        log::info!(
            "epoch {}/{}: batch loss {:.5} | train loss {:.5} (plcc {:.5}, rank {:.5}) | lr {:.3e}",
            stats.epoch,
            train_config.epochs,
            stats.total,
            stats.train_loss.total,
            stats.train_loss.plcc,
            stats.train_loss.rank,
            stats.lr
        );
        epochs.push(stats);
    }

    let report = TrainReport {
        epochs,
        steps: step,
        n_train: train_idx.len(),
        dropped_per_epoch: dropped,
        model_seed: model_config.seed,
        train_seed: train_config.seed,
        wall_time_s: Some(start.elapsed().as_secs_f64()),
    };
    Ok((state, report))
}
