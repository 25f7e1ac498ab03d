//! Repeated random-split experiments reported as mean ± std.

use serde::{Deserialize, Serialize};

use super::{train, TrainConfig, TrainError, TrainReport};
use crate::dataio::{random_split, Dataset, Split};
use crate::metrics::{evaluate, EvalResult};
use crate::model::ModelConfig;
use crate::numkit::Rng;
use crate::retrieval::ReferencePool;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3}±{:.3}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub srcc: MeanStd,
    pub plcc: MeanStd,
    pub krcc: MeanStd,
    pub rmse: MeanStd,
}

impl MetricSummary {
    pub fn of(results: &[EvalResult]) -> Self {
        let col = |f: fn(&EvalResult) -> f64| MeanStd::of(&results.iter().map(f).collect::<Vec<_>>());
        Self {
            srcc: col(|r| r.srcc),
            plcc: col(|r| r.plcc),
            krcc: col(|r| r.krcc),
            rmse: col(|r| r.rmse),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatReport {
    pub repeat: usize,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub test: EvalResult,
    pub train: TrainReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub repeats: Vec<RepeatReport>,
    pub summary: MetricSummary,
}

impl ProtocolReport {
    pub fn without_timing(mut self) -> Self {
        for r in &mut self.repeats {
            r.train.wall_time_s = None;
        }
        self
    }
}

/// Seed of repeat `r` under master seed `seed`.
pub fn repeat_seed(seed: u64, r: usize) -> u64 {
    Rng::new(seed).fork(r as u64).next_u64()
}

/// For each repeat: a fresh split, a model initialised from the repeat seed,
/// training on the train part and evaluation on the test part with the
/// train part as reference pool. Existing split labels are ignored.
pub fn run_protocol(
    dataset: &Dataset,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<ProtocolReport, TrainError> {
    train_config.validate()?;
    let mut repeats = Vec::with_capacity(train_config.repeats);
    for r in 0..train_config.repeats {
        let seed = repeat_seed(train_config.seed, r);
        let split = random_split(dataset, train_config.train_frac, seed)?;
        let mc = ModelConfig {
            seed,
            ..model_config.clone()
        };
        let tc = TrainConfig {
            seed,
            ..train_config.clone()
        };
        let (state, train_report) = train(&split, &mc, &tc)?;
        let pool = ReferencePool::from_dataset(&split);
        let test = evaluate(&state, &split, Split::Test, &pool)?;
        log::info!(
            "repeat {}/{}: test srcc {:.4} plcc {:.4}",
            r + 1,
            train_config.repeats,
            test.srcc,
            test.plcc
        );
        repeats.push(RepeatReport {
            repeat: r,
            seed,
            n_train: split.count(Split::Train),
            n_test: split.count(Split::Test),
            test,
            train: train_report,
        });
    }
    let results: Vec<EvalResult> = repeats.iter().map(|r| r.test).collect();
    Ok(ProtocolReport {
        summary: MetricSummary::of(&results),
        repeats,
    })
}
