//! Correlation and error statistics between predictions and opinion scores.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{Dataset, Split};
use crate::model::{score_samples, ModelError, ModelState};
use crate::retrieval::ReferencePool;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("need at least {need} points, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("{metric}: degenerate input ({reason})")]
    Degenerate { metric: &'static str, reason: &'static str },
    #[error("{metric}: non-finite input")]
    NonFinite { metric: &'static str },
}

fn check(metric: &'static str, x: &[f64], y: &[f64], need: usize) -> Result<(), MetricError> {
    if x.len() != y.len() {
        return Err(MetricError::Length(x.len(), y.len()));
    }
    if x.len() < need {
        return Err(MetricError::TooFew { need, got: x.len() });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite { metric });
    }
    Ok(())
}

fn pearson_unchecked(metric: &'static str, x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricError::Degenerate {
            metric,
            reason: "constant input",
        });
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    check("pearson", x, y, 2)?;
    pearson_unchecked("pearson", x, y)
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && x[order[j]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    check("spearman", x, y, 2)?;
    pearson_unchecked("spearman", &average_ranks(x), &average_ranks(y))
}

/// tau-b from integer pair counts. Shared by the fast path and its oracle so
/// the two agree bit for bit whenever the counts agree.
pub fn tau_b_from_counts(
    concordant_minus_discordant: i64,
    pairs: u64,
    ties_x: u64,
    ties_y: u64,
) -> Result<f64, MetricError> {
    if ties_x == pairs || ties_y == pairs {
        return Err(MetricError::Degenerate {
            metric: "kendall",
            reason: "all pairs tied",
        });
    }
    let denom = ((pairs - ties_x) as f64 * (pairs - ties_y) as f64).sqrt();
    Ok((concordant_minus_discordant as f64 / denom).clamp(-1.0, 1.0))
}

fn tie_pairs(sorted: &[f64]) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Sorts `v` and returns the number of inversions (strictly decreasing pairs).
fn merge_count(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid], &mut buf[..mid]) + merge_count(&mut v[mid..], &mut buf[mid..]);
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// Kendall tau-b in O(n log n).
pub fn kendall(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    check("kendall", x, y, 2)?;
    let n = x.len();
    // fold -0.0 into 0.0 so total_cmp grouping agrees with ==
    let x: Vec<f64> = x.iter().map(|v| v + 0.0).collect();
    let y: Vec<f64> = y.iter().map(|v| v + 0.0).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(y[a].total_cmp(&y[b])));
    let xs: Vec<f64> = order.iter().map(|&i| x[i]).collect();
    let mut ys: Vec<f64> = order.iter().map(|&i| y[i]).collect();

    let pairs = (n as u64) * (n as u64 - 1) / 2;
    let ties_x = tie_pairs(&xs);
    let mut ties_xy = 0u64;
    let mut run = 1u64;
    for i in 1..n {
        if xs[i] == xs[i - 1] && ys[i] == ys[i - 1] {
            run += 1;
        } else {
            ties_xy += run * (run - 1) / 2;
            run = 1;
        }
    }
    ties_xy += run * (run - 1) / 2;

    let mut buf = vec![0.0; n];
    let discordant = merge_count(&mut ys, &mut buf);
    let ties_y = tie_pairs(&ys);
    // concordant - discordant = P - Tx - Ty + Txy - 2D
    let s = pairs as i64 - ties_x as i64 - ties_y as i64 + ties_xy as i64 - 2 * discordant as i64;
    tau_b_from_counts(s, pairs, ties_x, ties_y)
}

pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64, MetricError> {
    check("rmse", pred, target, 1)?;
    let sse: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sse / pred.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub srcc: f64,
    pub plcc: f64,
    pub krcc: f64,
    pub rmse: f64,
    pub n: usize,
}

impl EvalResult {
    pub fn compute(pred: &[f64], mos: &[f64]) -> Result<Self, MetricError> {
        Ok(Self {
            srcc: spearman(pred, mos)?,
            plcc: pearson(pred, mos)?,
            krcc: kendall(pred, mos)?,
            rmse: rmse(pred, mos)?,
            n: pred.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub mos: f64,
    pub score: f64,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("split has no samples")]
    EmptySplit,
    #[error("sample `{0}` has no MOS")]
    MissingMos(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{source} (rmse = {rmse})")]
    Degenerate { rmse: f64, source: MetricError },
}

/// Scores every sample of `split` in eval mode against references from
/// `pool` and returns the per-sample predictions with their metrics.
pub fn evaluate_with_predictions(
    state: &ModelState,
    dataset: &Dataset,
    split: Split,
    pool: &ReferencePool,
) -> Result<(EvalResult, Vec<Prediction>), EvalError> {
    let indices = dataset.indices(split);
    if indices.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let mut mos = Vec::with_capacity(indices.len());
    for &i in &indices {
        let s = dataset.sample(i);
        mos.push(s.mos.ok_or_else(|| EvalError::MissingMos(s.id.clone()))?);
    }
    let scores = score_samples(state, dataset, &indices, pool)?;
    let preds: Vec<Prediction> = indices
        .iter()
        .zip(mos)
        .zip(scores)
        .map(|((&i, mos), (score, _))| Prediction {
            id: dataset.sample(i).id.clone(),
            mos,
            score,
        })
        .collect();
    let p: Vec<f64> = preds.iter().map(|p| p.score).collect();
    let m: Vec<f64> = preds.iter().map(|p| p.mos).collect();
    match EvalResult::compute(&p, &m) {
        Ok(r) => Ok((r, preds)),
        Err(source) => Err(EvalError::Degenerate {
            rmse: rmse(&p, &m).unwrap_or(f64::NAN),
            source,
        }),
    }
}

pub fn evaluate(
    state: &ModelState,
    dataset: &Dataset,
    split: Split,
    pool: &ReferencePool,
) -> Result<EvalResult, EvalError> {
    evaluate_with_predictions(state, dataset, split, pool).map(|(r, _)| r)
}
