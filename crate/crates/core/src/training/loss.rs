//! Correlation and pairwise ranking objectives over a mini-batch.

use serde::{Deserialize, Serialize};

use super::TrainError;

/// Floor on the Pearson denominator.
pub const PLCC_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub plcc: f64,
    pub rank: f64,
    pub total: f64,
    /// The batch MOS (or predictions) had no spread and the epsilon floor was hit.
    pub degenerate: bool,
}

fn check_pair(pred: &[f64], mos: &[f64], min: usize) -> Result<(), TrainError> {
    if pred.len() != mos.len() {
        return Err(TrainError::Invalid(format!(
            "prediction/MOS length mismatch: {} vs {}",
            pred.len(),
            mos.len()
        )));
    }
    if pred.len() < min {
        return Err(TrainError::Invalid(format!(
            "loss needs at least {min} samples, got {}",
            pred.len()
        )));
    }
    Ok(())
}

fn centered(v: &[f64]) -> Vec<f64> {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - mean).collect()
}

/// `½(1 − r)` and its gradient with respect to `pred`; the flag reports a
/// floored denominator.
pub fn loss_plcc_grad(pred: &[f64], mos: &[f64]) -> Result<(f64, Vec<f64>, bool), TrainError> {
    check_pair(pred, mos, 2)?;
    let yc = centered(pred);
    let sc = centered(mos);
    let num: f64 = yc.iter().zip(&sc).map(|(a, b)| a * b).sum();
    let syy: f64 = yc.iter().map(|a| a * a).sum();
    let sss: f64 = sc.iter().map(|b| b * b).sum();
    // sqrt of the product (not the product of roots) keeps r == 1 exact when pred == mos
    let raw_den = (syy * sss).sqrt();
    let degenerate = !(raw_den > PLCC_EPS);
    let den = raw_den.max(PLCC_EPS);
    let r = num / den;
    let loss = 0.5 * (1.0 - r.clamp(-1.0, 1.0));
    let grad = if degenerate {
        sc.iter().map(|s| -0.5 * s / den).collect()
    } else {
        yc.iter()
            .zip(&sc)
            .map(|(y, s)| -0.5 * (s / den - num * y / (syy * den)))
            .collect()
    };
    Ok((loss, grad, degenerate))
}

pub fn loss_plcc(pred: &[f64], mos: &[f64]) -> Result<f64, TrainError> {
    loss_plcc_grad(pred, mos).map(|(l, _, _)| l)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Pairwise hinge over all `m²` ordered pairs; the kink has zero subgradient.
pub fn loss_rank_grad(pred: &[f64], mos: &[f64]) -> Result<(f64, Vec<f64>), TrainError> {
    check_pair(pred, mos, 1)?;
    let m = pred.len();
    let scale = 1.0 / (m * m) as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; m];
    for i in 0..m {
        for j in 0..m {
            let ds = mos[i] - mos[j];
            let e = sign(ds);
            let term = ds.abs() - e * (pred[i] - pred[j]);
            if term > 0.0 {
                total += term;
                grad[i] -= e * scale;
                grad[j] += e * scale;
            }
        }
    }
    Ok((total * scale, grad))
}

pub fn loss_rank(pred: &[f64], mos: &[f64]) -> Result<f64, TrainError> {
    loss_rank_grad(pred, mos).map(|(l, _)| l)
}

/// `L_plcc + γ·L_rank` with the gradient with respect to `pred`.
pub fn loss_total_grad(pred: &[f64], mos: &[f64], gamma: f64) -> Result<(LossBreakdown, Vec<f64>), TrainError> {
    let (plcc, g_plcc, degenerate) = loss_plcc_grad(pred, mos)?;
    let (rank, g_rank) = loss_rank_grad(pred, mos)?;
    let grad = g_plcc.iter().zip(&g_rank).map(|(a, b)| a + gamma * b).collect();
    Ok((
        LossBreakdown {
            plcc,
            rank,
            total: plcc + gamma * rank,
            degenerate,
        },
        grad,
    ))
}

pub fn loss_total(pred: &[f64], mos: &[f64], gamma: f64) -> Result<f64, TrainError> {
    loss_total_grad(pred, mos, gamma).map(|(b, _)| b.total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plcc_examples() {
        let mos = [10.0, 35.0, 20.0, 80.0];
        assert_eq!(loss_plcc(&mos, &mos).unwrap(), 0.0);
        let neg: Vec<f64> = mos.iter().map(|v| -v).collect();
        assert!((loss_plcc(&neg, &mos).unwrap() - 1.0).abs() < 1e-15);
        let aff: Vec<f64> = mos.iter().map(|v| 2.0 * v + 7.0).collect();
        assert!(loss_plcc(&aff, &mos).unwrap().abs() < 1e-15);
        assert!(loss_plcc(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn plcc_constant_mos_is_flagged() {
        let (l, g, degenerate) = loss_plcc_grad(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]).unwrap();
        assert!(degenerate);
        assert_eq!(l, 0.5);
        assert!(g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rank_examples() {
        assert_eq!(loss_rank(&[1.0, 3.0], &[1.0, 3.0]).unwrap(), 0.0);
        assert_eq!(loss_rank(&[3.0, 1.0], &[1.0, 3.0]).unwrap(), 2.0);
        assert_eq!(loss_rank(&[4.2], &[0.3]).unwrap(), 0.0);
    }

    #[test]
    fn total_examples() {
        let pred = [0.3, 0.9, 0.1, 0.5];
        let mos = [1.0, 4.0, 2.0, 2.0];
        assert_eq!(loss_total(&pred, &mos, 0.0).unwrap(), loss_plcc(&pred, &mos).unwrap());
        assert_eq!(loss_total(&mos, &mos, 0.3).unwrap(), 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let pred = [0.3, 0.9, 0.1, 0.5, -0.2];
        let mos = [1.0, 4.0, 2.0, 2.5, 0.0];
        let (_, g) = loss_total_grad(&pred, &mos, 0.3).unwrap();
        let h = 1e-6;
        for i in 0..pred.len() {
            let mut p = pred;
            p[i] += h;
            let up = loss_total(&p, &mos, 0.3).unwrap();
            p[i] -= 2.0 * h;
            let down = loss_total(&p, &mos, 0.3).unwrap();
            let fd = (up - down) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-7, "{i}: {fd} vs {}", g[i]);
        }
    }
}
