//! Scalar activations and dense kernels with their exact derivatives.
//!
//! Forward kernels are paired with `*_backward` functions that accumulate
//! into caller-owned gradient buffers, so composite layers can run a
//! reverse pass without a general-purpose tape.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::tensor::{ensure_len, ShapeError, Tensor};

/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;

/// Standard normal CDF via `erf`.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Exact GeLU, `x * Phi(x)`.
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub fn gelu_grad(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow for large `|x|`.
///
/// Floored at the smallest normal `f64` so the result stays strictly
/// positive where `exp(x)` underflows.
pub fn softplus(x: f64) -> f64 {
    let y = if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    };
    y.max(f64::MIN_POSITIVE)
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

pub fn gelu_tensor(x: &Tensor) -> Tensor {
    x.map(gelu)
}

pub fn sigmoid_tensor(x: &Tensor) -> Tensor {
    x.map(sigmoid)
}

/// `y = W x` for a row-major `[m, n]` matrix.
pub fn matvec(w: &Tensor, x: &[f64]) -> Result<Vec<f64>, ShapeError> {
    let (m, n) = (w.rows(), w.cols());
    if w.shape().len() != 2 || x.len() != n {
        return Err(ShapeError::Mismatch {
            op: "matvec",
            left: w.shape().to_vec(),
            right: vec![x.len()],
        });
    }
    let wd = w.data();
    Ok((0..m)
        .map(|i| wd[i * n..(i + 1) * n].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect())
}

/// `y = W x + b`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, ShapeError> {
    let mut y = matvec(w, x.data())?;
    if b.len() != y.len() {
        return Err(ShapeError::Mismatch {
            op: "linear",
            left: w.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    y.iter_mut().zip(b.data()).for_each(|(y, b)| *y += b);
    Ok(Tensor::vector(y))
}

/// Reverse pass of `y = W x (+ b)`.
///
/// Adds `dy ⊗ x` into `dw`, returns `Wᵀ dy`. The bias gradient is `dy`
/// itself and is left to the caller.
pub fn matvec_backward(w: &Tensor, x: &[f64], dy: &[f64], dw: &mut [f64]) -> Vec<f64> {
    let n = w.cols();
    let wd = w.data();
    let mut dx = vec![0.0; n];
    for (i, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &wd[i * n..(i + 1) * n];
        let drow = &mut dw[i * n..(i + 1) * n];
        for j in 0..n {
            drow[j] += g * x[j];
            dx[j] += g * row[j];
        }
    }
    dx
}

/// Values retained by [`layer_norm_forward`] for the reverse pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Vec<f64>,
    pub inv_std: f64,
}

pub fn layer_norm_forward(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    eps: f64,
) -> Result<(Vec<f64>, LayerNormCache), ShapeError> {
    ensure_len("layer_norm gain", gain, x.len())?;
    ensure_len("layer_norm bias", bias, x.len())?;
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    let normalized: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
    let y = normalized
        .iter()
        .zip(gain.iter().zip(bias))
        .map(|(h, (g, b))| h * g + b)
        .collect();
    Ok((y, LayerNormCache { normalized, inv_std }))
}

/// Returns `dx`, accumulating `dgain` and `dbias`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &[f64],
    dy: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let n = dy.len() as f64;
    let mut dxhat = vec![0.0; dy.len()];
    for i in 0..dy.len() {
        dgain[i] += dy[i] * cache.normalized[i];
        dbias[i] += dy[i];
        dxhat[i] = dy[i] * gain[i];
    }
    let sum_d: f64 = dxhat.iter().sum();
    let sum_dh: f64 = dxhat.iter().zip(&cache.normalized).map(|(a, b)| a * b).sum();
    dxhat
        .iter()
        .zip(&cache.normalized)
        .map(|(d, h)| cache.inv_std / n * (n * d - sum_d - h * sum_dh))
        .collect()
}

/// Layer normalization over a single vector, population variance.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor, ShapeError> {
    let (y, _) = layer_norm_forward(x.data(), gain.data(), bias.data(), eps)?;
    Ok(Tensor::vector(y))
}
