//! Registry-backed layers: each holds [`ParamId`]s and runs forward/backward
//! against a [`ParamRegistry`].

use serde::{Deserialize, Serialize};

use super::ops::{self, LayerNormCache};
use super::tensor::{ensure_len, ShapeError, Tensor};
use super::{ParamId, ParamRegistry, RegistryError, Rng};

/// Xavier/Glorot uniform bound.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let bound = xavier_bound(cols, rows);
    let data = (0..rows * cols).map(|_| rng.uniform_range(-bound, bound)).collect();
    Tensor::from_vec(&[rows, cols], data).expect("shape is consistent by construction")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => ops::relu(x),
            Activation::Gelu => ops::gelu(x),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => ops::relu_grad(x),
            Activation::Gelu => ops::gelu_grad(x),
        }
    }
}

/// Affine map `y = W x (+ b)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        reg: &mut ParamRegistry,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        with_bias: bool,
        rng: &mut Rng,
    ) -> Result<Self, RegistryError> {
        let weight = reg.register(format!("{name}.weight"), xavier_uniform(out_dim, in_dim, rng))?;
        let bias = if with_bias {
            Some(reg.register(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, reg: &ParamRegistry, x: &[f64]) -> Result<Vec<f64>, ShapeError> {
        let mut y = ops::matvec(reg.value(self.weight), x)?;
        if let Some(b) = self.bias {
            y.iter_mut().zip(reg.value(b).data()).for_each(|(y, b)| *y += b);
        }
        Ok(y)
    }

    /// Accumulates parameter gradients and returns `dx`.
    pub fn backward(&self, reg: &mut ParamRegistry, x: &[f64], dy: &[f64]) -> Vec<f64> {
        if let Some(b) = self.bias {
            reg.grad_mut(b).data_mut().iter_mut().zip(dy).for_each(|(g, d)| *g += d);
        }
        let (w, dw) = reg.value_and_grad_mut(self.weight);
        ops::matvec_backward(w, x, dy, dw.data_mut())
    }
}

/// Layer normalization with learnable gain and bias.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(reg: &mut ParamRegistry, name: &str, dim: usize, eps: f64) -> Result<Self, RegistryError> {
        let gain = reg.register(format!("{name}.gain"), Tensor::filled(&[dim], 1.0))?;
        let bias = reg.register(format!("{name}.bias"), Tensor::zeros(&[dim]))?;
        Ok(Self { gain, bias, dim, eps })
    }

    pub fn forward(&self, reg: &ParamRegistry, x: &[f64]) -> Result<(Vec<f64>, LayerNormCache), ShapeError> {
        ops::layer_norm_forward(x, reg.value(self.gain).data(), reg.value(self.bias).data(), self.eps)
    }

    pub fn backward(&self, reg: &mut ParamRegistry, cache: &LayerNormCache, dy: &[f64]) -> Vec<f64> {
        let gain = reg.value(self.gain).data().to_vec();
        let mut dgain = vec![0.0; self.dim];
        let mut dbias = vec![0.0; self.dim];
        let dx = ops::layer_norm_backward(cache, &gain, dy, &mut dgain, &mut dbias);
        accumulate(reg, self.gain, &dgain);
        accumulate(reg, self.bias, &dbias);
        dx
    }
}

fn accumulate(reg: &mut ParamRegistry, id: ParamId, delta: &[f64]) {
    reg.grad_mut(id)
        .data_mut()
        .iter_mut()
        .zip(delta)
        .for_each(|(g, d)| *g += d);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlpLayer {
    pub linear: Linear,
    pub activation: Activation,
}

/// Stack of linear layers. Dropout follows every layer except the last and
/// is active only in training mode, using inverted scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<MlpLayer>,
    pub dropout: f64,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    masks: Vec<Option<Vec<f64>>>,
}

impl Mlp {
    /// Builds layers with widths `dims[0] -> dims[1] -> ...`, one activation per layer.
    pub fn new(
        reg: &mut ParamRegistry,
        name: &str,
        dims: &[usize],
        activations: &[Activation],
        dropout: f64,
        rng: &mut Rng,
    ) -> Result<Self, RegistryError> {
        assert_eq!(dims.len(), activations.len() + 1, "one activation per layer");
        let layers = dims
            .windows(2)
            .zip(activations)
            .enumerate()
            .map(|(i, (w, &activation))| {
                Ok(MlpLayer {
                    linear: Linear::new(reg, &format!("{name}.{i}"), w[0], w[1], true, rng)?,
                    activation,
                })
            })
            .collect::<Result<Vec<_>, RegistryError>>()?;
        Ok(Self { layers, dropout })
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.linear.in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.linear.out_dim)
    }

    pub fn forward(
        &self,
        reg: &ParamRegistry,
        x: &[f64],
        training: bool,
        rng: &mut Rng,
    ) -> Result<(Vec<f64>, MlpCache), ShapeError> {
        ensure_len("mlp input", x, self.in_dim())?;
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
            masks: Vec::with_capacity(self.layers.len()),
        };
        let last = self.layers.len().saturating_sub(1);
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let pre = layer.linear.forward(reg, &h)?;
            let mut out: Vec<f64> = pre.iter().map(|&v| layer.activation.apply(v)).collect();
            let mask = if training && i < last && self.dropout > 0.0 {
                let keep = 1.0 - self.dropout;
                let mask: Vec<f64> = (0..out.len())
                    .map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                out.iter_mut().zip(&mask).for_each(|(o, m)| *o *= m);
                Some(mask)
            } else {
                None
            };
            cache.inputs.push(std::mem::replace(&mut h, out));
            cache.pre.push(pre);
            cache.masks.push(mask);
        }
        Ok((h, cache))
    }

    pub fn backward(&self, reg: &mut ParamRegistry, cache: &MlpCache, dy: &[f64]) -> Vec<f64> {
        let mut grad = dy.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if let Some(mask) = &cache.masks[i] {
                grad.iter_mut().zip(mask).for_each(|(g, m)| *g *= m);
            }
            grad.iter_mut()
                .zip(&cache.pre[i])
                .for_each(|(g, &p)| *g *= layer.activation.derivative(p));
            grad = layer.linear.backward(reg, &cache.inputs[i], &grad);
        }
        grad
    }
}

/// Functional form of [`Mlp::forward`] that discards the cache.
pub fn mlp_forward(
    reg: &ParamRegistry,
    mlp: &Mlp,
    x: &[f64],
    training: bool,
    rng: &mut Rng,
) -> Result<Vec<f64>, ShapeError> {
    mlp.forward(reg, x, training, rng).map(|(y, _)| y)
}
