//! Graph-guided difference aggregation branch.
//!
//! One branch turns a query feature and its weighted references into an
//! enhanced representation:
//!
//! ```text
//! Δₙ   = q − rₙ
//! d    = GeLU(W · Σₙ sₙ Δₙ)
//! q̃    = adapter_self(q)        d̃ = adapter_ref(d)       (residual MLPs)
//! α    = σ(w · [q̃ ‖ d̃])
//! out  = LN(GeLU(fuse([q̃ ‖ α d̃])))
//! ```
//!
//! The same code serves the visual and alignment branches at their own
//! widths. The ablation modes swap `Δₙ` for the raw `rₙ` and the weighted sum
//! for a plain mean.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::numkit::{
    ensure_len, ops, Activation, LayerNorm, LayerNormCache, Linear, Mlp, MlpCache, ParamId, ParamRegistry,
    RegistryError, Rng, ShapeError, Tensor,
};

/// What each reference contributes before aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureMode {
    /// Query minus reference.
    #[serde(rename = "diff")]
    Diff,
    /// The reference feature itself.
    #[serde(rename = "self")]
    Raw,
}

/// How reference contributions are pooled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Similarity-weighted sum.
    Graph,
    /// Unweighted mean.
    Avg,
}

impl FromStr for FeatureMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "diff" => Ok(Self::Diff),
            "self" | "raw" => Ok(Self::Raw),
            other => Err(format!("unknown feature mode `{other}`")),
        }
    }
}

impl FromStr for Aggregation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "graph" => Ok(Self::Graph),
            "avg" | "average" => Ok(Self::Avg),
            other => Err(format!("unknown aggregation `{other}`")),
        }
    }
}

impl std::fmt::Display for FeatureMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Diff => "Diff",
            Self::Raw => "Self",
        })
    }
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Graph => "Graph",
            Self::Avg => "Avg",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BranchMode {
    pub feature: FeatureMode,
    pub aggregation: Aggregation,
}

impl Default for BranchMode {
    fn default() -> Self {
        Self {
            feature: FeatureMode::Diff,
            aggregation: Aggregation::Graph,
        }
    }
}

/// A reference as seen by a branch: its id fixes the summation order.
#[derive(Debug, Clone, Copy)]
pub struct RefFeature<'a> {
    pub id: &'a str,
    pub feat: &'a [f64],
    pub weight: f64,
}

pub fn diff_features(query: &[f64], refs: &[&[f64]]) -> Result<Vec<Vec<f64>>, ShapeError> {
    refs.iter()
        .map(|r| {
            ensure_len("diff_features", r, query.len())?;
            Ok(query.iter().zip(r.iter()).map(|(q, r)| q - r).collect())
        })
        .collect()
}

fn weighted_sum(vectors: &[&[f64]], weights: &[f64], dim: usize) -> Result<Vec<f64>, ShapeError> {
    if vectors.len() != weights.len() {
        return Err(ShapeError::Mismatch {
            op: "aggregate weights",
            left: vec![vectors.len()],
            right: vec![weights.len()],
        });
    }
    let mut acc = vec![0.0; dim];
    for (v, &s) in vectors.iter().zip(weights) {
        ensure_len("aggregate", v, dim)?;
        acc.iter_mut().zip(v.iter()).for_each(|(a, x)| *a += s * x);
    }
    Ok(acc)
}

fn project_gelu(w: &Tensor, u: &[f64]) -> Result<Vec<f64>, ShapeError> {
    Ok(ops::matvec(w, u)?.into_iter().map(ops::gelu).collect())
}

/// `GeLU(Σₙ sₙ W Δₙ)`; the empty sum gives the zero vector.
pub fn aggregate(diffs: &[Vec<f64>], weights: &[f64], w: &Tensor) -> Result<Vec<f64>, ShapeError> {
    let views: Vec<&[f64]> = diffs.iter().map(Vec::as_slice).collect();
    project_gelu(w, &weighted_sum(&views, weights, w.cols())?)
}

/// `GeLU((1/N) Σₙ W Δₙ)`; the empty set gives the zero vector.
pub fn aggregate_avg(diffs: &[Vec<f64>], w: &Tensor) -> Result<Vec<f64>, ShapeError> {
    if diffs.is_empty() {
        return Ok(vec![0.0; w.rows()]);
    }
    let weights = vec![1.0 / diffs.len() as f64; diffs.len()];
    aggregate(diffs, &weights, w)
}

/// Aggregates raw reference features in place of differences.
pub fn self_features_mode(
    ref_feats: &[Vec<f64>],
    weights: &[f64],
    w: &Tensor,
    aggregation: Aggregation,
) -> Result<Vec<f64>, ShapeError> {
    match aggregation {
        Aggregation::Graph => aggregate(ref_feats, weights, w),
        Aggregation::Avg => aggregate_avg(ref_feats, w),
    }
}

/// Residual MLP: `x + out(GeLU(hidden(x)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub mlp: Mlp,
}

impl Adapter {
    pub fn new(reg: &mut ParamRegistry, name: &str, dim: usize, rng: &mut Rng) -> Result<Self, RegistryError> {
        Ok(Self {
            mlp: Mlp::new(
                reg,
                name,
                &[dim, dim, dim],
                &[Activation::Gelu, Activation::Identity],
                0.0,
                rng,
            )?,
        })
    }

    pub fn forward(&self, reg: &ParamRegistry, x: &[f64]) -> Result<(Vec<f64>, MlpCache), ShapeError> {
        // no dropout inside adapters, so the rng is never drawn from
        let (mut y, cache) = self.mlp.forward(reg, x, false, &mut Rng::new(0))?;
        y.iter_mut().zip(x).for_each(|(y, x)| *y += x);
        Ok((y, cache))
    }

    pub fn backward(&self, reg: &mut ParamRegistry, cache: &MlpCache, dy: &[f64]) -> Vec<f64> {
        let mut dx = self.mlp.backward(reg, cache, dy);
        dx.iter_mut().zip(dy).for_each(|(d, g)| *d += g);
        dx
    }
}

/// Learnable state of one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchParams {
    pub dim: usize,
    pub proj: ParamId,
    pub adapter_self: Adapter,
    pub adapter_ref: Adapter,
    pub gate: ParamId,
    pub fuse: Linear,
    pub norm: LayerNorm,
}

impl BranchParams {
    /// Registers every tensor under `prefix.`; the gate starts at zero so
    /// α = 0.5 initially.
    pub fn new(
        reg: &mut ParamRegistry,
        prefix: &str,
        dim: usize,
        ln_eps: f64,
        rng: &mut Rng,
    ) -> Result<Self, RegistryError> {
        let proj = reg.register(format!("{prefix}.proj"), crate::numkit::xavier_uniform(dim, dim, rng))?;
        let adapter_self = Adapter::new(reg, &format!("{prefix}.adapter_self"), dim, rng)?;
        let adapter_ref = Adapter::new(reg, &format!("{prefix}.adapter_ref"), dim, rng)?;
        let gate = reg.register(format!("{prefix}.gate"), Tensor::zeros(&[2 * dim]))?;
        let fuse = Linear::new(reg, &format!("{prefix}.fuse"), 2 * dim, dim, true, rng)?;
        let norm = LayerNorm::new(reg, &format!("{prefix}.norm"), dim, ln_eps)?;
        Ok(Self {
            dim,
            proj,
            adapter_self,
            adapter_ref,
            gate,
            fuse,
            norm,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.proj];
        for a in [&self.adapter_self, &self.adapter_ref] {
            for l in &a.mlp.layers {
                ids.push(l.linear.weight);
                ids.extend(l.linear.bias);
            }
        }
        ids.push(self.gate);
        ids.push(self.fuse.weight);
        ids.extend(self.fuse.bias);
        ids.push(self.norm.gain);
        ids.push(self.norm.bias);
        ids
    }
}

#[derive(Debug, Clone)]
pub struct BranchOutput {
    pub enhanced: Vec<f64>,
    pub gate_value: f64,
    pub aggregated: Vec<f64>,
    pub diffs: Vec<Vec<f64>>,
}

/// Forward intermediates needed by [`branch_backward`].
#[derive(Debug, Clone)]
pub struct BranchCache {
    pooled: Vec<f64>,
    proj_pre: Vec<f64>,
    self_cache: MlpCache,
    query_t: Vec<f64>,
    ref_cache: MlpCache,
    agg_t: Vec<f64>,
    alpha: f64,
    fuse_in: Vec<f64>,
    fuse_pre: Vec<f64>,
    ln_cache: LayerNormCache,
}

/// Pools reference contributions in ascending-id order, so any permutation of
/// `refs` gives bit-identical output.
fn pool_references(
    query: &[f64],
    refs: &[RefFeature<'_>],
    mode: BranchMode,
) -> Result<(Vec<f64>, Vec<Vec<f64>>), ShapeError> {
    let dim = query.len();
    let mut order: Vec<usize> = (0..refs.len()).collect();
    order.sort_by(|&a, &b| refs[a].id.cmp(refs[b].id));

    let contributions: Vec<Vec<f64>> = match mode.feature {
        FeatureMode::Diff => {
            let feats: Vec<&[f64]> = refs.iter().map(|r| r.feat).collect();
            diff_features(query, &feats)?
        }
        FeatureMode::Raw => refs
            .iter()
            .map(|r| {
                ensure_len("reference feature", r.feat, dim)?;
                Ok(r.feat.to_vec())
            })
            .collect::<Result<_, ShapeError>>()?,
    };
    let n = refs.len();
    let mut pooled = vec![0.0; dim];
    for &i in &order {
        let s = match mode.aggregation {
            Aggregation::Graph => refs[i].weight,
            Aggregation::Avg => 1.0,
        };
        pooled.iter_mut().zip(&contributions[i]).for_each(|(p, c)| *p += s * c);
    }
    if mode.aggregation == Aggregation::Avg && n > 0 {
        let inv = 1.0 / n as f64;
        pooled.iter_mut().for_each(|p| *p *= inv);
    }
    Ok((pooled, contributions))
}

pub fn branch_forward(
    query: &[f64],
    refs: &[RefFeature<'_>],
    params: &BranchParams,
    reg: &ParamRegistry,
    mode: BranchMode,
) -> Result<(BranchOutput, BranchCache), ShapeError> {
    ensure_len("branch query", query, params.dim)?;
    let (pooled, diffs) = pool_references(query, refs, mode)?;
    let proj_pre = ops::matvec(reg.value(params.proj), &pooled)?;
    let aggregated: Vec<f64> = proj_pre.iter().map(|&v| ops::gelu(v)).collect();

    let (query_t, self_cache) = params.adapter_self.forward(reg, query)?;
    let (agg_t, ref_cache) = params.adapter_ref.forward(reg, &aggregated)?;

    let gate = reg.value(params.gate).data();
    let logit: f64 = gate[..params.dim]
        .iter()
        .zip(&query_t)
        .chain(gate[params.dim..].iter().zip(&agg_t))
        .map(|(w, x)| w * x)
        .sum();
    let alpha = ops::sigmoid(logit);

    let mut fuse_in = query_t.clone();
    fuse_in.extend(agg_t.iter().map(|v| alpha * v));
    let fuse_pre = params.fuse.forward(reg, &fuse_in)?;
    let fused: Vec<f64> = fuse_pre.iter().map(|&v| ops::gelu(v)).collect();
    let (enhanced, ln_cache) = params.norm.forward(reg, &fused)?;

    Ok((
        BranchOutput {
            enhanced,
            gate_value: alpha,
            aggregated,
            diffs,
        },
        BranchCache {
            pooled,
            proj_pre,
            self_cache,
            query_t,
            ref_cache,
            agg_t,
            alpha,
            fuse_in,
            fuse_pre,
            ln_cache,
        },
    ))
}

/// Accumulates every branch parameter's gradient given `d(enhanced)`.
pub fn branch_backward(params: &BranchParams, reg: &mut ParamRegistry, cache: &BranchCache, d_enhanced: &[f64]) {
    let dim = params.dim;
    let d_fused = params.norm.backward(reg, &cache.ln_cache, d_enhanced);
    let d_fuse_pre: Vec<f64> = d_fused
        .iter()
        .zip(&cache.fuse_pre)
        .map(|(g, &p)| g * ops::gelu_grad(p))
        .collect();
    let d_fuse_in = params.fuse.backward(reg, &cache.fuse_in, &d_fuse_pre);

    let alpha = cache.alpha;
    let mut d_query_t = d_fuse_in[..dim].to_vec();
    let mut d_agg_t: Vec<f64> = d_fuse_in[dim..].iter().map(|g| alpha * g).collect();
    let d_alpha: f64 = d_fuse_in[dim..].iter().zip(&cache.agg_t).map(|(g, a)| g * a).sum();
    let d_logit = d_alpha * alpha * (1.0 - alpha);

    let gate = reg.value(params.gate).data().to_vec();
    {
        let dg = reg.grad_mut(params.gate).data_mut();
        for i in 0..dim {
            dg[i] += d_logit * cache.query_t[i];
            dg[dim + i] += d_logit * cache.agg_t[i];
        }
    }
    for i in 0..dim {
        d_query_t[i] += d_logit * gate[i];
        d_agg_t[i] += d_logit * gate[dim + i];
    }

    let d_aggregated = params.adapter_ref.backward(reg, &cache.ref_cache, &d_agg_t);
    let d_proj_pre: Vec<f64> = d_aggregated
        .iter()
        .zip(&cache.proj_pre)
        .map(|(g, &p)| g * ops::gelu_grad(p))
        .collect();
    let (w, dw) = reg.value_and_grad_mut(params.proj);
    ops::matvec_backward(w, &cache.pooled, &d_proj_pre, dw.data_mut());

    params.adapter_self.backward(reg, &cache.self_cache, &d_query_t);
}
