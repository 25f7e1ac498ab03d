//! Full predictor: visual and alignment branches, fusion head, softplus
//! regression head.

mod serialize;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::branch::{
    branch_backward, branch_forward, Aggregation, BranchCache, BranchMode, BranchParams, FeatureMode, RefFeature,
};
use crate::dataio::{Dataset, Sample};
use crate::numkit::{ops, Activation, Linear, Mlp, MlpCache, ParamRegistry, RegistryError, Rng, ShapeError, LN_EPS};
use crate::retrieval::{
    retrieve_variant, ReferenceGraph, ReferencePool, RetrievalError, RetrieveOptions, Strategy, DEFAULT_TAU,
};

pub use serialize::{
    decode_model, encode_model, load_model, load_model_with_config, save_model, MODEL_MAGIC, MODEL_VERSION,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("reference `{0}` is not in the dataset")]
    UnknownReference(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("not a model file (magic {found:?})")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported model file version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },
    #[error("model file truncated while reading {what}")]
    Truncated { what: &'static str },
    #[error("model file has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("embedded config is unreadable: {0}")]
    BadConfig(String),
    #[error("parameter `{name}` has shape {found:?}, config implies {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter `{0}` is not part of this architecture")]
    UnknownParam(String),
    #[error("parameter `{0}` missing from model file")]
    MissingParam(String),
    #[error("parameter `{0}` stored twice")]
    DuplicateParam(String),
    #[error("parameter `{0}` holds non-finite values")]
    NonFiniteParam(String),
    #[error("model was trained with a different config; differing fields: {}", .0.join(", "))]
    ConfigMismatch(Vec<String>),
}

/// Architecture and retrieval settings; everything needed to rebuild a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_v: usize,
    pub d_s: usize,
    pub d_h: usize,
    pub tau: f64,
    pub strategy: Strategy,
    pub max_refs: Option<usize>,
    pub random_k: usize,
    pub aggregation: Aggregation,
    pub feature_mode: FeatureMode,
    /// Disabled branches are dropped from the fusion input entirely.
    pub visual_branch: bool,
    pub align_branch: bool,
    /// With references off a branch always sees the empty reference set.
    pub visual_refs: bool,
    pub align_refs: bool,
    pub dropout: f64,
    pub ln_eps: f64,
    /// Parameter initialisation seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_v: 64,
            d_s: 64,
            d_h: 32,
            tau: DEFAULT_TAU,
            strategy: Strategy::Prompt,
            max_refs: None,
            random_k: 8,
            aggregation: Aggregation::Graph,
            feature_mode: FeatureMode::Diff,
            visual_branch: true,
            align_branch: true,
            visual_refs: true,
            align_refs: true,
            dropout: 0.1,
            ln_eps: LN_EPS,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if !self.visual_branch && !self.align_branch {
            return bad("at least one of visual_branch / align_branch must be enabled");
        }
        if self.d_v == 0 || self.d_s == 0 || self.d_h == 0 {
            return bad("d_v, d_s and d_h must be >= 1");
        }
        if !(0.0..1.0).contains(&self.tau) {
            return bad("tau must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.ln_eps > 0.0) {
            return bad("ln_eps must be positive");
        }
        if self.strategy == Strategy::Random && self.random_k == 0 {
            return bad("random_k must be >= 1 for the random strategy");
        }
        Ok(())
    }

    pub fn branch_mode(&self) -> BranchMode {
        BranchMode {
            feature: self.feature_mode,
            aggregation: self.aggregation,
        }
    }

    pub fn retrieve_options(&self) -> RetrieveOptions {
        RetrieveOptions {
            tau: self.tau,
            max_refs: self.max_refs,
            random_k: self.random_k,
        }
    }

    /// Names of fields whose values differ, in declaration order.
    pub fn diff(&self, other: &ModelConfig) -> Vec<String> {
        let a = serde_json::to_value(self).expect("config serializes");
        let b = serde_json::to_value(other).expect("config serializes");
        let (a, b) = (a.as_object().expect("object"), b.as_object().expect("object"));
        a.iter()
            .filter(|(k, v)| b.get(*k) != Some(*v))
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Scalar parameter count implied by the config; `None` on overflow.
    pub fn parameter_count(&self) -> Option<usize> {
        let branch = |d: usize| d.checked_mul(d)?.checked_mul(7)?.checked_add(d.checked_mul(9)?);
        let mut total = 0usize;
        if self.visual_branch {
            total = total.checked_add(branch(self.d_v)?)?;
        }
        if self.align_branch {
            total = total.checked_add(branch(self.d_s)?)?;
        }
        let h = self.d_h;
        let in_w = (if self.visual_branch { self.d_v } else { 0 }).checked_add(if self.align_branch {
            self.d_s
        } else {
            0
        })?;
        let head = in_w
            .checked_mul(h)?
            .checked_add(h.checked_mul(h)?)?
            .checked_add(h.checked_mul(3)?)?
            .checked_add(1)?;
        total.checked_add(head)
    }

    fn fusion_width(&self) -> usize {
        self.visual_branch as usize * self.d_v + self.align_branch as usize * self.d_s
    }
}

/// Parameters plus the structure that indexes them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub registry: ParamRegistry,
    pub visual: Option<BranchParams>,
    pub align: Option<BranchParams>,
    pub fusion: Mlp,
    pub regression: Linear,
}

impl ModelState {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let root = Rng::new(config.seed);
        let mut reg = ParamRegistry::new();
        let visual = if config.visual_branch {
            Some(BranchParams::new(
                &mut reg,
                "visual",
                config.d_v,
                config.ln_eps,
                &mut root.fork(0),
            )?)
        } else {
            None
        };
        let align = if config.align_branch {
            Some(BranchParams::new(
                &mut reg,
                "align",
                config.d_s,
                config.ln_eps,
                &mut root.fork(1),
            )?)
        } else {
            None
        };
        let mut head_rng = root.fork(2);
        let fusion = Mlp::new(
            &mut reg,
            "fusion",
            &[config.fusion_width(), config.d_h, config.d_h],
            &[Activation::Relu, Activation::Identity],
            config.dropout,
            &mut head_rng,
        )?;
        let regression = Linear::new(&mut reg, "regression", config.d_h, 1, true, &mut head_rng)?;
        Ok(Self {
            config,
            registry: reg,
            visual,
            align,
            fusion,
            regression,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.registry.num_scalars()
    }
}

/// References for `query` under the configured strategy. Outside training
/// there is no mini-batch, so the batch strategy falls back to `random_k`
/// uniform pool draws.
pub fn retrieve_for(
    config: &ModelConfig,
    query: &Sample,
    pool: &ReferencePool,
    batch: Option<&[&Sample]>,
    rng: &mut Rng,
) -> Result<ReferenceGraph, ModelError> {
    let strategy = match (config.strategy, batch) {
        (Strategy::Batch, None) => Strategy::Random,
        (s, _) => s,
    };
    Ok(retrieve_variant(
        strategy,
        query,
        pool,
        &config.retrieve_options(),
        batch.unwrap_or(&[]),
        rng,
    )?)
}

/// A retrieved reference resolved to its sample.
#[derive(Debug, Clone, Copy)]
pub struct ScoredRef<'a> {
    pub sample: &'a Sample,
    pub weight: f64,
}

pub fn resolve_refs<'a>(graph: &ReferenceGraph, dataset: &'a Dataset) -> Result<Vec<ScoredRef<'a>>, ModelError> {
    graph
        .refs
        .iter()
        .map(|r| {
            dataset
                .get(&r.id)
                .map(|sample| ScoredRef {
                    sample,
                    weight: r.weight,
                })
                .ok_or_else(|| ModelError::UnknownReference(r.id.clone()))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub visual_gate: Option<f64>,
    pub align_gate: Option<f64>,
    pub n_refs: usize,
    /// Regression output before softplus.
    pub raw: f64,
}

#[derive(Debug, Clone)]
pub struct ModelCache {
    visual: Option<BranchCache>,
    align: Option<BranchCache>,
    fusion: MlpCache,
    hidden: Vec<f64>,
    raw: f64,
}

fn branch_refs<'a>(
    refs: &[ScoredRef<'a>],
    enabled: bool,
    feat: impl Fn(&'a Sample) -> &'a [f64],
) -> Vec<RefFeature<'a>> {
    if !enabled {
        return Vec::new();
    }
    refs.iter()
        .map(|r| RefFeature {
            id: &r.sample.id,
            feat: feat(r.sample),
            weight: r.weight,
        })
        .collect()
}

/// Forward pass keeping what [`backward`] needs. `rng` drives dropout when
/// `training` is set and is untouched otherwise.
pub fn forward_with_cache(
    sample: &Sample,
    refs: &[ScoredRef<'_>],
    state: &ModelState,
    training: bool,
    rng: &mut Rng,
) -> Result<(f64, Diagnostics, ModelCache), ModelError> {
    let cfg = &state.config;
    let reg = &state.registry;
    let mode = cfg.branch_mode();
    let mut fused_in = Vec::with_capacity(cfg.fusion_width());

    let mut visual_gate = None;
    let visual = match &state.visual {
        Some(p) => {
            let rv = branch_refs(refs, cfg.visual_refs, |s| &s.visual);
            let (out, cache) = branch_forward(&sample.visual, &rv, p, reg, mode)?;
            fused_in.extend_from_slice(&out.enhanced);
            visual_gate = Some(out.gate_value);
            Some(cache)
        }
        None => None,
    };
    let mut align_gate = None;
    let align = match &state.align {
        Some(p) => {
            let rs = branch_refs(refs, cfg.align_refs, |s| &s.align);
            let (out, cache) = branch_forward(&sample.align, &rs, p, reg, mode)?;
            fused_in.extend_from_slice(&out.enhanced);
            align_gate = Some(out.gate_value);
            Some(cache)
        }
        None => None,
    };

    let (hidden, fusion) = state.fusion.forward(reg, &fused_in, training, rng)?;
    let raw = state.regression.forward(reg, &hidden)?[0];
    let score = ops::softplus(raw);
    Ok((
        score,
        Diagnostics {
            visual_gate,
            align_gate,
            n_refs: refs.len(),
            raw,
        },
        ModelCache {
            visual,
            align,
            fusion,
            hidden,
            raw,
        },
    ))
}

/// Scores one sample against its references.
pub fn predict(
    sample: &Sample,
    refs: &[ScoredRef<'_>],
    state: &ModelState,
    training: bool,
    rng: &mut Rng,
) -> Result<(f64, Diagnostics), ModelError> {
    forward_with_cache(sample, refs, state, training, rng).map(|(s, d, _)| (s, d))
}

/// Scores `indices` of `dataset` in eval mode, retrieving from `pool`.
///
/// Uses a fixed stream derived from the model seed, so random and batch
/// strategies give the same references on every call.
pub fn score_samples(
    state: &ModelState,
    dataset: &Dataset,
    indices: &[usize],
    pool: &ReferencePool,
) -> Result<Vec<(f64, Diagnostics)>, ModelError> {
    let mut rng = Rng::new(state.config.seed).fork(u64::MAX - 1);
    indices
        .iter()
        .map(|&i| {
            let s = dataset.sample(i);
            let graph = retrieve_for(&state.config, s, pool, None, &mut rng)?;
            let refs = resolve_refs(&graph, dataset)?;
            predict(s, &refs, state, false, &mut rng)
        })
        .collect()
}

/// Accumulates parameter gradients of `d_score · score` into the registry.
pub fn backward(state: &mut ModelState, cache: &ModelCache, d_score: f64) {
    let ModelState {
        registry,
        visual,
        align,
        fusion,
        regression,
        config,
    } = state;
    let d_raw = d_score * ops::sigmoid(cache.raw);
    let d_hidden = regression.backward(registry, &cache.hidden, &[d_raw]);
    let d_fused = fusion.backward(registry, &cache.fusion, &d_hidden);
    let mut offset = 0;
    if let (Some(p), Some(c)) = (visual.as_ref(), cache.visual.as_ref()) {
        branch_backward(p, registry, c, &d_fused[offset..offset + config.d_v]);
        offset += config.d_v;
    }
    if let (Some(p), Some(c)) = (align.as_ref(), cache.align.as_ref()) {
        branch_backward(p, registry, c, &d_fused[offset..offset + config.d_s]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic, Dims, SynthSpec};
    use crate::retrieval::{retrieve, ReferencePool};

    fn small_config() -> ModelConfig {
        ModelConfig {
            d_v: 6,
            d_s: 5,
            d_h: 4,
            ..ModelConfig::default()
        }
    }

    fn small_data() -> Dataset {
        generate_synthetic(&SynthSpec {
            n_samples: 40,
            n_clusters: 4,
            dims: Dims {
                prompt: 32,
                visual: 6,
                align: 5,
            },
            seed: 9,
            ..SynthSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn rejects_invalid_configs() {
        for cfg in [
            ModelConfig {
                visual_branch: false,
                align_branch: false,
                ..small_config()
            },
            ModelConfig {
                d_h: 0,
                ..small_config()
            },
            ModelConfig {
                tau: 1.5,
                ..small_config()
            },
        ] {
            assert!(matches!(ModelState::new(cfg), Err(ModelError::InvalidConfig(_))));
        }
    }

    #[test]
    fn score_positive_and_eval_deterministic() {
        let ds = small_data();
        let pool = ReferencePool::from_dataset(&ds);
        let state = ModelState::new(small_config()).unwrap();
        for s in ds.samples() {
            let g = retrieve(s, &pool, 0.7).unwrap();
            let refs = resolve_refs(&g, &ds).unwrap();
            let (a, _) = predict(s, &refs, &state, false, &mut Rng::new(1)).unwrap();
            let (b, _) = predict(s, &refs, &state, false, &mut Rng::new(2)).unwrap();
            assert!(a > 0.0);
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn zero_regression_output_gives_ln2() {
        let ds = small_data();
        let mut state = ModelState::new(small_config()).unwrap();
        let w = state.regression.weight;
        let b = state.regression.bias.unwrap();
        state.registry.value_mut(w).fill(0.0);
        state.registry.value_mut(b).fill(0.0);
        let (score, diag) = predict(ds.sample(0), &[], &state, false, &mut Rng::new(0)).unwrap();
        assert_eq!(diag.raw, 0.0);
        assert!((score - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn no_references_matches_references_disabled() {
        let ds = small_data();
        let pool = ReferencePool::from_dataset(&ds);
        let on = ModelState::new(small_config()).unwrap();
        let off = ModelState::new(ModelConfig {
            visual_refs: false,
            align_refs: false,
            ..small_config()
        })
        .unwrap();
        let s = ds.sample(3);
        let g = retrieve(s, &pool, 0.7).unwrap();
        assert!(!g.is_empty());
        let refs = resolve_refs(&g, &ds).unwrap();
        let (a, _) = predict(s, &[], &on, false, &mut Rng::new(0)).unwrap();
        let (b, _) = predict(s, &refs, &off, false, &mut Rng::new(0)).unwrap();
        let (c, _) = predict(s, &refs, &on, false, &mut Rng::new(0)).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_ne!(a.to_bits(), c.to_bits());
    }

    #[test]
    fn disabled_branch_shrinks_fusion_input() {
        let state = ModelState::new(ModelConfig {
            align_branch: false,
            ..small_config()
        })
        .unwrap();
        assert!(state.align.is_none());
        assert_eq!(state.fusion.in_dim(), 6);
        assert!(state.registry.id("align.proj").is_none());
    }

    #[test]
    fn config_diff_names_fields() {
        let a = small_config();
        let b = ModelConfig {
            d_h: 9,
            tau: 0.5,
            ..small_config()
        };
        assert_eq!(a.diff(&b), vec!["d_h".to_string(), "tau".to_string()]);
        assert!(a.diff(&a).is_empty());
    }

    #[test]
    fn parameter_count_matches_registry() {
        for cfg in [
            small_config(),
            ModelConfig {
                align_branch: false,
                ..small_config()
            },
            ModelConfig {
                visual_branch: false,
                ..small_config()
            },
        ] {
            let state = ModelState::new(cfg.clone()).unwrap();
            assert_eq!(cfg.parameter_count(), Some(state.num_parameters()));
        }
    }

    #[test]
    fn dim_mismatch_is_an_error() {
        let ds = small_data();
        let state = ModelState::new(ModelConfig {
            d_v: 7,
            ..small_config()
        })
        .unwrap();
        assert!(matches!(
            predict(ds.sample(0), &[], &state, false, &mut Rng::new(0)),
            Err(ModelError::Shape(_))
        ));
    }
}
