//! Seeded synthetic datasets where quality is a deviation from a hidden
//! per-cluster centroid.
//!
//! Each cluster has a prompt template and visual/alignment centroids. A
//! sample's features are its centroid plus isotropic Gaussian noise whose
//! scale is drawn uniformly from `[0, cluster_spread]`, and its opinion score
//! is an affine, decreasing function of `‖δ_v‖ + ‖δ_s‖`. Without the centroid
//! the score is hard to read off a single sample; against same-cluster
//! references it is a difference norm.

use serde::{Deserialize, Serialize};

use super::embed::deterministic_embed;
use super::{DataError, Dataset, Dims, Sample, Split};
use crate::numkit::Rng;

const VOCAB: &[&str] = &[
    "astronaut",
    "horse",
    "city",
    "forest",
    "ocean",
    "robot",
    "dragon",
    "castle",
    "garden",
    "desert",
    "mountain",
    "river",
    "violin",
    "bicycle",
    "lantern",
    "glacier",
    "market",
    "train",
    "butterfly",
    "tiger",
    "cinematic",
    "watercolor",
    "neon",
    "vintage",
    "aerial",
    "macro",
    "timelapse",
    "slowmotion",
    "noir",
    "pastel",
    "running",
    "dancing",
    "flying",
    "melting",
    "glowing",
    "spinning",
    "floating",
    "burning",
    "blooming",
    "sailing",
    "sunset",
    "midnight",
    "storm",
    "fog",
    "snow",
    "rain",
    "dawn",
    "eclipse",
    "aurora",
    "summer",
    "golden",
    "crimson",
    "silver",
    "emerald",
    "ancient",
    "futuristic",
    "tiny",
    "giant",
    "quiet",
    "crowded",
    "camera",
    "closeup",
    "panorama",
    "tracking",
    "handheld",
    "drone",
    "portrait",
    "wide",
    "dolly",
    "orbit",
    "children",
    "chef",
    "pianist",
    "knight",
    "wizard",
    "farmer",
    "surfer",
    "dancer",
    "monk",
    "pilot",
];

const TEMPLATE_LEN: usize = 10;
const MAX_SHARED: usize = 3;

/// Parameters of [`generate_synthetic`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_samples: usize,
    pub n_clusters: usize,
    pub dims: Dims,
    pub cluster_spread: f64,
    pub quality_noise: f64,
    pub mos_range: (f64, f64),
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            n_clusters: 20,
            dims: Dims {
                prompt: 128,
                visual: 64,
                align: 64,
            },
            cluster_spread: 1.0,
            quality_noise: 2.0,
            mos_range: (0.0, 100.0),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidSynthSpec(m));
        if self.n_clusters < 2 {
            return bad(format!("n_clusters must be >= 2, got {}", self.n_clusters));
        }
        if self.n_samples < self.n_clusters {
            return bad(format!(
                "n_samples ({}) must be >= n_clusters ({})",
                self.n_samples, self.n_clusters
            ));
        }
        if !(self.mos_range.0 < self.mos_range.1) {
            return bad(format!("mos_range low must be < high, got {:?}", self.mos_range));
        }
        if self.dims.prompt == 0 || self.dims.visual == 0 || self.dims.align == 0 {
            return bad("all feature dims must be >= 1".into());
        }
        if !(self.cluster_spread >= 0.0 && self.quality_noise >= 0.0) {
            return bad("cluster_spread and quality_noise must be non-negative".into());
        }
        Ok(())
    }

    /// Largest typical deviation `‖δ_v‖ + ‖δ_s‖`; maps to the low end of the MOS range.
    pub fn deviation_scale(&self) -> f64 {
        self.cluster_spread * ((self.dims.visual as f64).sqrt() + (self.dims.align as f64).sqrt())
    }

    /// Noise-free score of a sample whose deviations sum to `deviation`.
    pub fn mos_for_deviation(&self, deviation: f64) -> f64 {
        let (low, high) = self.mos_range;
        let scale = self.deviation_scale();
        if scale == 0.0 {
            return high;
        }
        high - (high - low) * deviation / scale
    }
}

/// Hidden generative state, exposed for oracle checks.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTruth {
    pub cluster_of: Vec<usize>,
    pub templates: Vec<String>,
    pub visual_centroids: Vec<Vec<f64>>,
    pub align_centroids: Vec<Vec<f64>>,
}

fn draw_template(rng: &mut Rng, previous: &[Vec<usize>]) -> Vec<usize> {
    let mut best: Option<(usize, Vec<usize>)> = None;
    for _ in 0..200 {
        let mut pool: Vec<usize> = (0..VOCAB.len()).collect();
        rng.shuffle(&mut pool);
        let mut words = pool[..TEMPLATE_LEN].to_vec();
        words.sort_unstable();
        let overlap = previous
            .iter()
            .map(|p| p.iter().filter(|w| words.contains(w)).count())
            .max()
            .unwrap_or(0);
        if overlap <= MAX_SHARED {
            return words;
        }
        if best.as_ref().is_none_or(|(o, _)| overlap < *o) {
            best = Some((overlap, words));
        }
    }
    best.expect("at least one candidate drawn").1
}

fn gaussian(rng: &mut Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| scale * rng.normal()).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset, DataError> {
    generate_synthetic_with_truth(spec).map(|(ds, _)| ds)
}

/// Every sample is labelled [`Split::Train`]; use
/// [`random_split`](super::random_split) to carve out a test set.
pub fn generate_synthetic_with_truth(spec: &SynthSpec) -> Result<(Dataset, SynthTruth), DataError> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    let mut proto_rng = root.fork(0);
    let mut sample_rng = root.fork(1);

    let mut template_words: Vec<Vec<usize>> = Vec::with_capacity(spec.n_clusters);
    let mut templates = Vec::with_capacity(spec.n_clusters);
    let mut visual_centroids = Vec::with_capacity(spec.n_clusters);
    let mut align_centroids = Vec::with_capacity(spec.n_clusters);
    for _ in 0..spec.n_clusters {
        let words = draw_template(&mut proto_rng, &template_words);
        let mut order = words.clone();
        proto_rng.shuffle(&mut order);
        templates.push(order.iter().map(|&w| VOCAB[w]).collect::<Vec<_>>().join(" "));
        template_words.push(words);
        visual_centroids.push(gaussian(&mut proto_rng, spec.dims.visual, 1.0));
        align_centroids.push(gaussian(&mut proto_rng, spec.dims.align, 1.0));
    }

    let mut samples = Vec::with_capacity(spec.n_samples);
    let mut cluster_of = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let c = i % spec.n_clusters;
        let prompt = format!("{} take{i:05}", templates[c]);
        let prompt_emb = deterministic_embed(&prompt, spec.dims.prompt)?;
        let scale_v = spec.cluster_spread * sample_rng.uniform();
        let scale_s = spec.cluster_spread * sample_rng.uniform();
        let dv = gaussian(&mut sample_rng, spec.dims.visual, scale_v);
        let ds = gaussian(&mut sample_rng, spec.dims.align, scale_s);
        let noise = spec.quality_noise * sample_rng.normal();
        let mos = spec.mos_for_deviation(norm(&dv) + norm(&ds)) + noise;
        samples.push(Sample {
            id: format!("v{i:05}"),
            prompt,
            prompt_emb,
            visual: visual_centroids[c].iter().zip(&dv).map(|(m, d)| m + d).collect(),
            align: align_centroids[c].iter().zip(&ds).map(|(m, d)| m + d).collect(),
            mos: Some(mos),
        });
        cluster_of.push(c);
    }
    let dataset = Dataset::new(spec.dims, samples, vec![Split::Train; spec.n_samples])?;
    Ok((
        dataset,
        SynthTruth {
            cluster_of,
            templates,
            visual_centroids,
            align_centroids,
        },
    ))
}
