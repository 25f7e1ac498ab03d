//! Reference pool, prompt-similarity retrieval and query-centered graphs.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{Dataset, Sample, Split};
use crate::numkit::Rng;

/// Default similarity threshold.
pub const DEFAULT_TAU: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RetrievalError {
    #[error("cosine similarity of a zero vector is undefined")]
    ZeroVector,
    #[error("vector dims differ: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("threshold must lie in [0, 1), got {0}")]
    InvalidTau(f64),
    #[error("random retrieval needs k >= 1")]
    InvalidK,
    #[error("unknown sample id `{0}`")]
    UnknownId(String),
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64, RetrievalError> {
    if a.len() != b.len() {
        return Err(RetrievalError::DimMismatch(a.len(), b.len()));
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(RetrievalError::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = dot(v, v).sqrt();
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

/// Candidate references: training samples only, with their prompt embeddings
/// and unit-normalized visual features stacked row-wise.
#[derive(Debug, Clone)]
pub struct ReferencePool {
    ids: Vec<String>,
    rows: Vec<usize>,
    prompt: Vec<f64>,
    visual: Vec<f64>,
    prompt_dim: usize,
    visual_dim: usize,
    index: HashMap<String, usize>,
}

impl ReferencePool {
    /// Pool of every [`Split::Train`] sample.
    pub fn from_dataset(dataset: &Dataset) -> Self {
        Self::from_indices(dataset, &dataset.indices(Split::Train))
    }

    pub fn from_indices(dataset: &Dataset, indices: &[usize]) -> Self {
        let dims = dataset.dims();
        let mut pool = Self {
            ids: Vec::with_capacity(indices.len()),
            rows: Vec::with_capacity(indices.len()),
            prompt: Vec::with_capacity(indices.len() * dims.prompt),
            visual: Vec::with_capacity(indices.len() * dims.visual),
            prompt_dim: dims.prompt,
            visual_dim: dims.visual,
            index: HashMap::with_capacity(indices.len()),
        };
        for &i in indices {
            let s = dataset.sample(i);
            pool.index.insert(s.id.clone(), pool.ids.len());
            pool.ids.push(s.id.clone());
            pool.rows.push(i);
            pool.prompt.extend_from_slice(&s.prompt_emb);
            pool.visual.extend(unit(&s.visual));
        }
        pool
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    /// Dataset index of pool row `row`.
    pub fn dataset_index(&self, row: usize) -> usize {
        self.rows[row]
    }

    pub fn prompt_row(&self, row: usize) -> &[f64] {
        &self.prompt[row * self.prompt_dim..(row + 1) * self.prompt_dim]
    }

    fn visual_row(&self, row: usize) -> &[f64] {
        &self.visual[row * self.visual_dim..(row + 1) * self.visual_dim]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub id: String,
    pub weight: f64,
}

/// Star graph centered on the query; each reference is one weighted edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceGraph {
    pub query_id: String,
    pub refs: Vec<Reference>,
}

impl ReferenceGraph {
    pub fn empty(query_id: impl Into<String>) -> Self {
        Self {
            query_id: query_id.into(),
            refs: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    /// Edges `(query, reference, weight)`; there are no reference-reference edges.
    pub fn edges(&self) -> impl Iterator<Item = (&str, &str, f64)> {
        self.refs
            .iter()
            .map(move |r| (self.query_id.as_str(), r.id.as_str(), r.weight))
    }

    fn sort_and_cap(&mut self, max_refs: Option<usize>) {
        self.refs
            .sort_by(|a, b| b.weight.total_cmp(&a.weight).then_with(|| a.id.cmp(&b.id)));
        if let Some(k) = max_refs {
            self.refs.truncate(k);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Prompt-embedding cosine similarity above the threshold.
    Prompt,
    /// Visual-feature cosine similarity above the threshold.
    Feature,
    /// `k` uniform draws from the pool.
    Random,
    /// The other members of the current mini-batch.
    Batch,
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "prompt" => Ok(Self::Prompt),
            "feature" => Ok(Self::Feature),
            "random" => Ok(Self::Random),
            "batch" => Ok(Self::Batch),
            other => Err(format!("unknown retrieval strategy `{other}`")),
        }
    }
}

fn check_tau(tau: f64) -> Result<(), RetrievalError> {
    if (0.0..1.0).contains(&tau) {
        Ok(())
    } else {
        Err(RetrievalError::InvalidTau(tau))
    }
}

fn threshold_scan<'p>(
    query_id: &str,
    query: &[f64],
    pool: &ReferencePool,
    row: impl Fn(usize) -> &'p [f64],
    tau: f64,
) -> ReferenceGraph {
    let refs = (0..pool.len())
        .filter(|&r| pool.ids[r] != query_id)
        .filter_map(|r| {
            let s = dot(query, row(r));
            (s > tau).then(|| Reference {
                id: pool.ids[r].clone(),
                weight: s,
            })
        })
        .collect();
    ReferenceGraph {
        query_id: query_id.to_string(),
        refs,
    }
}

/// Every pool member other than the query whose prompt similarity exceeds
/// `tau`, sorted by descending weight with ties broken by id.
pub fn retrieve(query: &Sample, pool: &ReferencePool, tau: f64) -> Result<ReferenceGraph, RetrievalError> {
    retrieve_capped(query, pool, tau, None)
}

/// [`retrieve`] keeping at most `max_refs` highest-weight references.
pub fn retrieve_capped(
    query: &Sample,
    pool: &ReferencePool,
    tau: f64,
    max_refs: Option<usize>,
) -> Result<ReferenceGraph, RetrievalError> {
    check_tau(tau)?;
    if query.prompt_emb.len() != pool.prompt_dim {
        return Err(RetrievalError::DimMismatch(query.prompt_emb.len(), pool.prompt_dim));
    }
    let mut g = threshold_scan(&query.id, &query.prompt_emb, pool, |r| pool.prompt_row(r), tau);
    g.sort_and_cap(max_refs);
    Ok(g)
}

/// Knobs shared by the retrieval strategies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrieveOptions {
    pub tau: f64,
    pub max_refs: Option<usize>,
    pub random_k: usize,
}

impl Default for RetrieveOptions {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            max_refs: None,
            random_k: 8,
        }
    }
}

/// Retrieval under any [`Strategy`]. `batch` is consulted only by
/// [`Strategy::Batch`], `rng` only by [`Strategy::Random`]. Random and batch
/// references carry weight 1.
pub fn retrieve_variant(
    strategy: Strategy,
    query: &Sample,
    pool: &ReferencePool,
    opts: &RetrieveOptions,
    batch: &[&Sample],
    rng: &mut Rng,
) -> Result<ReferenceGraph, RetrievalError> {
    match strategy {
        Strategy::Prompt => retrieve_capped(query, pool, opts.tau, opts.max_refs),
        Strategy::Feature => {
            check_tau(opts.tau)?;
            if query.visual.len() != pool.visual_dim {
                return Err(RetrievalError::DimMismatch(query.visual.len(), pool.visual_dim));
            }
            let q = unit(&query.visual);
            let mut g = threshold_scan(&query.id, &q, pool, |r| pool.visual_row(r), opts.tau);
            g.sort_and_cap(opts.max_refs);
            Ok(g)
        }
        Strategy::Random => {
            if opts.random_k == 0 {
                return Err(RetrievalError::InvalidK);
            }
            let mut candidates: Vec<usize> = (0..pool.len()).filter(|&r| pool.ids[r] != query.id).collect();
            let k = opts.random_k.min(candidates.len());
            for i in 0..k {
                let j = i + rng.below(candidates.len() - i);
                candidates.swap(i, j);
            }
            let mut g = ReferenceGraph {
                query_id: query.id.clone(),
                refs: candidates[..k]
                    .iter()
                    .map(|&r| Reference {
                        id: pool.ids[r].clone(),
                        weight: 1.0,
                    })
                    .collect(),
            };
            g.sort_and_cap(opts.max_refs);
            Ok(g)
        }
        Strategy::Batch => {
            let mut g = ReferenceGraph {
                query_id: query.id.clone(),
                refs: batch
                    .iter()
                    .filter(|s| s.id != query.id)
                    .map(|s| Reference {
                        id: s.id.clone(),
                        weight: 1.0,
                    })
                    .collect(),
            };
            g.sort_and_cap(opts.max_refs);
            Ok(g)
        }
    }
}

/// Reference-count distribution over a set of queries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolStats {
    pub tau: f64,
    pub min: usize,
    pub max: usize,
    pub mean: f64,
    pub queries: usize,
}

/// Counts of prompt-similarity references for every sample of `dataset`
/// queried against `pool`.
pub fn pool_stats(pool: &ReferencePool, dataset: &Dataset, tau: f64) -> Result<PoolStats, RetrievalError> {
    let mut counts = Vec::with_capacity(dataset.len());
    for s in dataset.samples() {
        counts.push(retrieve(s, pool, tau)?.len());
    }
    let n = counts.len();
    Ok(PoolStats {
        tau,
        min: counts.iter().copied().min().unwrap_or(0),
        max: counts.iter().copied().max().unwrap_or(0),
        mean: if n == 0 {
            0.0
        } else {
            counts.iter().sum::<usize>() as f64 / n as f64
        },
        queries: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Dims;

    fn sample(id: &str, emb: Vec<f64>) -> Sample {
        let n = dot(&emb, &emb).sqrt();
        Sample {
            id: id.into(),
            prompt: id.into(),
            prompt_emb: emb.iter().map(|x| x / n).collect(),
            visual: emb.clone(),
            align: vec![0.0],
            mos: Some(1.0),
        }
    }

    fn dataset(samples: Vec<Sample>, splits: Vec<Split>) -> Dataset {
        let p = samples[0].prompt_emb.len();
        Dataset::new(
            Dims {
                prompt: p,
                visual: p,
                align: 1,
            },
            samples,
            splits,
        )
        .unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_sim(&[1.0, 1.0], &[1.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let expected = 32.0 / (14f64.sqrt() * 77f64.sqrt());
        let got = cosine_sim(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.974632).abs() < 5e-7);
        assert_eq!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]), Err(RetrievalError::ZeroVector));
    }

    /// Query at e0; pool rows at angles with cos 0.9, 0.6, 0.75.
    fn threshold_fixture() -> (Dataset, Sample) {
        let at = |c: f64| vec![c, (1.0 - c * c).sqrt()];
        let ds = dataset(
            vec![sample("r0", at(0.9)), sample("r1", at(0.6)), sample("r2", at(0.75))],
            vec![Split::Train; 3],
        );
        (ds, sample("q", vec![1.0, 0.0]))
    }

    #[test]
    fn threshold_selects_rows() {
        let (ds, q) = threshold_fixture();
        let pool = ReferencePool::from_dataset(&ds);
        let g = retrieve(&q, &pool, DEFAULT_TAU).unwrap();
        let ids: Vec<_> = g.refs.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["r0", "r2"]);
        assert!(g.edges().all(|(q, _, _)| q == "q"));
    }

    #[test]
    fn self_is_excluded_but_identical_prompts_are_not() {
        let ds = dataset(
            vec![sample("a", vec![1.0, 0.0]), sample("b", vec![1.0, 0.0])],
            vec![Split::Train; 2],
        );
        let pool = ReferencePool::from_dataset(&ds);
        let g = retrieve(ds.sample(0), &pool, 0.7).unwrap();
        assert_eq!(g.refs.len(), 1);
        assert_eq!(g.refs[0].id, "b");
    }

    #[test]
    fn pool_excludes_test_samples() {
        let ds = dataset(
            vec![sample("a", vec![1.0, 0.0]), sample("b", vec![1.0, 0.1])],
            vec![Split::Train, Split::Test],
        );
        let pool = ReferencePool::from_dataset(&ds);
        assert!(pool.contains("a") && !pool.contains("b"));
    }

    #[test]
    fn max_refs_keeps_top_weights() {
        let (ds, q) = threshold_fixture();
        let pool = ReferencePool::from_dataset(&ds);
        let g = retrieve_capped(&q, &pool, 0.0, Some(2)).unwrap();
        let ids: Vec<_> = g.refs.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["r0", "r2"]);
    }

    #[test]
    fn prompt_variant_delegates() {
        let (ds, q) = threshold_fixture();
        let pool = ReferencePool::from_dataset(&ds);
        let opts = RetrieveOptions::default();
        let a = retrieve_variant(Strategy::Prompt, &q, &pool, &opts, &[], &mut Rng::new(0)).unwrap();
        assert_eq!(a, retrieve(&q, &pool, opts.tau).unwrap());
    }

    #[test]
    fn random_variant_is_seeded() {
        let samples: Vec<_> = (0..20)
            .map(|i| sample(&format!("s{i:02}"), vec![1.0, i as f64 * 0.1]))
            .collect();
        let ds = dataset(samples, vec![Split::Train; 20]);
        let pool = ReferencePool::from_dataset(&ds);
        let opts = RetrieveOptions {
            random_k: 3,
            ..Default::default()
        };
        let q = ds.sample(4);
        let a = retrieve_variant(Strategy::Random, q, &pool, &opts, &[], &mut Rng::new(9)).unwrap();
        let b = retrieve_variant(Strategy::Random, q, &pool, &opts, &[], &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert!(a.refs.iter().all(|r| r.id != q.id));
        let zero = RetrieveOptions { random_k: 0, ..opts };
        assert_eq!(
            retrieve_variant(Strategy::Random, q, &pool, &zero, &[], &mut Rng::new(9)),
            Err(RetrievalError::InvalidK)
        );
    }

    #[test]
    fn batch_variant_uses_other_members() {
        let samples: Vec<_> = (0..4).map(|i| sample(&format!("b{i}"), vec![1.0, i as f64])).collect();
        let batch: Vec<&Sample> = samples.iter().collect();
        let ds = dataset(samples.clone(), vec![Split::Train; 4]);
        let pool = ReferencePool::from_dataset(&ds);
        for q in &batch {
            let g = retrieve_variant(
                Strategy::Batch,
                q,
                &pool,
                &RetrieveOptions::default(),
                &batch,
                &mut Rng::new(0),
            )
            .unwrap();
            assert_eq!(g.len(), 3);
            assert!(g.refs.iter().all(|r| r.id != q.id && r.weight == 1.0));
        }
    }

    #[test]
    fn pool_stats_at_zero_threshold_counts_everyone_else() {
        // all pairwise sims positive: every row lies in the positive quadrant
        let samples: Vec<_> = (0..6)
            .map(|i| sample(&format!("p{i}"), vec![1.0 + i as f64, 2.0, 0.5 * i as f64 + 0.1]))
            .collect();
        let ds = dataset(samples, vec![Split::Train; 6]);
        let pool = ReferencePool::from_dataset(&ds);
        let st = pool_stats(&pool, &ds, 0.0).unwrap();
        assert_eq!((st.min, st.max), (5, 5));
        assert_eq!(st.mean, 5.0);
    }

    #[test]
    fn pool_stats_near_one_is_empty_on_random_pool() {
        let mut rng = Rng::new(21);
        let samples: Vec<_> = (0..50)
            .map(|i| sample(&format!("r{i}"), (0..16).map(|_| rng.normal()).collect()))
            .collect();
        let ds = dataset(samples, vec![Split::Train; 50]);
        let pool = ReferencePool::from_dataset(&ds);
        assert_eq!(pool_stats(&pool, &ds, 0.99).unwrap().mean, 0.0);
        let mut last = f64::INFINITY;
        for tau in [0.0, 0.1, 0.2, 0.4, 0.6, 0.8] {
            let m = pool_stats(&pool, &ds, tau).unwrap().mean;
            assert!(m <= last);
            last = m;
        }
    }

    #[test]
    fn invalid_tau_rejected() {
        let (ds, q) = threshold_fixture();
        let pool = ReferencePool::from_dataset(&ds);
        assert_eq!(retrieve(&q, &pool, 1.0), Err(RetrievalError::InvalidTau(1.0)));
    }
}
