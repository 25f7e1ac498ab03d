use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use refscore::branch::{branch_backward, branch_forward, BranchMode, BranchParams, RefFeature};
use refscore::dataio::{generate_synthetic, random_split, Dims, SynthSpec};
use refscore::metrics::{kendall, spearman};
use refscore::model::{resolve_refs, retrieve_for, ModelConfig, ModelState};
use refscore::numkit::{ParamRegistry, Rng};
use refscore::retrieval::{retrieve, ReferencePool};
use refscore::training::{batch_step, BatchItem};

fn dataset() -> refscore::Dataset {
    let ds = generate_synthetic(&SynthSpec {
        n_samples: 1000,
        n_clusters: 20,
        dims: Dims {
            prompt: 128,
            visual: 64,
            align: 64,
        },
        seed: 1,
        ..SynthSpec::default()
    })
    .unwrap();
    random_split(&ds, 0.8, 1).unwrap()
}

fn bench_retrieval(c: &mut Criterion) {
    let ds = dataset();
    let pool = ReferencePool::from_dataset(&ds);
    let query = ds.sample(ds.indices(refscore::Split::Test)[0]);
    let mut g = c.benchmark_group("retrieve");
    for tau in [0.3, 0.7] {
        g.bench_with_input(BenchmarkId::new("pool800", tau), &tau, |b, &tau| {
            b.iter(|| retrieve(black_box(query), &pool, tau).unwrap())
        });
    }
    g.finish();
}

fn bench_branch(c: &mut Criterion) {
    let dim = 64;
    let mut rng = Rng::new(2);
    let mut reg = ParamRegistry::new();
    let params = BranchParams::new(&mut reg, "b", dim, 1e-5, &mut rng).unwrap();
    let query: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    let feats: Vec<Vec<f64>> = (0..40).map(|_| (0..dim).map(|_| rng.normal()).collect()).collect();
    let ids: Vec<String> = (0..40).map(|i| format!("r{i:03}")).collect();
    let refs: Vec<RefFeature> = feats
        .iter()
        .zip(&ids)
        .map(|(f, id)| RefFeature {
            id,
            feat: f,
            weight: 0.9,
        })
        .collect();
    let mode = BranchMode::default();
    c.bench_function("branch/forward_d64_r40", |b| {
        b.iter(|| branch_forward(black_box(&query), &refs, &params, &reg, mode).unwrap())
    });
    let (out, cache) = branch_forward(&query, &refs, &params, &reg, mode).unwrap();
    let upstream = vec![1.0; out.enhanced.len()];
    c.bench_function("branch/backward_d64_r40", |b| {
        b.iter(|| branch_backward(&params, &mut reg, black_box(&cache), &upstream))
    });
}

fn bench_train_step(c: &mut Criterion) {
    let ds = dataset();
    let pool = ReferencePool::from_dataset(&ds);
    let cfg = ModelConfig::default();
    let mut rng = Rng::new(3);
    let train = ds.indices(refscore::Split::Train);
    let items: Vec<BatchItem> = train[..8]
        .iter()
        .map(|&i| {
            let s = ds.sample(i);
            let g = retrieve_for(&cfg, s, &pool, None, &mut rng).unwrap();
            BatchItem {
                sample: s,
                refs: resolve_refs(&g, &ds).unwrap(),
            }
        })
        .collect();
    let state = ModelState::new(cfg).unwrap();
    c.bench_function("train/batch_step_m8", |b| {
        b.iter_batched(
            || (state.clone(), Rng::new(4)),
            |(mut s, mut r)| batch_step(&mut s, &items, 0.3, true, &mut r).unwrap(),
            BatchSize::LargeInput,
        )
    });
}

fn bench_metrics(c: &mut Criterion) {
    let mut rng = Rng::new(5);
    let mut g = c.benchmark_group("metrics");
    for n in [100usize, 10_000] {
        let x: Vec<f64> = (0..n).map(|_| rng.below(50) as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| v + rng.normal() * 10.0).collect();
        g.bench_with_input(BenchmarkId::new("kendall", n), &n, |b, _| {
            b.iter(|| kendall(black_box(&x), &y).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("spearman", n), &n, |b, _| {
            b.iter(|| spearman(black_box(&x), &y).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench_retrieval, bench_branch, bench_train_step, bench_metrics);
criterion_main!(benches);
