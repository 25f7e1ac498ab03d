use std::fs;
use std::io::Write;
use std::path::Path;

use log::info;
use refscore::ablation::{run_ablation, AblationAxis, AblationReport};
use refscore::dataio::{generate_synthetic, load_dataset, random_split, write_dataset, Dims, SynthSpec, MANIFEST_FILE};
use refscore::metrics::evaluate_with_predictions;
use refscore::model::{load_model, resolve_refs, retrieve_for, save_model, score_samples, ModelConfig};
use refscore::numkit::Rng;
use refscore::retrieval::{pool_stats, PoolStats, ReferencePool};
use refscore::training::{model_grad_check, train, BatchItem, TrainReport};
use refscore::{Dataset, ModelState, Split};
use serde::Serialize;
use serde_json::json;

use crate::error::CliError;
use crate::output::{emit, fmt_f, write_stdout, Format, Table};
use crate::{
    AblateArgs, EvalArgs, GradcheckArgs, PoolStatsArgs, PredictArgs, RetrieveArgs, SplitChoice, SynthArgs, TrainArgs,
};

/// Accepts either a manifest file or the directory holding one.
fn open_dataset(path: &Path) -> Result<Dataset, CliError> {
    let manifest = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let ds = load_dataset(&manifest)?;
    info!(
        "{}: {} samples ({} train, {} test)",
        manifest.display(),
        ds.len(),
        ds.count(Split::Train),
        ds.count(Split::Test)
    );
    Ok(ds)
}

fn parse_pair(s: &str) -> Result<(f64, f64), CliError> {
    let bad = || CliError::usage(format!("--mos-scale expects LOW,HIGH, got `{s}`"));
    let (a, b) = s.split_once(',').ok_or_else(bad)?;
    Ok((
        a.trim().parse().map_err(|_| bad())?,
        b.trim().parse().map_err(|_| bad())?,
    ))
}

pub fn synth(args: &SynthArgs, format: Format) -> Result<(), CliError> {
    let spec = SynthSpec {
        n_samples: args.n,
        n_clusters: args.clusters,
        dims: Dims {
            prompt: args.prompt_dim,
            visual: args.visual_dim,
            align: args.align_dim,
        },
        cluster_spread: args.spread,
        quality_noise: args.noise,
        mos_range: parse_pair(&args.mos_scale)?,
        seed: args.seed,
    };
    let ds = generate_synthetic(&spec)?;
    let ds = random_split(&ds, args.train_frac, args.seed)?;
    let manifest = write_dataset(&ds, &args.out)?;
    let summary = json!({
        "manifest": manifest,
        "samples": ds.len(),
        "train": ds.count(Split::Train),
        "test": ds.count(Split::Test),
    });
    emit(format, &summary, |v| {
        let mut t = Table::new(["field", "value"]);
        if let Some(m) = v.as_object() {
            for (k, x) in m {
                t.row([k.clone(), x.to_string().trim_matches('"').to_string()]);
            }
        }
        t
    })
}

pub fn train_cmd(args: &TrainArgs, format: Format) -> Result<(), CliError> {
    let ds = open_dataset(&args.data)?;
    let (mc, tc) = args.config.resolve(ds.dims())?;
    let (model, report) = train(&ds, &mc, &tc)?;
    save_model(&model, &args.out)?;
    info!("saved {} parameters to {}", model.num_parameters(), args.out.display());
    let report = if args.timings { report } else { report.without_timing() };
    emit(format, &report, |r: &TrainReport| {
        let mut t = Table::new([
            "epoch",
            "lr",
            "batch total",
            "train PLCC loss",
            "train rank loss",
            "train total",
        ]);
        for e in &r.epochs {
            t.row([
                e.epoch.to_string(),
                format!("{:.3e}", e.lr),
                fmt_f(e.total),
                fmt_f(e.train_loss.plcc),
                fmt_f(e.train_loss.rank),
                fmt_f(e.train_loss.total),
            ]);
        }
        t
    })
}

fn load_for(path: &Path, ds: &Dataset) -> Result<ModelState, CliError> {
    let model = load_model(path)?;
    let dims = ds.dims();
    if (model.config.d_v, model.config.d_s) != (dims.visual, dims.align) {
        return Err(CliError::data(format!(
            "model expects visual/align dims {}/{}, data has {}/{}",
            model.config.d_v, model.config.d_s, dims.visual, dims.align
        )));
    }
    Ok(model)
}

pub fn eval(args: &EvalArgs, format: Format) -> Result<(), CliError> {
    let ds = open_dataset(&args.data)?;
    let model = load_for(&args.model, &ds)?;
    let pool = ReferencePool::from_dataset(&ds);
    let split = match args.split {
        SplitChoice::Train => Split::Train,
        SplitChoice::Test => Split::Test,
        SplitChoice::All => return Err(CliError::usage("eval needs --split train or --split test")),
    };
    let (result, preds) = evaluate_with_predictions(&model, &ds, split, &pool)?;
    if let Some(csv) = &args.csv {
        let mut w = std::io::BufWriter::new(
            fs::File::create(csv).map_err(|e| CliError::data(format!("{}: {e}", csv.display())))?,
        );
        writeln!(w, "id,mos,score")?;
        for p in &preds {
            writeln!(w, "{},{},{}", p.id, p.mos, p.score)?;
        }
        w.flush()?;
    }
    emit(format, &result, |r| {
        let mut t = Table::new(["metric", "value"]);
        t.row(["SRCC".to_string(), fmt_f(r.srcc)]);
        t.row(["PLCC".to_string(), fmt_f(r.plcc)]);
        t.row(["KRCC".to_string(), fmt_f(r.krcc)]);
        t.row(["RMSE".to_string(), fmt_f(r.rmse)]);
        t.row(["n".to_string(), r.n.to_string()]);
        t
    })
}

#[derive(Serialize)]
struct Scored<'a> {
    id: &'a str,
    score: f64,
}

pub fn predict(args: &PredictArgs, format: Format) -> Result<(), CliError> {
    let ds = open_dataset(&args.data)?;
    let model = load_for(&args.model, &ds)?;
    let pool = ReferencePool::from_dataset(&ds);
    let indices: Vec<usize> = match args.split {
        SplitChoice::All => (0..ds.len()).collect(),
        SplitChoice::Train => ds.indices(Split::Train),
        SplitChoice::Test => ds.indices(Split::Test),
    };
    let scores = score_samples(&model, &ds, &indices, &pool)?;
    let rows: Vec<Scored> = indices
        .iter()
        .zip(&scores)
        .map(|(&i, (score, _))| Scored {
            id: &ds.sample(i).id,
            score: *score,
        })
        .collect();
    match format {
        Format::Json => {
            let mut text = String::new();
            for r in &rows {
                text.push_str(&serde_json::to_string(r).map_err(|e| CliError::data(e.to_string()))?);
                text.push('\n');
            }
            write_stdout(&text)
        }
        Format::Table => {
            let mut t = Table::new(["id", "score"]);
            for r in &rows {
                t.row([r.id.to_string(), fmt_f(r.score)]);
            }
            write_stdout(&t.render())
        }
    }
}

pub fn retrieve(args: &RetrieveArgs, format: Format) -> Result<(), CliError> {
    let ds = open_dataset(&args.data)?;
    let query = ds
        .get(&args.id)
        .ok_or_else(|| CliError::usage(format!("no sample with id `{}`", args.id)))?;
    let cfg = ModelConfig {
        tau: args.tau,
        max_refs: args.max_refs,
        random_k: args.random_k,
        strategy: serde_json::from_value(json!(args.strategy))
            .map_err(|e| CliError::usage(format!("--strategy: {e}")))?,
        seed: args.seed,
        ..ModelConfig::default()
    };
    let pool = ReferencePool::from_dataset(&ds);
    let mut rng = Rng::new(args.seed);
    let graph = retrieve_for(&cfg, query, &pool, None, &mut rng)?;
    emit(format, &graph, |g| {
        let mut t = Table::new(["reference", "weight"]);
        for r in &g.refs {
            t.row([r.id.clone(), fmt_f(r.weight)]);
        }
        t
    })
}

#[derive(Serialize)]
struct GradcheckBatch {
    batch: usize,
    max_rel_err: f64,
    worst_param: Option<String>,
    passed: bool,
}

#[derive(Serialize)]
struct GradcheckSummary {
    h: f64,
    tol: f64,
    max_rel_err: f64,
    passed: bool,
    batches: Vec<GradcheckBatch>,
}

pub fn gradcheck(args: &GradcheckArgs, format: Format) -> Result<(), CliError> {
    let ds = open_dataset(&args.data)?;
    let (mc, tc) = args.config.resolve(ds.dims())?;
    let pool = ReferencePool::from_dataset(&ds);
    let train_idx = ds.indices(Split::Train);
    if train_idx.len() < args.samples || args.samples < 2 {
        return Err(CliError::usage(format!(
            "--samples must be in 2..={} (train split size)",
            train_idx.len()
        )));
    }
    let mut rng = Rng::new(tc.seed);
    let mut batches = Vec::new();
    for b in 0..args.batches {
        let mut state = ModelState::new(ModelConfig {
            seed: mc.seed.wrapping_add(b as u64),
            ..mc.clone()
        })?;
        let ids: Vec<_> = state.registry.ids().collect();
        for id in ids {
            state
                .registry
                .value_mut(id)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v += args.jitter * rng.normal());
        }
        let mut picks = train_idx.clone();
        rng.shuffle(&mut picks);
        let mut items = Vec::with_capacity(args.samples);
        for &i in &picks[..args.samples] {
            let s = ds.sample(i);
            let graph = retrieve_for(&mc, s, &pool, None, &mut rng)?;
            items.push(BatchItem {
                sample: s,
                refs: resolve_refs(&graph, &ds)?,
            });
        }
        let report = model_grad_check(
            &state,
            &items,
            tc.gamma,
            Some(tc.seed.wrapping_add(b as u64)),
            args.h,
            args.tol,
        )?;
        batches.push(GradcheckBatch {
            batch: b,
            max_rel_err: report.max_rel_err,
            worst_param: report.worst().map(|p| p.name.clone()),
            passed: report.passed,
        });
    }
    let summary = GradcheckSummary {
        h: args.h,
        tol: args.tol,
        max_rel_err: batches.iter().map(|b| b.max_rel_err).fold(0.0, f64::max),
        passed: batches.iter().all(|b| b.passed),
        batches,
    };
    emit(format, &summary, |s| {
        let mut t = Table::new(["batch", "max rel err", "worst parameter", "ok"]);
        for b in &s.batches {
            t.row([
                b.batch.to_string(),
                format!("{:.2e}", b.max_rel_err),
                b.worst_param.clone().unwrap_or_default(),
                if b.passed { "yes" } else { "NO" }.to_string(),
            ]);
        }
        t
    })?;
    if summary.passed {
        Ok(())
    } else {
        Err(CliError::numeric(format!(
            "gradient check failed: max relative error {:.3e} > {:.1e}",
            summary.max_rel_err, args.tol
        )))
    }
}

pub fn ablate(args: &AblateArgs, format: Format) -> Result<(), CliError> {
    let ds = open_dataset(&args.data)?;
    let (mc, tc) = args.config.resolve(ds.dims())?;
    let axes: Vec<AblationAxis> = args
        .axes
        .iter()
        .map(|a| a.parse().map_err(CliError::usage))
        .collect::<Result<_, _>>()?;
    let report = run_ablation(&ds, &mc, &tc, &axes);
    emit(format, &report, |r: &AblationReport| {
        let mut t = Table::new(["setting", "SRCC", "PLCC", "KRCC", "RMSE"]);
        for row in &r.rows {
            match (&row.summary, &row.error) {
                (Some(s), _) => t.row([
                    row.label.clone(),
                    s.srcc.to_string(),
                    s.plcc.to_string(),
                    s.krcc.to_string(),
                    s.rmse.to_string(),
                ]),
                (None, e) => t.row([row.label.clone(), format!("failed: {}", e.clone().unwrap_or_default())]),
            }
        }
        t
    })
}

pub fn pool_stats_cmd(args: &PoolStatsArgs, format: Format) -> Result<(), CliError> {
    let ds = open_dataset(&args.data)?;
    let pool = ReferencePool::from_dataset(&ds);
    let mut taus = args.tau.clone();
    taus.sort_by(f64::total_cmp);
    taus.dedup();
    let stats: Vec<PoolStats> = taus
        .iter()
        .map(|&tau| pool_stats(&pool, &ds, tau))
        .collect::<Result<_, _>>()?;
    emit(format, &stats, |s| {
        let mut t = Table::new(["tau", "MIN", "MAX", "AVG"]);
        for p in s {
            t.row([
                format!("{}", p.tau),
                p.min.to_string(),
                p.max.to_string(),
                format!("{:.2}", p.mean),
            ]);
        }
        t
    })
}
