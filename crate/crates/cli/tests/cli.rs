use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_refscore"));
    c.env_remove("RUST_LOG");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn refscore")
}

fn ok_json(args: &[&str]) -> Value {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn error_line(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1, "{text}");
    serde_json::from_str(lines[0]).expect("stderr is one JSON line")
}

fn synth(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec![
        "synth",
        "--out",
        out.to_str().unwrap(),
        "--n",
        "120",
        "--clusters",
        "6",
        "--prompt-dim",
        "32",
        "--visual-dim",
        "8",
        "--align-dim",
        "8",
    ];
    args.extend_from_slice(extra);
    ok_json(&args);
    out
}

#[test]
fn synth_is_reproducible_and_sized() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "a", &["--seed", "7"]);
    let b = synth(dir.path(), "b", &["--seed", "7"]);
    for f in ["manifest.jsonl", "prompt.rfq", "visual.rfq", "align.rfq"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let c = dir.path().join("c");
    let report = ok_json(&["synth", "--out", c.to_str().unwrap(), "--n", "100", "--clusters", "10"]);
    assert_eq!(report["samples"], 100);
    assert_eq!(report["train"], 80);
    let manifest = std::fs::read_to_string(c.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 100);
}

#[test]
fn usage_errors_exit_one_with_a_json_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["synth", "--out", dir.path().to_str().unwrap(), "--clusters", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["error"], "usage");

    let out = run(&["train", "--made-up-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["code"], 1);

    let out = run(&["synth", "--out", "x", "--mos-scale", "100"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d", &[]);
    let junk = dir.path().join("junk.rfqm");
    std::fs::write(&junk, b"RFQMjunk").unwrap();
    let out = run(&[
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--model",
        junk.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"], "data");

    let missing = dir.path().join("nothing");
    let out = run(&["pool-stats", "--data", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_eval_predict_round_trip_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d", &["--seed", "2"]);
    let d = data.to_str().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"epochs": 5, "lr": 0.001, "d_h": 8, "seed": 3}"#).unwrap();
    let mut stdout = Vec::new();
    let mut models = Vec::new();
    for k in 0..2 {
        let model = dir.path().join(format!("m{k}.rfqm"));
        let out = run(&[
            "train",
            "--data",
            d,
            "--out",
            model.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--epochs",
            "2",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        stdout.push(out.stdout);
        models.push(std::fs::read(&model).unwrap());
    }
    assert_eq!(stdout[0], stdout[1]);
    assert_eq!(models[0], models[1]);
    let report: Value = serde_json::from_slice(&stdout[0]).unwrap();
    // flag beats file
    assert_eq!(report["epochs"].as_array().unwrap().len(), 2);
    assert_eq!(report["model_seed"], 3);
    assert!(report.get("wall_time_s").is_none());

    let m = dir.path().join("m0.rfqm");
    let csv = dir.path().join("scores.csv");
    let eval = ok_json(&[
        "eval",
        "--data",
        d,
        "--model",
        m.to_str().unwrap(),
        "--csv",
        csv.to_str().unwrap(),
    ]);
    let n = eval["n"].as_u64().unwrap() as usize;
    assert_eq!(n, 24);
    let csv = std::fs::read_to_string(csv).unwrap();
    assert_eq!(csv.lines().next(), Some("id,mos,score"));
    assert_eq!(csv.lines().count(), n + 1);

    let out = run(&[
        "predict",
        "--data",
        d,
        "--model",
        m.to_str().unwrap(),
        "--split",
        "test",
    ]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), n);
    for (row, line) in rows.iter().zip(csv.lines().skip(1)) {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(row["id"], fields[0]);
        assert_eq!(row["score"].as_f64().unwrap(), fields[2].parse::<f64>().unwrap());
    }
}

#[test]
fn pool_stats_json_and_table_agree() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d", &[]);
    let d = data.to_str().unwrap();
    let json = ok_json(&["pool-stats", "--data", d]);
    let rows = json.as_array().unwrap();
    let taus: Vec<f64> = rows.iter().map(|r| r["tau"].as_f64().unwrap()).collect();
    assert_eq!(taus, [0.3, 0.5, 0.6, 0.7, 0.8]);
    let avgs: Vec<f64> = rows.iter().map(|r| r["mean"].as_f64().unwrap()).collect();
    assert!(avgs.windows(2).all(|w| w[1] <= w[0]), "{avgs:?}");

    let out = run(&["pool-stats", "--data", d, "--format", "table"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let body: Vec<&str> = text.lines().skip(2).collect();
    assert_eq!(body.len(), rows.len());
    for (line, row) in body.iter().zip(rows) {
        let cols: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(cols[1].parse::<u64>().unwrap(), row["min"].as_u64().unwrap());
        assert_eq!(cols[2].parse::<u64>().unwrap(), row["max"].as_u64().unwrap());
        assert!((cols[3].parse::<f64>().unwrap() - row["mean"].as_f64().unwrap()).abs() < 0.005);
    }
}

#[test]
fn retrieve_lists_weighted_references() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d", &[]);
    let manifest = std::fs::read_to_string(data.join("manifest.jsonl")).unwrap();
    let first: Value = serde_json::from_str(manifest.lines().next().unwrap()).unwrap();
    let id = first["id"].as_str().unwrap();
    let g = ok_json(&["retrieve", "--data", data.to_str().unwrap(), "--id", id, "--tau", "0.7"]);
    assert_eq!(g["query_id"], id);
    let refs = g["refs"].as_array().unwrap();
    assert!(!refs.is_empty());
    assert!(refs
        .iter()
        .all(|r| r["weight"].as_f64().unwrap() > 0.7 && r["id"] != id));
    let capped = ok_json(&[
        "retrieve",
        "--data",
        data.to_str().unwrap(),
        "--id",
        id,
        "--max-refs",
        "2",
    ]);
    assert_eq!(capped["refs"].as_array().unwrap()[..], refs[..2]);
}

#[test]
fn ablate_feature_by_aggregation_has_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d", &[]);
    let args = [
        "ablate",
        "--data",
        data.to_str().unwrap(),
        "--axes",
        "feature,aggregation",
        "--repeats",
        "1",
        "--epochs",
        "1",
        "--d-h",
        "4",
    ];
    let report = ok_json(&args);
    let rows = report["rows"].as_array().unwrap();
    let labels: Vec<&str> = rows.iter().map(|r| r["label"].as_str().unwrap()).collect();
    assert_eq!(labels, ["Diff + Graph", "Diff + Avg", "Self + Graph", "Self + Avg"]);
    assert!(rows.iter().all(|r| r["summary"]["srcc"]["mean"].is_number()));
    assert_eq!(ok_json(&args), report);
}

#[test]
fn gradcheck_reports_every_batch() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d", &[]);
    let report = ok_json(&[
        "gradcheck",
        "--data",
        data.to_str().unwrap(),
        "--batches",
        "2",
        "--h",
        "1e-5",
        "--tol",
        "1e-2",
        "--d-h",
        "4",
    ]);
    assert_eq!(report["batches"].as_array().unwrap().len(), 2);
    assert_eq!(report["passed"], true);

    let out = run(&[
        "gradcheck",
        "--data",
        data.to_str().unwrap(),
        "--batches",
        "1",
        "--tol",
        "0",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_line(&out)["error"], "numeric");
}

#[test]
fn every_command_documents_its_flags() {
    for cmd in [
        "synth",
        "train",
        "eval",
        "predict",
        "retrieve",
        "gradcheck",
        "ablate",
        "pool-stats",
    ] {
        let out = run(&[cmd, "--help"]);
        assert!(out.status.success(), "{cmd}");
        let text = String::from_utf8(out.stdout).unwrap();
        assert!(text.contains("--format"), "{cmd}");
        assert!(text.contains("Usage:"), "{cmd}");
    }
    let train = String::from_utf8(run(&["train", "--help"]).stdout).unwrap();
    for flag in [
        "--config",
        "--lr",
        "--seed",
        "--max-refs",
        "--no-visual-refs",
        "--timings",
    ] {
        assert!(train.contains(flag), "{flag}");
    }
}
