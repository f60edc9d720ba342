use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use maple_core::data::{gen_synthetic, split, SyntheticKind, SyntheticSpec};
use maple_core::forest::{Ensemble, EnsembleConfig};
use serde_json::Value;
use tempfile::TempDir;

fn maple(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maple")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = maple(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn json(args: &[&str]) -> Value {
    serde_json::from_str(&ok(args)).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &TempDir, kind: &str, seed: u64) -> PathBuf {
    let path = dir.path().join(format!("{kind}-{seed}.csv"));
    let seed = seed.to_string();
    ok(&["synth", "--kind", kind, "--n", "200", "--p", "5", "--noise", "0.1", "--seed", &seed, "--out", s(&path)]);
    path
}

fn train(dir: &TempDir, data: &Path, extra: &[&str]) -> PathBuf {
    let path = dir.path().join(format!("{}.model.json", data.file_stem().unwrap().to_str().unwrap()));
    let mut args = vec!["train", "--data", s(data), "--out", s(&path)];
    args.extend_from_slice(extra);
    ok(&args);
    path
}

fn verdict(model: &Path, data: &Path, dir: &TempDir) -> String {
    let out = dir.path().join("grid.csv");
    let stdout = ok(&["diagnose", "--model", s(model), "--data", s(data), "--feature", "x1", "--out", s(&out)]);
    stdout.lines().last().unwrap().to_string()
}

#[test]
fn synth_is_deterministic_and_validates_size() {
    let dir = TempDir::new().unwrap();
    let a = std::fs::read(synth(&dir, "sil", 3)).unwrap();
    let b = dir.path().join("again.csv");
    ok(&["synth", "--kind", "sil", "--seed", "3", "--out", s(&b)]);
    assert_eq!(a, std::fs::read(&b).unwrap());
    let header = String::from_utf8(a).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header, "x1,x2,x3,x4,x5,y");

    let bad = maple(&["synth", "--kind", "step", "--n", "0", "--out", s(&b)]);
    assert_eq!(bad.status.code(), Some(1));
    let bad = maple(&["synth", "--kind", "wiggly", "--out", s(&b)]);
    assert_eq!(bad.status.code(), Some(1));
    assert_eq!(maple(&["--help"]).status.code(), Some(0));
}

#[test]
fn train_on_noiseless_linear_keeps_the_active_feature() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("clean.csv");
    ok(&["synth", "--kind", "linear", "--noise", "0", "--seed", "1", "--out", s(&data)]);
    let model = dir.path().join("m.json");
    let summary = json(&["train", "--data", s(&data), "--seed", "1", "--out", s(&model)]);
    assert_eq!(summary["ensemble"], "rf");
    assert_eq!(summary["mode"], "self");
    assert_eq!(summary["n_train"], 100);
    let selected: Vec<&str> = summary["selected"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert!(selected.contains(&"x1"), "{selected:?}");
    assert_eq!(summary["d"].as_u64().unwrap() as usize, selected.len());

    let report = json(&["predict", "--model", s(&model), "--data", s(&data)]);
    assert_eq!(report["predictions"].as_array().unwrap().len(), 200);
    assert!(report["rmse"].as_f64().unwrap() < 0.05, "{}", report["rmse"]);
}

#[test]
fn gbrt_settings_reach_the_bundle() {
    let dir = TempDir::new().unwrap();
    let data = synth(&dir, "sil", 2);
    let model = train(&dir, &data, &["--ensemble", "gbrt", "--trees", "20", "--min-leaf", "5", "--seed", "2"]);
    let bundle: Value = serde_json::from_str(&std::fs::read_to_string(&model).unwrap()).unwrap();
    let text = bundle.to_string();
    assert!(text.contains("\"gbrt\"") || text.contains("\"Gbrt\""), "kind missing from bundle");
    assert_eq!(bundle["target"], "y");
    let e = maple_core::maple::MapleModel::load(&model).unwrap();
    assert_eq!(e.ensemble.n_trees(), 20);
}

#[test]
fn blackbox_predictions_must_cover_every_row() {
    let dir = TempDir::new().unwrap();
    let data = synth(&dir, "step", 0);
    let preds = dir.path().join("preds.csv");
    std::fs::write(&preds, "pred\n1.0\n2.0\n").unwrap();
    let model = dir.path().join("m.json");
    let out = maple(&["train", "--data", s(&data), "--blackbox-preds", s(&preds), "--out", s(&model)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error:") && err.trim_end().lines().count() == 1, "{err}");
    assert!(!model.exists());
}

#[test]
fn explain_returns_requested_neighbors() {
    let dir = TempDir::new().unwrap();
    let data = synth(&dir, "linear", 4);
    let model = train(&dir, &data, &["--seed", "4"]);
    let rec = json(&["explain", "--model", s(&model), "--point", "[0.5, 0.5, 0.5, 0.5, 0.5]", "--topk", "20"]);
    assert_eq!(rec["top_weights"].as_array().unwrap().len(), 20);
    assert!(rec["coefficients"]["x1"].as_f64().unwrap() > 0.5);
    let y = rec["prediction_data_units"].as_f64().unwrap();
    assert!((y - 0.5).abs() < 0.15, "{y}");

    let by_index = json(&["explain", "--model", s(&model), "--point", "0"]);
    assert_eq!(by_index["query"].as_array().unwrap().len(), 6);

    for bad in ["[0.5, 0.5]", "not json", "100000"] {
        let out = maple(&["explain", "--model", s(&model), "--point", bad]);
        assert_eq!(out.status.code(), Some(2), "{bad}");
    }
}

#[test]
fn diagnose_flags_the_step() {
    let dir = TempDir::new().unwrap();
    let data = synth(&dir, "step", 0);
    let model = train(&dir, &data, &[]);
    let line = verdict(&model, &data, &dir);
    // seeded run with default settings: score 0.6024
    assert!(line.starts_with("pattern_detected score="), "{line}");

    let csv = std::fs::read_to_string(dir.path().join("grid.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("grid_value,repeat,min,q1,median,q3,max"));
    // one row per grid cell and repeat
    assert_eq!(lines.count(), 11 * 10);

    let out = maple(&["diagnose", "--model", s(&model), "--data", s(&data), "--feature", "x9", "--out", s(&dir.path().join("g.csv"))]);
    assert_eq!(out.status.code(), Some(2));
}

/// Forest predictions as the black box, as in the influence study.
fn forest_preds(kind: SyntheticKind, seed: u64, dir: &TempDir) -> PathBuf {
    let ds = gen_synthetic(&SyntheticSpec {
        kind,
        n: 200,
        p: 5,
        noise_sigma: 0.1,
        seed,
    })
    .unwrap();
    let sp = split(ds.n(), seed).unwrap();
    let mut cfg = EnsembleConfig::random_forest(5).with_seed(seed);
    cfg.max_features = 5;
    cfg.min_samples_leaf = 1;
    let e = Ensemble::fit_random_forest(&ds.rows(&sp.train_idx), &ds.targets(&sp.train_idx), &cfg).unwrap();
    let path = dir.path().join(format!("{kind:?}-{seed}.preds.csv"));
    let body: String = ds.x.iter().map(|x| format!("{}\n", e.predict(x))).collect();
    std::fs::write(&path, format!("prediction\n{body}")).unwrap();
    path
}

#[test]
fn diagnose_separates_step_from_linear_blackboxes() {
    let dir = TempDir::new().unwrap();
    let mut lines = Vec::new();
    for (kind, name) in [(SyntheticKind::Step, "step"), (SyntheticKind::Linear, "linear")] {
        let data = synth(&dir, name, 0);
        let preds = forest_preds(kind, 0, &dir);
        let model = train(&dir, &data, &["--blackbox-preds", s(&preds)]);
        let bundle = std::fs::read_to_string(&model).unwrap();
        assert!(bundle.contains("lackbox"), "mode missing from bundle");
        lines.push(verdict(&model, &data, &dir));
    }
    assert!(lines[0].starts_with("pattern_detected"), "{lines:?}");
    assert!(lines[1].starts_with("none"), "{lines:?}");
}

#[test]
fn eval_scores_own_explanations() {
    let dir = TempDir::new().unwrap();
    let data = synth(&dir, "sil", 5);
    let model = train(&dir, &data, &["--seed", "5"]);
    let report = json(&["eval", "--model", s(&model), "--data", s(&data), "--metric", "standard", "--trials", "1"]);
    let methods = report["methods"].as_array().unwrap();
    assert_eq!(methods[0]["method"], "maple");
    assert_eq!(methods[0]["values"].as_array().unwrap().len(), 1);
    assert!(methods[0]["mean"].as_f64().unwrap().abs() < 1e-12);

    let causal = json(&["eval", "--model", s(&model), "--data", s(&data), "--trials", "2", "--seed", "3"]);
    let values = causal["methods"][0]["values"].as_array().unwrap();
    assert!(values.iter().all(|v| v.as_f64().unwrap() > 0.0));

    let md = ok(&["eval", "--model", s(&model), "--data", s(&data), "--metric", "rmse", "--markdown"]);
    assert!(md.contains("maple"));
    assert_eq!(maple(&["eval", "--model", s(&model)]).status.code(), Some(1));
}

#[test]
fn exemplar_prefers_its_own_side_of_the_step() {
    let dir = TempDir::new().unwrap();
    let data = synth(&dir, "step", 5);
    let model = train(&dir, &data, &["--seed", "5"]);
    let low = "[0.1, 0.5, 0.5, 0.5, 0.5]";
    let high = "[0.9, 0.5, 0.5, 0.5, 0.5]";
    let out = json(&[
        "exemplar", "--model", s(&model), "--exemplar", low, "--exemplar", high, "--point", "[0.95, 0.5, 0.5, 0.5, 0.5]",
    ]);
    assert_eq!(out["scores"].as_array().unwrap().len(), 2);
    assert_eq!(out["choice"]["decision"], "chosen");
    assert_eq!(out["choice"]["index"], 1);
}

#[test]
fn runs_are_reproducible_across_processes() {
    let dir = TempDir::new().unwrap();
    let data = synth(&dir, "sil", 6);
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    ok(&["train", "--data", s(&data), "--seed", "6", "--out", s(&a)]);
    ok(&["--threads", "1", "train", "--data", s(&data), "--seed", "6", "--out", s(&b)]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let pa = ok(&["predict", "--model", s(&a), "--data", s(&data)]);
    let pb = ok(&["predict", "--model", s(&b), "--data", s(&data)]);
    assert_eq!(pa, pb);
    let ea = ok(&["eval", "--model", s(&a), "--data", s(&data), "--trials", "2"]);
    let eb = ok(&["--threads", "2", "eval", "--model", s(&a), "--data", s(&data), "--trials", "2"]);
    assert_eq!(ea, eb);
}
