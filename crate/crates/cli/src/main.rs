//! `maple`: fit, explain, diagnose and evaluate MAPLE models from the shell.
//!
//! Machine-readable output goes to stdout, progress and summaries to stderr.
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use maple_core::data::{self, SyntheticKind, SyntheticSpec};
use maple_core::diagnostics::{self, ExemplarLibrary, GridOptions, Sampler};
use maple_core::eval::{self, CausalConfig, Metric, ProtocolSpec, TrialReport};
use maple_core::forest::EnsembleKind;
use maple_core::maple::{MapleModel, MapleOptions};
use maple_core::silo::LinearForm;

#[derive(Parser)]
#[command(name = "maple", version, about = "Local linear explanations from tree-ensemble neighborhoods")]
struct Cli {
    /// Worker threads for fitting and evaluation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (x1..xp, y) as CSV.
    Synth(SynthArgs),
    /// Split, standardize and fit a model; writes a JSON bundle.
    Train(TrainArgs),
    /// Predict every row of a CSV with a fitted model.
    Predict(PredictArgs),
    /// Explain one point: local coefficients and influential training rows.
    Explain(ExplainArgs),
    /// Grid search over one feature's influential-point distributions.
    Diagnose(DiagnoseArgs),
    /// Pick the exemplar explanation that best applies to a point.
    Exemplar(ExemplarArgs),
    /// Score explanations or run a multi-trial protocol.
    Eval(EvalArgs),
}

fn positive(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    kind: SyntheticKind,
    #[arg(long, default_value = "200", value_parser = positive)]
    n: usize,
    #[arg(long, default_value = "5", value_parser = positive)]
    p: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "y")]
    target: String,
    #[arg(long, default_value = "rf")]
    ensemble: EnsembleKind,
    #[arg(long, value_parser = positive)]
    trees: Option<usize>,
    #[arg(long, value_parser = positive)]
    min_leaf: Option<usize>,
    #[arg(long, default_value_t = maple_core::maple::DEFAULT_RIDGE)]
    ridge: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// One-column CSV of black-box predictions, one per data row.
    #[arg(long)]
    blackbox_preds: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// CSV with the model's feature columns; a target column, if present, is scored.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    model: PathBuf,
    /// JSON array of feature values in data units, or a training-row index.
    #[arg(long)]
    point: String,
    #[arg(long, default_value_t = diagnostics::DEFAULT_TOP_K)]
    topk: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplerArg {
    Marginals,
    Rows,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    model: PathBuf,
    /// Data whose range of the feature sets the grid.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    feature: String,
    #[arg(long, default_value = "11", value_parser = positive)]
    grid_points: usize,
    #[arg(long, default_value = "10", value_parser = positive)]
    repeats: usize,
    #[arg(long, default_value = "20", value_parser = positive)]
    k: usize,
    #[arg(long, value_enum, default_value = "marginals")]
    sampler: SamplerArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExemplarArgs {
    #[arg(long)]
    model: PathBuf,
    /// Exemplar query (JSON array or training-row index); repeat for a library.
    #[arg(long = "exemplar", required = true)]
    exemplars: Vec<String>,
    #[arg(long)]
    point: String,
    #[arg(long, default_value_t = 0.1)]
    threshold: f64,
    #[arg(long, default_value_t = 0.05)]
    margin: f64,
}

#[derive(Args)]
struct EvalArgs {
    /// Protocol document (JSON or TOML); flags below override its fields.
    #[arg(long, conflicts_with_all = ["model", "explanations"])]
    protocol: Option<PathBuf>,
    #[arg(long, requires = "data")]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Response column of --data (defaults to the model's training target).
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    metric: Option<Metric>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, value_parser = positive)]
    draws: Option<usize>,
    #[arg(long, value_parser = positive)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// External explanations, one row per data row, in standardized units.
    #[arg(long)]
    explanations: Option<PathBuf>,
    /// Print a markdown table instead of JSON.
    #[arg(long)]
    markdown: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Explain(a) => explain(a),
        Command::Diagnose(a) => diagnose(a),
        Command::Exemplar(a) => exemplar(a),
        Command::Eval(a) => evaluate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::from(2)
        }
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let ds = data::gen_synthetic(&SyntheticSpec {
        kind: a.kind,
        n: a.n,
        p: a.p,
        noise_sigma: a.noise,
        seed: a.seed,
    })?;
    data::write_csv(&ds, &a.out, "y")?;
    eprintln!("wrote {} rows x {} features to {}", ds.n(), ds.p(), a.out.display());
    Ok(())
}

/// Reads a one-column CSV of numbers; a non-numeric first row is a header.
fn read_column(path: &Path) -> Result<Vec<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut values = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != 1 {
            bail!("{}: row {} has {} columns, expected 1", path.display(), row + 1, rec.len());
        }
        match rec[0].trim().parse::<f64>() {
            Ok(v) if v.is_finite() => values.push(v),
            _ if row == 0 => continue,
            _ => bail!("{}: row {}: {:?} is not a finite number", path.display(), row + 1, &rec[0]),
        }
    }
    Ok(values)
}

fn train(a: TrainArgs) -> Result<()> {
    let raw = data::load_csv(&a.data, &a.target)?;
    let split = data::split(raw.n(), a.seed)?;
    let ds = data::standardize(&raw, &split)?;
    let mut opts = MapleOptions::new(a.ensemble, ds.p()).with_seed(a.seed);
    if let Some(t) = a.trees {
        opts.ensemble.n_trees = t;
    }
    if let Some(l) = a.min_leaf {
        opts.ensemble.min_samples_leaf = l;
    }
    opts.ridge = a.ridge;
    let mut model = match &a.blackbox_preds {
        Some(path) => {
            let preds = read_column(path)?;
            if preds.len() != raw.n() {
                bail!("{} has {} predictions for {} data rows", path.display(), preds.len(), raw.n());
            }
            // black-box outputs share the response's units and scaling
            let s = ds.standardizer.as_ref().expect("standardized");
            let scaled: Vec<f64> = preds.iter().map(|&v| s.transform_y(v)).collect();
            MapleModel::fit_blackbox(&ds, &split, &scaled, &opts)?
        }
        None => MapleModel::fit(&ds, &split, &opts)?,
    };
    model.target = Some(a.target.clone());
    model.save(&a.out)?;

    let selected: Vec<&str> = model.selected.iter().map(|&j| model.feature_names[j - 1].as_str()).collect();
    let val_rmse = model.selection_curve.iter().find(|c| c.0 == model.d).map(|c| c.1);
    eprintln!(
        "fitted {} on {} rows: d = {} of {} ({})",
        a.ensemble,
        split.train_idx.len(),
        model.d,
        model.p(),
        selected.join(", ")
    );
    print_json(&json!({
        "model": a.out,
        "ensemble": a.ensemble.to_string(),
        "mode": model.mode,
        "n_train": split.train_idx.len(),
        "n_validation": split.val_idx.len(),
        "d": model.d,
        "selected": selected,
        "validation_rmse": val_rmse,
    }))
}

/// Feature matrix of a CSV, columns matched by name to the model's features,
/// plus the target column when present.
struct Table {
    rows: Vec<Vec<f64>>,
    target: Option<Vec<f64>>,
}

fn read_table(path: &Path, features: &[String], target: Option<&str>) -> Result<Table> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let cols: Vec<usize> = features
        .iter()
        .map(|f| {
            headers
                .iter()
                .position(|h| h == f)
                .ok_or_else(|| anyhow!("{}: missing feature column {f:?}", path.display()))
        })
        .collect::<Result<_>>()?;
    let target_col = target.and_then(|t| headers.iter().position(|h| h == t));
    let mut rows = Vec::new();
    let mut ys = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let cell = |c: usize| -> Result<f64> {
            let s = rec.get(c).unwrap_or("").trim();
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| anyhow!("{}: row {}, column {:?}: {s:?} is not a number", path.display(), r + 1, headers[c]))
        };
        let mut row = Vec::with_capacity(cols.len() + 1);
        row.push(1.0);
        for &c in &cols {
            row.push(cell(c)?);
        }
        rows.push(row);
        if let Some(c) = target_col {
            ys.push(cell(c)?);
        }
    }
    if rows.is_empty() {
        bail!("{}: no data rows", path.display());
    }
    Ok(Table {
        rows,
        target: target_col.map(|_| ys),
    })
}

fn to_model_units(model: &MapleModel, raw: &[f64]) -> Vec<f64> {
    match &model.standardizer {
        Some(s) => s.transform_row(raw),
        None => raw.to_vec(),
    }
}

fn to_data_y(model: &MapleModel, y: f64) -> f64 {
    model.standardizer.as_ref().map_or(y, |s| s.inverse_y(y))
}

/// A point given as a training-row index or a JSON array in data units;
/// returned in model units.
fn parse_point(model: &MapleModel, spec: &str) -> Result<Vec<f64>> {
    if let Ok(i) = spec.trim().parse::<usize>() {
        return model
            .x_train
            .get(i)
            .cloned()
            .ok_or_else(|| anyhow!("training row {i} out of range (model has {})", model.x_train.len()));
    }
    let values: Vec<f64> =
        serde_json::from_str(spec).map_err(|e| anyhow!("point must be a row index or a JSON array of numbers: {e}"))?;
    if values.len() != model.p() {
        bail!("point has {} values, model expects {}", values.len(), model.p());
    }
    let mut raw = Vec::with_capacity(values.len() + 1);
    raw.push(1.0);
    raw.extend(values);
    Ok(to_model_units(model, &raw))
}

fn predict(a: PredictArgs) -> Result<()> {
    let model = MapleModel::load(&a.model)?;
    let table = read_table(&a.data, &model.feature_names, model.target.as_deref())?;
    let rows: Vec<Vec<f64>> = table.rows.iter().map(|r| to_model_units(&model, r)).collect();
    let preds: Vec<f64> = model.predict_many(&rows)?.into_iter().map(|y| to_data_y(&model, y)).collect();
    let rmse = match &table.target {
        Some(y) => Some(eval::rmse(&preds, y)?),
        None => None,
    };
    if let Some(r) = rmse {
        eprintln!("{} rows, rmse {r:.4}", preds.len());
    }
    print_json(&json!({ "predictions": preds, "rmse": rmse }))
}

fn explain(a: ExplainArgs) -> Result<()> {
    let model = MapleModel::load(&a.model)?;
    let x = parse_point(&model, &a.point)?;
    let e = model.explain(&x)?;
    let record = model.explanation_record(&e, a.topk);
    let mut value = serde_json::to_value(&record)?;
    value["prediction_data_units"] = json!(to_data_y(&model, record.prediction));
    eprintln!(
        "prediction {:.4} from {} selected feature(s)",
        record.prediction,
        record.coefficients.len()
    );
    print_json(&value)
}

fn diagnose(a: DiagnoseArgs) -> Result<()> {
    let model = MapleModel::load(&a.model)?;
    let j = model
        .feature_names
        .iter()
        .position(|f| *f == a.feature)
        .map(|i| i + 1)
        .ok_or_else(|| anyhow!("unknown feature {:?}", a.feature))?;
    let table = read_table(&a.data, &model.feature_names, None)?;
    let (lo, hi) = table
        .rows
        .iter()
        .map(|r| r[j])
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let (scale, shift) = match &model.standardizer {
        Some(s) => (s.x_std[j - 1], s.x_mean[j - 1]),
        None => (1.0, 0.0),
    };
    let grid: Vec<f64> = diagnostics::even_grid(lo, hi, a.grid_points)
        .into_iter()
        .map(|g| (g - shift) / scale)
        .collect();
    let opts = GridOptions {
        repeats: a.repeats,
        k: a.k,
        sampler: match a.sampler {
            SamplerArg::Marginals => Sampler::EmpiricalMarginals,
            SamplerArg::Rows => Sampler::TrainingRows,
        },
        seed: a.seed,
    };
    let gd = diagnostics::grid_diagnostic(&model, j, &grid, &opts)?;
    let file = File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    gd.write_csv(file, scale, shift)?;
    let verdict = diagnostics::detect_global_pattern(&gd)?;
    for (g, cell) in gd.grid.iter().zip(&gd.per_cell) {
        let c = cell.affine(scale, shift);
        eprintln!("{:>12.4}  q1 {:>10.4}  median {:>10.4}  q3 {:>10.4}", scale * g + shift, c.q1, c.median, c.q3);
    }
    eprintln!("max adjacent IQR gap {:.3}", verdict.max_gap);
    let label = if verdict.pattern_detected { "pattern_detected" } else { "none" };
    println!("{label} score={:.4}", verdict.score);
    Ok(())
}

fn exemplar(a: ExemplarArgs) -> Result<()> {
    let model = MapleModel::load(&a.model)?;
    let x = parse_point(&model, &a.point)?;
    let exemplars = a
        .exemplars
        .iter()
        .map(|s| Ok(model.explain(&parse_point(&model, s)?)?))
        .collect::<Result<Vec<_>>>()?;
    let scores = exemplars
        .iter()
        .map(|e| diagnostics::exemplar_fit_score(&model, e, &x))
        .collect::<maple_core::Result<Vec<f64>>>()?;
    let mut lib = ExemplarLibrary::new(exemplars);
    lib.applicability_threshold = a.threshold;
    lib.ambiguity_margin = a.margin;
    let choice = diagnostics::decide(&scores, lib.applicability_threshold, lib.ambiguity_margin)?;
    print_json(&json!({ "scores": scores, "choice": choice }))
}

fn evaluate(a: EvalArgs) -> Result<()> {
    let report = match (&a.protocol, &a.model) {
        (Some(path), _) => {
            let mut spec = ProtocolSpec::load(path)?;
            if let Some(m) = a.metric {
                spec.metric = m;
            }
            if let Some(s) = a.sigma {
                spec.sigma = s;
            }
            if let Some(d) = a.draws {
                spec.draws = d;
            }
            if let Some(t) = a.trials {
                spec.trials = t;
            }
            if let Some(s) = a.seed {
                spec.seed = s;
            }
            if let Some(t) = &a.target {
                spec.target = t.clone();
            }
            eval::run_protocol(&spec)?
        }
        (None, Some(model)) => eval_model(model, &a)?,
        (None, None) => bail!("eval needs --protocol or --model with --data"),
    };
    if a.markdown {
        print!("{}", report.to_markdown());
        Ok(())
    } else {
        println!("{}", report.to_json()?);
        Ok(())
    }
}

/// Scores a saved model's own explanations (and optionally external ones)
/// on every row of `--data`. Trial `t` reseeds the perturbations with
/// `seed + t`.
fn eval_model(path: &Path, a: &EvalArgs) -> Result<TrialReport> {
    let model = MapleModel::load(path)?;
    let data = a.data.as_ref().expect("clap enforces --data");
    let target = a.target.clone().or_else(|| model.target.clone());
    let table = read_table(data, &model.feature_names, target.as_deref())?;
    let rows: Vec<Vec<f64>> = table.rows.iter().map(|r| to_model_units(&model, r)).collect();
    let metric = a.metric.unwrap_or(Metric::Causal);
    let trials = a.trials.unwrap_or(1);
    let seed = a.seed.unwrap_or(0);
    let external = match &a.explanations {
        Some(p) => {
            let forms = eval::read_explanations_csv(p, &model.feature_names)?;
            if forms.len() != rows.len() {
                bail!("{} has {} explanations for {} data rows", p.display(), forms.len(), rows.len());
            }
            Some(forms)
        }
        None => None,
    };
    let predict = |x: &[f64]| model.predict(x);
    let own = |x: &[f64]| -> maple_core::Result<LinearForm> { Ok(model.explain(x)?.form) };

    let mut names = vec!["maple".to_string()];
    if external.is_some() {
        names.push("external".to_string());
    }
    let mut values = vec![Vec::with_capacity(trials); names.len()];
    for t in 0..trials {
        let cfg = CausalConfig {
            sigma: a.sigma.unwrap_or(0.1),
            draws_per_point: a.draws.unwrap_or(5),
            seed: seed.wrapping_add(t as u64),
        };
        match metric {
            Metric::Causal => {
                values[0].push(eval::causal_metric(own, predict, &rows, &cfg)?);
                if let Some(forms) = &external {
                    values[1].push(eval::causal_metric_precomputed(forms, predict, &rows, &cfg)?);
                }
            }
            Metric::Standard => {
                values[0].push(eval::standard_metric(own, predict, &rows)?);
                if let Some(forms) = &external {
                    let err = forms
                        .iter()
                        .zip(&rows)
                        .map(|(f, x)| Ok((f.value_at(x) - model.predict(x)?).powi(2)))
                        .sum::<maple_core::Result<f64>>()?;
                    values[1].push((err / rows.len() as f64).sqrt());
                }
            }
            Metric::Rmse => {
                if external.is_some() {
                    bail!("--explanations applies to the causal and standard metrics");
                }
                let y = table
                    .target
                    .as_ref()
                    .ok_or_else(|| anyhow!("rmse needs a target column in {}", data.display()))?;
                let s = model.standardizer.as_ref();
                let y: Vec<f64> = y.iter().map(|&v| s.map_or(v, |s| s.transform_y(v))).collect();
                values[0].push(eval::rmse(&model.predict_many(&rows)?, &y)?);
            }
        }
    }
    let label = data
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(TrialReport::from_values(&label, metric, &names, values)?)
}
