//! Accuracy and explanation-fidelity metrics, a kernel ridge black-box, and
//! the multi-trial experiment harness.
//!
//! The causal metric scores an explanation of the prediction at `x` by how
//! well its linear form tracks the model at perturbed neighbors
//! `x' ~ N(x, σ²I)`; the standard metric only checks the query itself.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{self, Dataset};
use crate::error::{MapleError, Result};
use crate::forest::{Ensemble, EnsembleConfig, EnsembleKind};
use crate::linalg;
use crate::maple::{MapleModel, MapleOptions};
use crate::silo::{self, LinearForm, LocalWeights};

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(MapleError::DimensionMismatch {
            expected: truth.len(),
            got: pred.len(),
        });
    }
    if pred.is_empty() {
        return Err(MapleError::invalid("rmse of empty vectors"));
    }
    let mse = pred.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / pred.len() as f64;
    Ok(mse.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CausalConfig {
    /// Perturbation scale on the non-constant features.
    pub sigma: f64,
    pub draws_per_point: usize,
    pub seed: u64,
}

impl Default for CausalConfig {
    fn default() -> Self {
        CausalConfig {
            sigma: 0.1,
            draws_per_point: 5,
            seed: 0,
        }
    }
}

fn check_rows(test_x: &[Vec<f64>]) -> Result<usize> {
    let dim = test_x
        .first()
        .map(|r| r.len())
        .ok_or_else(|| MapleError::invalid("no test points"))?;
    if let Some(bad) = test_x.iter().find(|r| r.len() != dim) {
        return Err(MapleError::DimensionMismatch {
            expected: dim,
            got: bad.len(),
        });
    }
    Ok(dim)
}

fn check_form(form: &LinearForm, dim: usize) -> Result<()> {
    match form.coefficients.iter().find(|c| c.0 == 0 || c.0 >= dim) {
        Some(&(j, _)) => Err(MapleError::DimensionMismatch {
            expected: dim,
            got: j + 1,
        }),
        None => Ok(()),
    }
}

/// Root mean squared gap between each explanation, evaluated at perturbed
/// copies of its query, and the model at those copies.
pub fn causal_metric<E, M>(explainer: E, model: M, test_x: &[Vec<f64>], cfg: &CausalConfig) -> Result<f64>
where
    E: Fn(&[f64]) -> Result<LinearForm> + Sync,
    M: Fn(&[f64]) -> Result<f64> + Sync,
{
    causal_metric_indexed(|_, x| explainer(x), model, test_x, cfg)
}

/// Causal metric for precomputed explanations, one per test row.
pub fn causal_metric_precomputed<M>(
    forms: &[LinearForm],
    model: M,
    test_x: &[Vec<f64>],
    cfg: &CausalConfig,
) -> Result<f64>
where
    M: Fn(&[f64]) -> Result<f64> + Sync,
{
    if forms.len() != test_x.len() {
        return Err(MapleError::DimensionMismatch {
            expected: test_x.len(),
            got: forms.len(),
        });
    }
    causal_metric_indexed(|i, _| Ok(forms[i].clone()), model, test_x, cfg)
}

fn causal_metric_indexed<E, M>(explainer: E, model: M, test_x: &[Vec<f64>], cfg: &CausalConfig) -> Result<f64>
where
    E: Fn(usize, &[f64]) -> Result<LinearForm> + Sync,
    M: Fn(&[f64]) -> Result<f64> + Sync,
{
    if !(cfg.sigma > 0.0) || cfg.draws_per_point == 0 {
        return Err(MapleError::invalid("causal metric needs sigma > 0 and draws >= 1"));
    }
    let dim = check_rows(test_x)?;
    let normal = Normal::new(0.0, cfg.sigma).map_err(|e| MapleError::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let neighbors: Vec<Vec<Vec<f64>>> = test_x
        .iter()
        .map(|x| {
            (0..cfg.draws_per_point)
                .map(|_| {
                    let mut xp = x.clone();
                    for v in xp.iter_mut().skip(1) {
                        *v += normal.sample(&mut rng);
                    }
                    xp
                })
                .collect()
        })
        .collect();
    let per_point: Vec<f64> = test_x
        .par_iter()
        .enumerate()
        .zip(&neighbors)
        .map(|((i, x), nbrs)| {
            let form = explainer(i, x)?;
            check_form(&form, dim)?;
            nbrs.iter()
                .map(|xp| Ok((form.value_at(xp) - model(xp)?).powi(2)))
                .sum::<Result<f64>>()
        })
        .collect::<Result<_>>()?;
    let total = (test_x.len() * cfg.draws_per_point) as f64;
    Ok((per_point.iter().sum::<f64>() / total).sqrt())
}

/// Root mean squared gap between each explanation at its own query and the
/// model there.
pub fn standard_metric<E, M>(explainer: E, model: M, test_x: &[Vec<f64>]) -> Result<f64>
where
    E: Fn(&[f64]) -> Result<LinearForm> + Sync,
    M: Fn(&[f64]) -> Result<f64> + Sync,
{
    let dim = check_rows(test_x)?;
    let errs: Vec<f64> = test_x
        .par_iter()
        .map(|x| {
            let form = explainer(x)?;
            check_form(&form, dim)?;
            Ok((form.value_at(x) - model(x)?).powi(2))
        })
        .collect::<Result<_>>()?;
    Ok((errs.iter().sum::<f64>() / errs.len() as f64).sqrt())
}

/// Reads per-row linear explanations from a CSV with an `intercept` column
/// and one column per feature name; empty cells mean "not selected".
pub fn read_explanations_csv(path: impl AsRef<Path>, feature_names: &[String]) -> Result<Vec<LinearForm>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| MapleError::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let intercept_col = headers
        .iter()
        .position(|h| h == "intercept")
        .ok_or_else(|| MapleError::invalid("explanations file lacks an intercept column"))?;
    let mut feature_cols = Vec::new();
    for (c, h) in headers.iter().enumerate() {
        if c == intercept_col {
            continue;
        }
        let j = feature_names
            .iter()
            .position(|f| f == h)
            .ok_or_else(|| MapleError::invalid(format!("unknown feature column {h:?}")))?;
        feature_cols.push((c, j + 1));
    }
    feature_cols.sort_by_key(|&(_, j)| j);
    let mut out = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse = |c: usize| -> Result<Option<f64>> {
            let cell = rec.get(c).unwrap_or("").trim();
            if cell.is_empty() {
                return Ok(None);
            }
            cell.parse::<f64>().map(Some).map_err(|_| MapleError::NonNumeric {
                row: r + 1,
                column: headers[c].clone(),
                value: cell.to_string(),
            })
        };
        let intercept = parse(intercept_col)?.unwrap_or(0.0);
        let mut coefficients = Vec::new();
        for &(c, j) in &feature_cols {
            if let Some(b) = parse(c)? {
                coefficients.push((j, b));
            }
        }
        out.push(LinearForm {
            intercept,
            coefficients,
        });
    }
    Ok(out)
}

/// RBF kernel ridge regressor: bandwidth is the median pairwise distance of
/// the training rows, ridge 1, fitted to the centered response.
#[derive(Debug, Clone)]
pub struct KernelRidge {
    x_train: Vec<Vec<f64>>,
    alpha: Vec<f64>,
    offset: f64,
    bandwidth: f64,
}

impl KernelRidge {
    pub const RIDGE: f64 = 1.0;

    pub fn fit(x_train: &[Vec<f64>], y_train: &[f64]) -> Result<Self> {
        let n = x_train.len();
        if n == 0 || n != y_train.len() {
            return Err(MapleError::invalid("kernel ridge needs matching non-empty data"));
        }
        let mut dists = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in (i + 1)..n {
                dists.push(sq_dist(&x_train[i], &x_train[j]).sqrt());
            }
        }
        let bandwidth = if dists.is_empty() {
            1.0
        } else {
            let mid = dists.len() / 2;
            dists.select_nth_unstable_by(mid, f64::total_cmp);
            let m = dists[mid];
            if m > 0.0 { m } else { 1.0 }
        };
        let offset = y_train.iter().sum::<f64>() / n as f64;
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                k[i * n + j] = rbf(&x_train[i], &x_train[j], bandwidth);
            }
            k[i * n + i] += Self::RIDGE;
        }
        let centered: Vec<f64> = y_train.iter().map(|y| y - offset).collect();
        let alpha = linalg::cholesky_solve(k, centered, n)?;
        Ok(KernelRidge {
            x_train: x_train.to_vec(),
            alpha,
            offset,
            bandwidth,
        })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.offset
            + self
                .x_train
                .iter()
                .zip(&self.alpha)
                .map(|(xi, a)| a * rbf(xi, x, self.bandwidth))
                .sum::<f64>()
    }
}

/// Distance over the non-constant columns.
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).skip(1).map(|(u, v)| (u - v).powi(2)).sum()
}

fn rbf(a: &[f64], b: &[f64], h: f64) -> f64 {
    (-sq_dist(a, b) / (2.0 * h * h)).exp()
}

/// Ordinary least squares on all columns with a negligible ridge.
#[derive(Debug, Clone)]
pub struct LinearModel {
    form: LinearForm,
}

impl LinearModel {
    pub fn fit(x_train: &[Vec<f64>], y_train: &[f64]) -> Result<Self> {
        let n = x_train.len();
        let w = LocalWeights {
            query: Vec::new(),
            entries: (0..n).map(|i| (i, 1.0 / n as f64)).collect(),
        };
        let cols: Vec<usize> = (0..x_train[0].len()).collect();
        let beta = silo::weighted_fit(x_train, y_train, &w, &cols, 1e-9)?;
        Ok(LinearModel {
            form: LinearForm::from_fit(&cols, &beta),
        })
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.form.value_at(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Rmse,
    Causal,
    Standard,
}

impl std::str::FromStr for Metric {
    type Err = MapleError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rmse" => Ok(Metric::Rmse),
            "causal" => Ok(Metric::Causal),
            "standard" => Ok(Metric::Standard),
            other => Err(MapleError::invalid(format!("unknown metric {other:?}"))),
        }
    }
}

/// Methods known to the harness. Under `rmse` they are predictors; under the
/// explanation metrics `maple_*` and `constant` are explainers of the
/// protocol's `explained` model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Lm,
    Rf,
    Gbrt,
    SiloRf,
    SiloGbrt,
    MapleRf,
    MapleGbrt,
    Krr,
    /// Explains `x` by the constant `model(x)`.
    Constant,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Lm => "lm",
            Method::Rf => "rf",
            Method::Gbrt => "gbrt",
            Method::SiloRf => "silo_rf",
            Method::SiloGbrt => "silo_gbrt",
            Method::MapleRf => "maple_rf",
            Method::MapleGbrt => "maple_gbrt",
            Method::Krr => "krr",
            Method::Constant => "constant",
        }
    }

    fn ensemble_kind(self) -> Option<EnsembleKind> {
        match self {
            Method::Rf | Method::SiloRf | Method::MapleRf => Some(EnsembleKind::Rf),
            Method::Gbrt | Method::SiloGbrt | Method::MapleGbrt => Some(EnsembleKind::Gbrt),
            _ => None,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = MapleError;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| MapleError::invalid(format!("unknown method {s:?}")))
    }
}

/// Model whose predictions are explained under the explanation metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Explained {
    /// The explainer's own MAPLE model (self-explanation).
    SelfModel,
    /// Kernel ridge black-box; MAPLE explainers are fitted on its predictions.
    Krr,
}

/// Experiment description, loadable from JSON or TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSpec {
    pub dataset: String,
    pub target: String,
    pub methods: Vec<Method>,
    pub metric: Metric,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_draws")]
    pub draws: usize,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_explained")]
    pub explained: Explained,
    #[serde(default)]
    pub trees: Option<usize>,
    #[serde(default)]
    pub min_leaf: Option<usize>,
    #[serde(default)]
    pub ridge: Option<f64>,
}

fn default_sigma() -> f64 {
    0.1
}
fn default_draws() -> usize {
    5
}
fn default_trials() -> usize {
    1
}
fn default_explained() -> Explained {
    Explained::SelfModel
}

impl ProtocolSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| MapleError::io(path, e))?;
        if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| MapleError::invalid(format!("protocol: {e}")))
        } else {
            Ok(serde_json::from_str(&text)?)
        }
    }

    fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(MapleError::invalid("protocol lists no methods"));
        }
        if self.trials == 0 {
            return Err(MapleError::invalid("trials must be >= 1"));
        }
        if self.metric != Metric::Rmse {
            if let Some(m) = self
                .methods
                .iter()
                .find(|m| !matches!(m, Method::MapleRf | Method::MapleGbrt | Method::Constant))
            {
                return Err(MapleError::invalid(format!(
                    "method {} is not an explainer",
                    m.name()
                )));
            }
            if self.explained == Explained::SelfModel
                && !self.methods.iter().any(|m| matches!(m, Method::MapleRf | Method::MapleGbrt))
            {
                return Err(MapleError::invalid(
                    "self-explanation protocols need a maple method to explain",
                ));
            }
        } else if self.methods.contains(&Method::Constant) {
            return Err(MapleError::invalid("constant is only an explainer"));
        }
        Ok(())
    }

    fn ensemble_config(&self, kind: EnsembleKind, p: usize, seed: u64) -> EnsembleConfig {
        let mut cfg = EnsembleConfig::for_kind(kind, p).with_seed(seed);
        if let Some(t) = self.trees {
            cfg.n_trees = t;
        }
        if let Some(l) = self.min_leaf {
            cfg.min_samples_leaf = l;
        }
        cfg
    }

    fn maple_options(&self, kind: EnsembleKind, p: usize, seed: u64) -> MapleOptions {
        let mut opts = MapleOptions::new(kind, p);
        opts.ensemble = self.ensemble_config(kind, p, seed);
        if let Some(r) = self.ridge {
            opts.ridge = r;
        }
        opts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub values: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single trial.
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub a: String,
    pub b: String,
    pub mean_difference: f64,
    pub t_statistic: f64,
    pub p_value: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub dataset: String,
    pub metric: Metric,
    pub n_trials: usize,
    pub methods: Vec<MethodSummary>,
    pub comparisons: Vec<PairedComparison>,
}

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

impl TrialReport {
    /// Aggregates per-trial values (`values[m][t]` for method `m`, trial `t`).
    pub fn from_values(dataset: &str, metric: Metric, names: &[String], values: Vec<Vec<f64>>) -> Result<Self> {
        let n_trials = values.first().map_or(0, |v| v.len());
        if n_trials == 0 || values.iter().any(|v| v.len() != n_trials) {
            return Err(MapleError::invalid("report needs >= 1 trial per method"));
        }
        let methods: Vec<MethodSummary> = names
            .iter()
            .zip(values)
            .map(|(name, v)| {
                let (mean, sd) = mean_sd(&v);
                MethodSummary {
                    method: name.clone(),
                    values: v,
                    mean,
                    sd,
                }
            })
            .collect();
        let mut comparisons = Vec::new();
        for i in 0..methods.len() {
            for j in (i + 1)..methods.len() {
                comparisons.push(paired_t_test(&methods[i], &methods[j]));
            }
        }
        Ok(TrialReport {
            dataset: dataset.to_string(),
            metric,
            n_trials,
            methods,
            comparisons,
        })
    }

    pub fn mean_of(&self, method: &str) -> Option<f64> {
        self.methods.iter().find(|m| m.method == method).map(|m| m.mean)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per dataset, one column per method, like a results table.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Dataset |");
        for m in &self.methods {
            out.push_str(&format!(" {} |", m.method));
        }
        out.push_str("\n|---|");
        out.push_str(&"---|".repeat(self.methods.len()));
        out.push_str(&format!("\n| {} |", self.dataset));
        for m in &self.methods {
            out.push_str(&format!(" {:.4} ± {:.4} |", m.mean, m.sd));
        }
        out.push('\n');
        let sig: Vec<String> = self
            .comparisons
            .iter()
            .filter(|c| c.significant)
            .map(|c| format!("{} vs {} (p = {:.3})", c.a, c.b, c.p_value))
            .collect();
        out.push_str(&format!(
            "\n{} {} over {} trial(s).",
            metric_label(self.metric),
            "mean ± sd",
            self.n_trials
        ));
        if !sig.is_empty() {
            out.push_str(&format!(" Significant at α = {SIGNIFICANCE_LEVEL}: {}.", sig.join("; ")));
        }
        out.push('\n');
        out
    }
}

fn metric_label(m: Metric) -> &'static str {
    match m {
        Metric::Rmse => "Test RMSE",
        Metric::Causal => "Causal metric (RMSE)",
        Metric::Standard => "Standard metric (RMSE)",
    }
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Two-sided paired t-test on per-trial differences.
pub fn paired_t_test(a: &MethodSummary, b: &MethodSummary) -> PairedComparison {
    let diffs: Vec<f64> = a.values.iter().zip(&b.values).map(|(x, y)| x - y).collect();
    let (mean, sd) = mean_sd(&diffs);
    let n = diffs.len();
    let (t, p) = if n < 2 {
        (0.0, 1.0)
    } else if sd == 0.0 {
        if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (f64::INFINITY.copysign(mean), 0.0)
        }
    } else {
        let t = mean / (sd / (n as f64).sqrt());
        let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("valid degrees of freedom");
        (t, 2.0 * (1.0 - dist.cdf(t.abs())))
    };
    PairedComparison {
        a: a.method.clone(),
        b: b.method.clone(),
        mean_difference: mean,
        t_statistic: t,
        p_value: p,
        significant: p < SIGNIFICANCE_LEVEL,
    }
}

/// Loads the protocol's dataset and runs it.
pub fn run_protocol(spec: &ProtocolSpec) -> Result<TrialReport> {
    let ds = data::load_csv(&spec.dataset, &spec.target)?;
    run_trials(&ds, spec)
}

/// Trial `t` draws a fresh 50/25/25 split with seed `seed + t`,
/// re-standardizes, refits every method and records the metric on the test
/// split. Trials run in parallel; results are aggregated in trial order.
pub fn run_trials(ds: &Dataset, spec: &ProtocolSpec) -> Result<TrialReport> {
    spec.validate()?;
    let per_trial: Vec<Vec<f64>> = (0..spec.trials)
        .into_par_iter()
        .map(|t| run_one_trial(ds, spec, spec.seed.wrapping_add(t as u64)))
        .collect::<Result<_>>()?;
    let names: Vec<String> = spec.methods.iter().map(|m| m.name().to_string()).collect();
    let by_method: Vec<Vec<f64>> = (0..spec.methods.len())
        .map(|m| per_trial.iter().map(|row| row[m]).collect())
        .collect();
    let label = Path::new(&spec.dataset)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| spec.dataset.clone());
    TrialReport::from_values(&label, spec.metric, &names, by_method)
}

fn run_one_trial(raw: &Dataset, spec: &ProtocolSpec, seed: u64) -> Result<Vec<f64>> {
    let split = data::split(raw.n(), seed)?;
    let ds = data::standardize(raw, &split)?;
    let p = ds.p();
    let x_train = ds.rows(&split.train_idx);
    let y_train = ds.targets(&split.train_idx);
    let x_test = ds.rows(&split.test_idx);
    let y_test = ds.targets(&split.test_idx);

    if spec.metric == Metric::Rmse {
        let mut mapled: [Option<MapleModel>; 2] = [None, None];
        let mut out = Vec::with_capacity(spec.methods.len());
        for &method in &spec.methods {
            let preds: Vec<f64> = match method {
                Method::Lm => {
                    let lm = LinearModel::fit(&x_train, &y_train)?;
                    x_test.iter().map(|x| lm.predict(x)).collect()
                }
                Method::Krr => {
                    let krr = KernelRidge::fit(&x_train, &y_train)?;
                    x_test.iter().map(|x| krr.predict(x)).collect()
                }
                Method::Constant => unreachable!("rejected by validate"),
                m => {
                    let kind = m.ensemble_kind().expect("ensemble-backed method");
                    let slot = &mut mapled[kind as usize];
                    if slot.is_none() {
                        *slot = Some(MapleModel::fit(&ds, &split, &spec.maple_options(kind, p, seed))?);
                    }
                    let model = slot.as_ref().expect("just fitted");
                    match m {
                        Method::Rf | Method::Gbrt => x_test.iter().map(|x| model.ensemble_predict(x)).collect(),
                        Method::SiloRf | Method::SiloGbrt => {
                            x_test.iter().map(|x| model.silo_predict(x)).collect::<Result<_>>()?
                        }
                        _ => model.predict_many(&x_test)?,
                    }
                }
            };
            out.push(rmse(&preds, &y_test)?);
        }
        return Ok(out);
    }

    let causal = CausalConfig {
        sigma: spec.sigma,
        draws_per_point: spec.draws,
        seed,
    };
    // Fit the explained model, then explainers around it.
    let black_box = match spec.explained {
        Explained::Krr => Some(KernelRidge::fit(&x_train, &y_train)?),
        Explained::SelfModel => None,
    };
    let explainers: Vec<Option<MapleModel>> = spec
        .methods
        .iter()
        .map(|&m| match m.ensemble_kind() {
            Some(kind) => {
                let opts = spec.maple_options(kind, p, seed);
                match &black_box {
                    Some(bb) => {
                        let preds: Vec<f64> = ds.x.iter().map(|x| bb.predict(x)).collect();
                        MapleModel::fit_blackbox(&ds, &split, &preds, &opts).map(Some)
                    }
                    None => MapleModel::fit(&ds, &split, &opts).map(Some),
                }
            }
            None => Ok(None),
        })
        .collect::<Result<_>>()?;
    let self_model = explainers.iter().flatten().next();
    let model = |x: &[f64]| -> Result<f64> {
        match (&black_box, self_model) {
            (Some(bb), _) => Ok(bb.predict(x)),
            (None, Some(m)) => m.predict(x),
            (None, None) => Err(MapleError::invalid("nothing to explain")),
        }
    };

    spec.methods
        .iter()
        .zip(&explainers)
        .map(|(&method, fitted)| {
            let explain = |x: &[f64]| -> Result<LinearForm> {
                match (method, fitted) {
                    (Method::Constant, _) => Ok(LinearForm::constant(model(x)?)),
                    (_, Some(m)) => Ok(m.explain(x)?.form),
                    _ => unreachable!("explainers are maple or constant"),
                }
            };
            let model_for = |x: &[f64]| -> Result<f64> {
                // self-explanation of a maple explainer targets its own model
                match (spec.explained, fitted) {
                    (Explained::SelfModel, Some(m)) => m.predict(x),
                    _ => model(x),
                }
            };
            match spec.metric {
                Metric::Causal => causal_metric(explain, model_for, &x_test, &causal),
                Metric::Standard => standard_metric(explain, model_for, &x_test),
                Metric::Rmse => unreachable!(),
            }
        })
        .collect()
}

/// Convenience: fit an ensemble and report its test RMSE.
pub fn ensemble_test_rmse(
    kind: EnsembleKind,
    x_train: &[Vec<f64>],
    y_train: &[f64],
    x_test: &[Vec<f64>],
    y_test: &[f64],
    cfg: &EnsembleConfig,
) -> Result<f64> {
    let e = Ensemble::fit(kind, x_train, y_train, cfg)?;
    let preds: Vec<f64> = x_test.iter().map(|x| e.predict(x)).collect();
    rmse(&preds, y_test)
}
