//! The combined model: an ensemble supplies the local training distribution
//! and the feature ranking, and every prediction is the value of a weighted
//! linear fit on the top-d features at the query.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SplitAssignment, Standardizer};
use crate::dstump::{feature_scores, select_top_d, FeatureScores};
use crate::error::{MapleError, Result};
use crate::eval::{causal_metric, CausalConfig};
use crate::forest::{Ensemble, EnsembleConfig, EnsembleKind};
use crate::linalg;
use crate::silo::{self, LinearForm, LocalWeights, Neighborhoods, WeightEntry};

pub const DEFAULT_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Fitted on the true response.
    #[serde(rename = "self")]
    SelfFit,
    /// Fitted on a black-box model's predicted response.
    Blackbox,
}

/// How the number of local features is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "lowercase")]
pub enum DSelection {
    /// Minimum validation RMSE.
    Validation,
    /// Minimum causal metric of the model's own explanations on the
    /// validation rows.
    Causal { sigma: f64, draws: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapleOptions {
    pub kind: EnsembleKind,
    pub ensemble: EnsembleConfig,
    pub ridge: f64,
    pub selection: DSelection,
    /// Sweep a log-spaced subset of `1..=p` instead of every value; only
    /// applied when `p > 200`.
    pub log_spaced_sweep: bool,
}

impl MapleOptions {
    pub fn new(kind: EnsembleKind, p: usize) -> Self {
        MapleOptions {
            kind,
            ensemble: EnsembleConfig::for_kind(kind, p),
            ridge: DEFAULT_RIDGE,
            selection: DSelection::Validation,
            log_spaced_sweep: false,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.ensemble.seed = seed;
        self
    }
}

/// Fitted model. Immutable after fitting; safe to share across threads.
#[derive(Debug, Clone)]
pub struct MapleModel {
    pub ensemble: Ensemble,
    pub x_train: Vec<Vec<f64>>,
    /// The response the model was fitted on (true or black-box).
    pub y_fit: Vec<f64>,
    pub feature_names: Vec<String>,
    pub scores: FeatureScores,
    /// Selected features, ascending.
    pub selected: Vec<usize>,
    pub d: usize,
    pub ridge: f64,
    pub mode: Mode,
    pub standardizer: Option<Standardizer>,
    /// `(d, criterion)` for each swept value of d.
    pub selection_curve: Vec<(usize, f64)>,
    /// Name of the response column, when known.
    pub target: Option<String>,
    hoods: Neighborhoods,
}

/// A local linear explanation together with the distribution behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct Explanation {
    pub query: Vec<f64>,
    pub form: LinearForm,
    pub weights: LocalWeights,
}

impl Explanation {
    pub fn intercept(&self) -> f64 {
        self.form.intercept
    }

    /// `None` for features outside the selected set.
    pub fn coefficient(&self, j: usize) -> Option<f64> {
        self.form.coefficient(j)
    }

    pub fn predict_at(&self, x: &[f64]) -> f64 {
        self.form.value_at(x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub query: Vec<f64>,
    pub intercept: f64,
    pub coefficients: serde_json::Map<String, serde_json::Value>,
    pub not_selected: Vec<String>,
    pub top_weights: Vec<WeightEntry>,
    pub prediction: f64,
}

impl MapleModel {
    /// Fits on the training split and picks d on the validation split.
    pub fn fit(ds: &Dataset, split: &SplitAssignment, opts: &MapleOptions) -> Result<Self> {
        Self::fit_mode(ds, split, opts, Mode::SelfFit)
    }

    /// As [`fit`](Self::fit) with the response replaced by `predictions`
    /// (one per dataset row) everywhere.
    pub fn fit_blackbox(
        ds: &Dataset,
        split: &SplitAssignment,
        predictions: &[f64],
        opts: &MapleOptions,
    ) -> Result<Self> {
        let ds = ds.with_response(predictions.to_vec())?;
        Self::fit_mode(&ds, split, opts, Mode::Blackbox)
    }

    fn fit_mode(ds: &Dataset, split: &SplitAssignment, opts: &MapleOptions, mode: Mode) -> Result<Self> {
        if split.val_idx.is_empty() {
            return Err(MapleError::invalid("validation split is empty"));
        }
        if !(opts.ridge >= 0.0) {
            return Err(MapleError::invalid("ridge must be >= 0"));
        }
        let p = ds.p();
        let x_train = ds.rows(&split.train_idx);
        let y_fit = ds.targets(&split.train_idx);
        let ensemble = Ensemble::fit(opts.kind, &x_train, &y_fit, &opts.ensemble)?;
        let hoods = Neighborhoods::new(&ensemble, &x_train)?;
        let scores = feature_scores(&ensemble, p);

        let mut model = MapleModel {
            ensemble,
            x_train,
            y_fit,
            feature_names: ds.feature_names.clone(),
            scores,
            selected: (1..=p).collect(),
            d: p,
            ridge: opts.ridge,
            mode,
            standardizer: ds.standardizer.clone(),
            selection_curve: Vec::new(),
            target: None,
            hoods,
        };

        let candidates = sweep_values(p, opts.log_spaced_sweep);
        let x_val = ds.rows(&split.val_idx);
        let y_val = ds.targets(&split.val_idx);
        let curve = match opts.selection {
            DSelection::Validation => model.validation_curve(&x_val, &y_val, &candidates)?,
            DSelection::Causal { sigma, draws, seed } => {
                let cfg = CausalConfig { sigma, draws_per_point: draws, seed };
                candidates
                    .iter()
                    .map(|&d| {
                        let sel = select_top_d(&model.scores, d)?;
                        let m = &model;
                        let metric = causal_metric(
                            |x: &[f64]| Ok(m.local_form(x, &sel)?.0),
                            |x: &[f64]| m.local_form(x, &sel).map(|(f, _)| f.value_at(x)),
                            &x_val,
                            &cfg,
                        )?;
                        Ok((d, metric))
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };
        // first minimum: ties go to the smaller d
        let best = curve
            .iter()
            .fold(None, |acc: Option<(usize, f64)>, &(d, v)| match acc {
                Some((_, bv)) if bv <= v => acc,
                _ => Some((d, v)),
            })
            .expect("at least one candidate d");
        model.d = best.0;
        model.selected = select_top_d(&model.scores, best.0)?;
        model.selection_curve = curve;
        Ok(model)
    }

    /// Validation RMSE for each candidate d. The full-column normal
    /// equations are assembled once per validation point and each d solves
    /// its principal sub-block, which is bit-identical to what `predict`
    /// assembles for that feature set.
    fn validation_curve(
        &self,
        x_val: &[Vec<f64>],
        y_val: &[f64],
        candidates: &[usize],
    ) -> Result<Vec<(usize, f64)>> {
        let p = self.p();
        let all_cols: Vec<usize> = (0..=p).collect();
        let col_sets: Vec<Vec<usize>> = candidates
            .iter()
            .map(|&d| {
                let mut cols = vec![0];
                cols.extend(select_top_d(&self.scores, d)?);
                Ok(cols)
            })
            .collect::<Result<_>>()?;
        let per_point: Vec<Vec<f64>> = x_val
            .par_iter()
            .zip(y_val)
            .map(|(x, &y)| {
                let w = self.hoods.local_weights(&self.ensemble, x);
                let (gram, rhs) =
                    linalg::weighted_normal_equations(&self.x_train, &self.y_fit, &w.entries, &all_cols);
                col_sets
                    .iter()
                    .map(|cols| {
                        let g = linalg::sub_block(&gram, p + 1, cols);
                        let r: Vec<f64> = cols.iter().map(|&c| rhs[c]).collect();
                        let penalized: Vec<bool> = cols.iter().map(|&c| c != 0).collect();
                        let beta = linalg::solve_ridge(&g, &r, self.ridge, &penalized)?;
                        let pred = LinearForm::from_fit(cols, &beta).value_at(x);
                        Ok((pred - y).powi(2))
                    })
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<_>>()?;
        Ok(candidates
            .iter()
            .enumerate()
            .map(|(c, &d)| {
                let mse = per_point.iter().map(|errs| errs[c]).sum::<f64>() / x_val.len() as f64;
                (d, mse.sqrt())
            })
            .collect())
    }

    pub fn p(&self) -> usize {
        self.feature_names.len()
    }

    pub fn neighborhoods(&self) -> &Neighborhoods {
        &self.hoods
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.p() + 1 {
            return Err(MapleError::DimensionMismatch {
                expected: self.p() + 1,
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn local_weights(&self, x: &[f64]) -> Result<LocalWeights> {
        self.check_dim(x)?;
        Ok(self.hoods.local_weights(&self.ensemble, x))
    }

    /// Local linear fit on `{0} ∪ selected` at `x`.
    pub fn local_form(&self, x: &[f64], selected: &[usize]) -> Result<(LinearForm, LocalWeights)> {
        self.check_dim(x)?;
        let w = self.hoods.local_weights(&self.ensemble, x);
        let mut cols = vec![0];
        cols.extend_from_slice(selected);
        let beta = silo::weighted_fit(&self.x_train, &self.y_fit, &w, &cols, self.ridge)?;
        Ok((LinearForm::from_fit(&cols, &beta), w))
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        Ok(self.local_form(x, &self.selected)?.0.value_at(x))
    }

    pub fn predict_many(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>> {
        xs.par_iter().map(|x| self.predict(x)).collect()
    }

    pub fn explain(&self, x: &[f64]) -> Result<Explanation> {
        let (form, weights) = self.local_form(x, &self.selected)?;
        Ok(Explanation {
            query: x.to_vec(),
            form,
            weights,
        })
    }

    /// The all-feature local fit, sharing this model's ensemble and ridge.
    pub fn silo_predict(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        silo::silo_predict(&self.ensemble, &self.hoods, &self.x_train, &self.y_fit, x, self.ridge)
    }

    pub fn ensemble_predict(&self, x: &[f64]) -> f64 {
        self.ensemble.predict(x)
    }

    pub fn explanation_record(&self, e: &Explanation, top_k: usize) -> ExplanationRecord {
        let mut coefficients = serde_json::Map::new();
        for &(j, b) in &e.form.coefficients {
            coefficients.insert(self.feature_names[j - 1].clone(), serde_json::json!(b));
        }
        let not_selected = (1..=self.p())
            .filter(|j| e.form.coefficient(*j).is_none())
            .map(|j| self.feature_names[j - 1].clone())
            .collect();
        let top_weights = e
            .weights
            .sorted_desc()
            .into_iter()
            .take(top_k)
            .map(|(index, weight)| WeightEntry { index, weight })
            .collect();
        ExplanationRecord {
            query: e.query.clone(),
            intercept: e.form.intercept,
            coefficients,
            not_selected,
            top_weights,
            prediction: e.predict_at(&e.query),
        }
    }

    pub fn to_bundle(&self) -> ModelBundle {
        ModelBundle {
            ensemble: self.ensemble.clone(),
            scores: self.scores.clone(),
            selected: self.selected.clone(),
            d: self.d,
            ridge: self.ridge,
            mode: self.mode,
            standardization: self.standardizer.clone(),
            feature_names: self.feature_names.clone(),
            x_train: self.x_train.clone(),
            y_fit: self.y_fit.clone(),
            selection_curve: self.selection_curve.clone(),
            target: self.target.clone(),
        }
    }

    pub fn from_bundle(b: ModelBundle) -> Result<Self> {
        let p = b.feature_names.len();
        if b.selected.len() != b.d || b.selected.iter().any(|&j| j == 0 || j > p) {
            return Err(MapleError::invalid("bundle has an inconsistent feature selection"));
        }
        if b.x_train.len() != b.y_fit.len() || b.x_train.iter().any(|r| r.len() != p + 1) {
            return Err(MapleError::invalid("bundle training data has inconsistent shape"));
        }
        let hoods = Neighborhoods::new(&b.ensemble, &b.x_train)?;
        Ok(MapleModel {
            ensemble: b.ensemble,
            x_train: b.x_train,
            y_fit: b.y_fit,
            feature_names: b.feature_names,
            scores: b.scores,
            selected: b.selected,
            d: b.d,
            ridge: b.ridge,
            mode: b.mode,
            standardizer: b.standardization,
            selection_curve: b.selection_curve,
            target: b.target,
            hoods,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(&self.to_bundle())?;
        std::fs::write(path, text).map_err(|e| MapleError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| MapleError::io(path, e))?;
        Self::from_bundle(serde_json::from_str(&text)?)
    }
}

/// Persisted form of a [`MapleModel`]. Training rows are kept because every
/// prediction refits locally on them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub ensemble: Ensemble,
    pub scores: FeatureScores,
    pub selected: Vec<usize>,
    pub d: usize,
    pub ridge: f64,
    pub mode: Mode,
    pub standardization: Option<Standardizer>,
    pub feature_names: Vec<String>,
    pub x_train: Vec<Vec<f64>>,
    pub y_fit: Vec<f64>,
    pub selection_curve: Vec<(usize, f64)>,
    #[serde(default)]
    pub target: Option<String>,
}

/// Every d in `1..=p`, or for wide data (p > 200, opt-in) about 30
/// log-spaced values that always include 1 and p.
fn sweep_values(p: usize, log_spaced: bool) -> Vec<usize> {
    if !log_spaced || p <= 200 {
        return (1..=p).collect();
    }
    let steps = 30;
    let mut out: Vec<usize> = (0..=steps)
        .map(|s| ((p as f64).powf(s as f64 / steps as f64)).round() as usize)
        .map(|d| d.clamp(1, p))
        .collect();
    out.dedup();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, split, SyntheticKind, SyntheticSpec};

    fn linear_ds(seed: u64, p: usize) -> Dataset {
        gen_synthetic(&SyntheticSpec {
            kind: SyntheticKind::Linear,
            n: 200,
            p,
            noise_sigma: 0.1,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn sweep_values_log_spaced() {
        assert_eq!(sweep_values(5, true), vec![1, 2, 3, 4, 5]);
        let v = sweep_values(1000, true);
        assert_eq!(v.first(), Some(&1));
        assert_eq!(v.last(), Some(&1000));
        assert!(v.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn single_feature_selects_it() {
        let ds = linear_ds(1, 1);
        let sp = split(ds.n(), 1).unwrap();
        let m = MapleModel::fit(&ds, &sp, &MapleOptions::new(EnsembleKind::Rf, 1)).unwrap();
        assert_eq!(m.d, 1);
        assert_eq!(m.selected, vec![1]);
    }

    #[test]
    fn stored_d_minimizes_curve() {
        let ds = linear_ds(2, 5);
        let sp = split(ds.n(), 2).unwrap();
        let m = MapleModel::fit(&ds, &sp, &MapleOptions::new(EnsembleKind::Rf, 5).with_seed(2)).unwrap();
        let min = m.selection_curve.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
        let at_d = m.selection_curve.iter().find(|c| c.0 == m.d).unwrap().1;
        assert_eq!(at_d, min);
        assert!(m.selection_curve.iter().take_while(|c| c.0 < m.d).all(|c| c.1 > min));
    }

    #[test]
    fn curve_matches_predict_path() {
        let ds = linear_ds(3, 4);
        let sp = split(ds.n(), 3).unwrap();
        let m = MapleModel::fit(&ds, &sp, &MapleOptions::new(EnsembleKind::Gbrt, 4)).unwrap();
        let x_val = ds.rows(&sp.val_idx);
        let y_val = ds.targets(&sp.val_idx);
        let preds = m.predict_many(&x_val).unwrap();
        let mse = preds.iter().zip(&y_val).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / preds.len() as f64;
        let at_d = m.selection_curve.iter().find(|c| c.0 == m.d).unwrap().1;
        assert_eq!(mse.sqrt(), at_d);
    }

    #[test]
    fn explanation_reproduces_prediction() {
        let ds = linear_ds(4, 5);
        let sp = split(ds.n(), 4).unwrap();
        let m = MapleModel::fit(&ds, &sp, &MapleOptions::new(EnsembleKind::Rf, 5)).unwrap();
        for &i in &sp.test_idx {
            let e = m.explain(&ds.x[i]).unwrap();
            assert_eq!(e.predict_at(&ds.x[i]), m.predict(&ds.x[i]).unwrap());
            for j in 1..=5 {
                assert_eq!(e.coefficient(j).is_some(), m.selected.contains(&j));
            }
        }
    }

    #[test]
    fn empty_validation_rejected() {
        let ds = linear_ds(5, 2);
        let mut sp = split(ds.n(), 5).unwrap();
        sp.val_idx.clear();
        assert!(MapleModel::fit(&ds, &sp, &MapleOptions::new(EnsembleKind::Rf, 2)).is_err());
    }

    #[test]
    fn blackbox_length_mismatch() {
        let ds = linear_ds(6, 2);
        let sp = split(ds.n(), 6).unwrap();
        assert!(MapleModel::fit_blackbox(&ds, &sp, &[0.0; 3], &MapleOptions::new(EnsembleKind::Rf, 2)).is_err());
    }

    #[test]
    fn dimension_checked() {
        let ds = linear_ds(7, 2);
        let sp = split(ds.n(), 7).unwrap();
        let m = MapleModel::fit(&ds, &sp, &MapleOptions::new(EnsembleKind::Rf, 2)).unwrap();
        assert!(matches!(m.predict(&[1.0, 0.5]), Err(MapleError::DimensionMismatch { .. })));
    }

    #[test]
    fn causal_selection_strategy_runs() {
        let ds = linear_ds(8, 3);
        let sp = split(ds.n(), 8).unwrap();
        let mut opts = MapleOptions::new(EnsembleKind::Rf, 3);
        opts.selection = DSelection::Causal {
            sigma: 0.1,
            draws: 2,
            seed: 1,
        };
        let m = MapleModel::fit(&ds, &sp, &opts).unwrap();
        assert_eq!(m.selection_curve.len(), 3);
        assert!(m.selection_curve.iter().all(|c| c.1 >= 0.0));
    }
}
