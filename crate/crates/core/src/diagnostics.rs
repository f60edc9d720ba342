//! Diagnostics built on the local training distribution: influential
//! training points, per-feature boxplot statistics, the grid search used to
//! spot global patterns, and exemplar explanation selection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MapleError, Result};
use crate::maple::{Explanation, MapleModel};

pub const DEFAULT_TOP_K: usize = 20;
pub const DEFAULT_REPEATS: usize = 10;
/// Concentration of the grid-wise distribution shift above which a pattern
/// is reported.
pub const CONCENTRATION_THRESHOLD: f64 = 0.6;
/// A cell median further than this many IQRs from its grid value is skewed.
pub const SKEW_IQR_FACTOR: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceSet {
    pub query: Vec<f64>,
    /// `(training index, weight)`, descending weight then ascending index.
    pub members: Vec<(usize, f64)>,
    pub k: usize,
}

/// The `k` training points with the largest local weight at `x`.
pub fn influential_points(m: &MapleModel, x: &[f64], k: usize) -> Result<InfluenceSet> {
    let n = m.x_train.len();
    if k == 0 || k > n {
        return Err(MapleError::invalid(format!("k = {k} outside 1..={n}")));
    }
    let w = m.local_weights(x)?;
    let mut members = w.sorted_desc();
    // zero-weight points fill the tail in index order
    if members.len() < k {
        let present: std::collections::HashSet<usize> = members.iter().map(|e| e.0).collect();
        members.extend((0..n).filter(|i| !present.contains(i)).map(|i| (i, 0.0)));
    }
    members.truncate(k);
    Ok(InfluenceSet {
        query: x.to_vec(),
        members,
        k,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

impl BoxStats {
    /// Five-number summary with linearly interpolated quartiles.
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(MapleError::invalid("boxplot of an empty set"));
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Ok(BoxStats {
            min: v[0],
            q1: quantile_sorted(&v, 0.25),
            median: quantile_sorted(&v, 0.5),
            q3: quantile_sorted(&v, 0.75),
            max: v[v.len() - 1],
            mean: v.iter().sum::<f64>() / v.len() as f64,
        })
    }

    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }

    /// Applies `v -> scale * v + shift` (scale > 0) to every statistic.
    pub fn affine(&self, scale: f64, shift: f64) -> Self {
        let f = |v: f64| scale * v + shift;
        BoxStats {
            min: f(self.min),
            q1: f(self.q1),
            median: f(self.median),
            q3: f(self.q3),
            max: f(self.max),
            mean: f(self.mean),
        }
    }
}

fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Unweighted summary of feature `j` over the influence set's members.
pub fn feature_boxplot(infl: &InfluenceSet, x_train: &[Vec<f64>], j: usize) -> Result<BoxStats> {
    let values: Vec<f64> = infl.members.iter().map(|&(i, _)| x_train[i][j]).collect();
    BoxStats::from_values(&values)
}

/// How the non-grid features of a probe point are filled in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    /// Each feature drawn independently from its training marginal.
    EmpiricalMarginals,
    /// A whole training row drawn at random, with the grid feature replaced.
    TrainingRows,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridOptions {
    pub repeats: usize,
    pub k: usize,
    pub sampler: Sampler,
    pub seed: u64,
}

impl Default for GridOptions {
    fn default() -> Self {
        GridOptions {
            repeats: DEFAULT_REPEATS,
            k: DEFAULT_TOP_K,
            sampler: Sampler::EmpiricalMarginals,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDiagnostic {
    pub feature: usize,
    pub grid: Vec<f64>,
    /// Statistics of the members pooled over all repeats, one per cell.
    pub per_cell: Vec<BoxStats>,
    /// `per_repeat[cell][repeat]`.
    pub per_repeat: Vec<Vec<BoxStats>>,
    /// Pooled deciles (10%..90%) per cell.
    pub deciles: Vec<Vec<f64>>,
    pub repeats: usize,
    pub k: usize,
    pub sampler: Sampler,
}

/// `n` evenly spaced values from `lo` to `hi` inclusive.
pub fn even_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// For each grid value `g` and repeat, builds a probe with feature `j = g`
/// and the other features sampled, then summarizes feature `j` over the
/// probe's top-k influential training points.
pub fn grid_diagnostic(m: &MapleModel, j: usize, grid: &[f64], opts: &GridOptions) -> Result<GridDiagnostic> {
    if grid.is_empty() {
        return Err(MapleError::invalid("empty grid"));
    }
    if j == 0 || j > m.p() {
        return Err(MapleError::invalid(format!("feature index {j} outside 1..={}", m.p())));
    }
    if opts.repeats == 0 {
        return Err(MapleError::invalid("repeats must be >= 1"));
    }
    let x_train = &m.x_train;
    let n = x_train.len();
    let cells: Vec<(BoxStats, Vec<BoxStats>, Vec<f64>)> = grid
        .par_iter()
        .enumerate()
        .map(|(cell, &g)| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(cell as u64);
            let mut pooled = Vec::with_capacity(opts.repeats * opts.k);
            let mut per_repeat = Vec::with_capacity(opts.repeats);
            for _ in 0..opts.repeats {
                let mut probe = match opts.sampler {
                    Sampler::EmpiricalMarginals => {
                        let mut row = vec![1.0; m.p() + 1];
                        for (c, v) in row.iter_mut().enumerate().skip(1) {
                            *v = x_train[rng.gen_range(0..n)][c];
                        }
                        row
                    }
                    Sampler::TrainingRows => x_train[rng.gen_range(0..n)].clone(),
                };
                probe[j] = g;
                let infl = influential_points(m, &probe, opts.k)?;
                let values: Vec<f64> = infl.members.iter().map(|&(i, _)| x_train[i][j]).collect();
                per_repeat.push(BoxStats::from_values(&values)?);
                pooled.extend(values);
            }
            let stats = BoxStats::from_values(&pooled)?;
            pooled.sort_by(f64::total_cmp);
            let deciles = (1..10).map(|q| quantile_sorted(&pooled, q as f64 / 10.0)).collect();
            Ok((stats, per_repeat, deciles))
        })
        .collect::<Result<_>>()?;
    let mut per_cell = Vec::with_capacity(cells.len());
    let mut per_repeat = Vec::with_capacity(cells.len());
    let mut deciles = Vec::with_capacity(cells.len());
    for (c, r, d) in cells {
        per_cell.push(c);
        per_repeat.push(r);
        deciles.push(d);
    }
    Ok(GridDiagnostic {
        feature: j,
        grid: grid.to_vec(),
        per_cell,
        per_repeat,
        deciles,
        repeats: opts.repeats,
        k: opts.k,
        sampler: opts.sampler,
    })
}

impl GridDiagnostic {
    /// Flat rows `(grid_value, repeat, min, q1, median, q3, max)`; `scale` and
    /// `shift` map grid values and statistics back to display units.
    pub fn write_csv<W: std::io::Write>(&self, out: W, scale: f64, shift: f64) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["grid_value", "repeat", "min", "q1", "median", "q3", "max"])?;
        for (g, reps) in self.grid.iter().zip(&self.per_repeat) {
            for (r, s) in reps.iter().enumerate() {
                let s = s.affine(scale, shift);
                w.write_record(&[
                    (scale * g + shift).to_string(),
                    r.to_string(),
                    s.min.to_string(),
                    s.q1.to_string(),
                    s.median.to_string(),
                    s.q3.to_string(),
                    s.max.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| MapleError::io("<csv output>", e))?;
        Ok(())
    }
}

/// Fraction of the shorter interquartile interval covered by the other one.
/// Degenerate (zero-width) intervals count as fully overlapping when they
/// touch the other interval.
pub fn iqr_overlap(a: &BoxStats, b: &BoxStats) -> f64 {
    let lo = a.q1.max(b.q1);
    let hi = a.q3.min(b.q3);
    let shorter = a.iqr().min(b.iqr());
    if shorter <= 0.0 {
        return if hi >= lo { 1.0 } else { 0.0 };
    }
    ((hi - lo).max(0.0) / shorter).min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternVerdict {
    pub pattern_detected: bool,
    /// `1 - n_eff / (cells - 1)`, where `n_eff` is the effective number of
    /// adjacent-cell transitions carrying the shift of the decile profile.
    pub score: f64,
    /// Largest `1 - overlap` of interquartile intervals over adjacent cells.
    pub max_gap: f64,
    /// First interior cell whose median sits more than the skew threshold
    /// from its grid value. End cells are skipped: their neighborhoods are
    /// one-sided by construction.
    pub skewed_cell: Option<usize>,
}

/// Flags a grid whose local training distributions move in a few abrupt
/// jumps rather than steadily, or a cell whose influential points are not
/// centered on the probe value.
///
/// The shift between adjacent cells is the mean absolute difference of their
/// pooled deciles. With shares `s_t` of the total shift, `n_eff = 1 / Σ s_t²`
/// ranges from 1 (one jump) to `cells - 1` (uniform drift).
pub fn detect_global_pattern(gd: &GridDiagnostic) -> Result<PatternVerdict> {
    let cells = gd.per_cell.len();
    if cells < 3 || cells != gd.grid.len() || gd.deciles.len() != cells {
        return Err(MapleError::invalid("pattern detection needs >= 3 grid cells"));
    }
    let shifts: Vec<f64> = gd
        .deciles
        .windows(2)
        .map(|w| {
            let n = w[0].len().min(w[1].len()).max(1);
            w[0].iter().zip(&w[1]).map(|(a, b)| (a - b).abs()).sum::<f64>() / n as f64
        })
        .collect();
    let total: f64 = shifts.iter().sum();
    let score = if total > 0.0 {
        let herfindahl: f64 = shifts.iter().map(|s| (s / total).powi(2)).sum();
        1.0 - 1.0 / (herfindahl * shifts.len() as f64)
    } else {
        0.0
    };
    let max_gap = gd
        .per_cell
        .windows(2)
        .map(|w| 1.0 - iqr_overlap(&w[0], &w[1]))
        .fold(0.0, f64::max);
    let skewed_cell = gd
        .per_cell
        .iter()
        .zip(&gd.grid)
        .enumerate()
        .skip(1)
        .take(cells - 2)
        .find(|(_, (s, &g))| (s.median - g).abs() > SKEW_IQR_FACTOR * s.iqr())
        .map(|(i, _)| i);
    Ok(PatternVerdict {
        pattern_detected: score > CONCENTRATION_THRESHOLD || skewed_cell.is_some(),
        score,
        max_gap,
        skewed_cell,
    })
}

/// Mass of the exemplar's local training distribution that shares a leaf
/// with `x` in a random tree: `Σ_i w(x_i, x_exemplar) · c̄(x_i, x)`.
pub fn exemplar_fit_score(m: &MapleModel, exemplar: &Explanation, x: &[f64]) -> Result<f64> {
    let hoods = m.neighborhoods();
    let leaves = hoods.route(&m.ensemble, x);
    let score = exemplar
        .weights
        .entries
        .iter()
        .map(|&(i, w)| w * hoods.co_occurrence(&leaves, i))
        .sum::<f64>();
    Ok(score.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarLibrary {
    pub exemplars: Vec<Explanation>,
    pub applicability_threshold: f64,
    pub ambiguity_margin: f64,
}

impl ExemplarLibrary {
    pub fn new(exemplars: Vec<Explanation>) -> Self {
        ExemplarLibrary {
            exemplars,
            applicability_threshold: 0.1,
            ambiguity_margin: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum ExemplarChoice {
    Chosen { index: usize, score: f64 },
    NoApplicable { best_score: f64 },
    /// Library indices whose scores are within the margin of the best.
    Ambiguous { indices: Vec<usize>, scores: Vec<f64> },
}

/// Applies the threshold and margin rules to precomputed scores.
pub fn decide(scores: &[f64], threshold: f64, margin: f64) -> Result<ExemplarChoice> {
    if !(0.0..=1.0).contains(&threshold) || !(0.0..=1.0).contains(&margin) {
        return Err(MapleError::invalid("threshold and margin must lie in [0, 1]"));
    }
    let (best_idx, best) = scores
        .iter()
        .copied()
        .enumerate()
        .fold(None, |acc: Option<(usize, f64)>, (i, s)| match acc {
            Some((_, b)) if b >= s => acc,
            _ => Some((i, s)),
        })
        .ok_or_else(|| MapleError::invalid("empty exemplar library"))?;
    if best < threshold {
        return Ok(ExemplarChoice::NoApplicable { best_score: best });
    }
    let close: Vec<usize> = (0..scores.len())
        .filter(|&i| best - scores[i] <= margin)
        .collect();
    if close.len() > 1 {
        return Ok(ExemplarChoice::Ambiguous {
            scores: close.iter().map(|&i| scores[i]).collect(),
            indices: close,
        });
    }
    Ok(ExemplarChoice::Chosen {
        index: best_idx,
        score: best,
    })
}

pub fn choose_exemplar(lib: &ExemplarLibrary, m: &MapleModel, x: &[f64]) -> Result<ExemplarChoice> {
    if lib.exemplars.is_empty() {
        return Err(MapleError::invalid("empty exemplar library"));
    }
    let scores = lib
        .exemplars
        .iter()
        .map(|e| exemplar_fit_score(m, e, x))
        .collect::<Result<Vec<_>>>()?;
    decide(&scores, lib.applicability_threshold, lib.ambiguity_margin)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boxplot_examples() {
        let s = BoxStats::from_values(&[5.0, 1.0, 4.0, 2.0, 3.0]).unwrap();
        assert_eq!((s.min, s.q1, s.median, s.q3, s.max, s.mean), (1.0, 2.0, 3.0, 4.0, 5.0, 3.0));
        let s = BoxStats::from_values(&[7.5]).unwrap();
        assert!([s.min, s.q1, s.median, s.q3, s.max, s.mean].iter().all(|&v| v == 7.5));
        let s = BoxStats::from_values(&[0.0, 1.0]).unwrap();
        assert_eq!((s.q1, s.median, s.q3), (0.25, 0.5, 0.75));
        assert!(BoxStats::from_values(&[]).is_err());
    }

    fn box_iqr(q1: f64, q3: f64) -> BoxStats {
        BoxStats {
            min: q1,
            q1,
            median: 0.5 * (q1 + q3),
            q3,
            max: q3,
            mean: 0.5 * (q1 + q3),
        }
    }

    #[test]
    fn overlap_fraction() {
        assert_eq!(iqr_overlap(&box_iqr(0.0, 1.0), &box_iqr(2.0, 3.0)), 0.0);
        assert_eq!(iqr_overlap(&box_iqr(0.0, 1.0), &box_iqr(0.5, 3.0)), 0.5);
        assert_eq!(iqr_overlap(&box_iqr(0.0, 4.0), &box_iqr(1.0, 2.0)), 1.0);
        assert_eq!(iqr_overlap(&box_iqr(1.0, 1.0), &box_iqr(0.0, 2.0)), 1.0);
        assert_eq!(iqr_overlap(&box_iqr(3.0, 3.0), &box_iqr(0.0, 2.0)), 0.0);
    }

    #[test]
    fn even_grid_endpoints() {
        let g = even_grid(0.0, 1.0, 11);
        assert_eq!(g.len(), 11);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[10], 1.0);
        assert!((g[3] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn decision_rules() {
        assert_eq!(
            decide(&[0.0, 0.0], 0.1, 0.05).unwrap(),
            ExemplarChoice::NoApplicable { best_score: 0.0 }
        );
        match decide(&[0.8, 0.79], 0.1, 0.05).unwrap() {
            ExemplarChoice::Ambiguous { indices, .. } => assert_eq!(indices, vec![0, 1]),
            other => panic!("{other:?}"),
        }
        assert_eq!(
            decide(&[0.2, 0.9, 0.3], 0.1, 0.05).unwrap(),
            ExemplarChoice::Chosen { index: 1, score: 0.9 }
        );
        assert!(decide(&[], 0.1, 0.05).is_err());
        assert!(decide(&[0.5], 1.5, 0.05).is_err());
    }

    fn grid_of(centers: &[f64]) -> GridDiagnostic {
        let n = centers.len();
        GridDiagnostic {
            feature: 1,
            grid: even_grid(0.0, 1.0, n),
            per_cell: centers.iter().map(|&c| box_iqr(c - 0.05, c + 0.05)).collect(),
            per_repeat: vec![vec![]; n],
            deciles: centers
                .iter()
                .map(|&c| (1..10).map(|q| c - 0.05 + 0.1 * q as f64 / 10.0).collect())
                .collect(),
            repeats: 1,
            k: 1,
            sampler: Sampler::EmpiricalMarginals,
        }
    }

    #[test]
    fn steady_drift_scores_zero() {
        let v = detect_global_pattern(&grid_of(&even_grid(0.0, 1.0, 11))).unwrap();
        assert!(v.score.abs() < 1e-12);
        assert!(!v.pattern_detected);
        assert_eq!(v.skewed_cell, None);
    }

    #[test]
    fn single_jump_scores_high() {
        let centers: Vec<f64> = (0..11).map(|i| if i < 5 { 0.2 } else { 0.8 }).collect();
        let v = detect_global_pattern(&grid_of(&centers)).unwrap();
        // one transition out of ten carries the whole shift
        assert!((v.score - 0.9).abs() < 1e-12);
        assert!(v.pattern_detected);
        assert_eq!(v.max_gap, 1.0);
    }

    #[test]
    fn pattern_detection_needs_three_cells() {
        let gd = GridDiagnostic {
            feature: 1,
            grid: vec![0.0, 1.0],
            per_cell: vec![box_iqr(0.0, 1.0), box_iqr(0.0, 1.0)],
            per_repeat: vec![vec![], vec![]],
            deciles: vec![vec![0.5; 9]; 2],
            repeats: 1,
            k: 1,
            sampler: Sampler::EmpiricalMarginals,
        };
        assert!(detect_global_pattern(&gd).is_err());
    }
}
