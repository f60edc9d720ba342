//! CART regression trees and the two ensemble flavors (bagged random forests
//! and least-squares gradient boosting).
//!
//! Besides predictions, trees expose what the neighborhood and feature
//! scoring code needs: deterministic leaf routing, per-leaf membership counts
//! over the full training set, and the root split with its impurity
//! reduction.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MapleError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnsembleKind {
    Rf,
    Gbrt,
}

impl std::str::FromStr for EnsembleKind {
    type Err = MapleError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rf" => Ok(EnsembleKind::Rf),
            "gbrt" => Ok(EnsembleKind::Gbrt),
            other => Err(MapleError::invalid(format!("unknown ensemble kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for EnsembleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EnsembleKind::Rf => "rf",
            EnsembleKind::Gbrt => "gbrt",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub n_trees: usize,
    pub min_samples_leaf: usize,
    /// Candidate features drawn per split.
    pub max_features: usize,
    pub max_depth: Option<usize>,
    /// Shrinkage for boosting; ignored by random forests.
    pub learning_rate: f64,
    /// Bootstrap resampling of the training rows (random forests only).
    pub bootstrap: bool,
    pub seed: u64,
}

impl EnsembleConfig {
    /// Random forest defaults for `p` features.
    pub fn random_forest(p: usize) -> Self {
        EnsembleConfig {
            n_trees: 100,
            min_samples_leaf: 10,
            max_features: (p / 3).max(1),
            max_depth: None,
            learning_rate: 0.1,
            bootstrap: true,
            seed: 0,
        }
    }

    /// Gradient boosting defaults for `p` features.
    pub fn gbrt(p: usize) -> Self {
        EnsembleConfig {
            n_trees: 100,
            min_samples_leaf: 10,
            max_features: p.max(1),
            max_depth: Some(3),
            learning_rate: 0.1,
            bootstrap: false,
            seed: 0,
        }
    }

    pub fn for_kind(kind: EnsembleKind, p: usize) -> Self {
        match kind {
            EnsembleKind::Rf => Self::random_forest(p),
            EnsembleKind::Gbrt => Self::gbrt(p),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(MapleError::invalid("n_trees must be >= 1"));
        }
        if self.min_samples_leaf == 0 {
            return Err(MapleError::invalid("min_samples_leaf must be >= 1"));
        }
        if self.max_features == 0 {
            return Err(MapleError::invalid("max_features must be >= 1"));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(MapleError::invalid("learning_rate must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        leaf_id: usize,
        value: f64,
        training_member_count: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    /// Node table; the root is node 0.
    pub nodes: Vec<TreeNode>,
    /// `None` when the root is a leaf.
    pub root_split_feature: Option<usize>,
    /// Root impurity reduction divided by the root sample count.
    pub root_impurity_reduction: f64,
}

/// Best split found at one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitChoice {
    pub feature: usize,
    pub threshold: f64,
    /// `SSE(parent) - SSE(left) - SSE(right)`.
    pub gain: f64,
}

impl RegressionTree {
    pub fn n_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, TreeNode::Leaf { .. }))
            .count()
    }

    fn leaf_node(&self, x: &[f64]) -> &TreeNode {
        let mut id = 0;
        loop {
            match &self.nodes[id] {
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => id = if x[*feature] <= *threshold { *left } else { *right },
                leaf => return leaf,
            }
        }
    }

    /// Index of the leaf reached by `x` (go left iff `x[j] <= threshold`).
    pub fn leaf_index(&self, x: &[f64]) -> usize {
        match self.leaf_node(x) {
            TreeNode::Leaf { leaf_id, .. } => *leaf_id,
            TreeNode::Split { .. } => unreachable!(),
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        match self.leaf_node(x) {
            TreeNode::Leaf { value, .. } => *value,
            TreeNode::Split { .. } => unreachable!(),
        }
    }

    /// Leaf values indexed by leaf id.
    pub fn leaf_values(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_leaves()];
        for node in &self.nodes {
            if let TreeNode::Leaf { leaf_id, value, .. } = node {
                out[*leaf_id] = *value;
            }
        }
        out
    }

    /// Full-training-set member counts indexed by leaf id.
    pub fn leaf_member_counts(&self) -> Vec<usize> {
        let mut out = vec![0; self.n_leaves()];
        for node in &self.nodes {
            if let TreeNode::Leaf {
                leaf_id,
                training_member_count,
                ..
            } = node
            {
                out[*leaf_id] = *training_member_count;
            }
        }
        out
    }

    /// Recounts leaf membership over `x_train`.
    pub fn record_membership(&mut self, x_train: &[Vec<f64>]) {
        let mut counts = vec![0; self.n_leaves()];
        for row in x_train {
            counts[self.leaf_index(row)] += 1;
        }
        for node in &mut self.nodes {
            if let TreeNode::Leaf {
                leaf_id,
                training_member_count,
                ..
            } = node
            {
                *training_member_count = counts[*leaf_id];
            }
        }
    }

    /// Replaces each leaf value by the mean response of the `x_train` rows it
    /// holds. Empty leaves keep their value.
    pub fn set_leaf_means(&mut self, x_train: &[Vec<f64>], y_train: &[f64]) {
        let k = self.n_leaves();
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (row, &y) in x_train.iter().zip(y_train) {
            let l = self.leaf_index(row);
            sums[l] += y;
            counts[l] += 1;
        }
        for node in &mut self.nodes {
            if let TreeNode::Leaf { leaf_id, value, .. } = node {
                if counts[*leaf_id] > 0 {
                    *value = sums[*leaf_id] / counts[*leaf_id] as f64;
                }
            }
        }
    }
}

/// Fits one CART regression tree on the rows `row_idx` of `x` (duplicates
/// allowed, as produced by bootstrapping).
///
/// Splits greedily maximize the size-weighted variance reduction over a
/// random subset of `cfg.max_features` candidate features, with thresholds at
/// midpoints of consecutive distinct values. Ties go to the lowest feature
/// index, then the smallest threshold.
pub fn fit_tree(
    x: &[Vec<f64>],
    y: &[f64],
    row_idx: &[usize],
    cfg: &EnsembleConfig,
    rng: &mut impl Rng,
) -> Result<RegressionTree> {
    if row_idx.is_empty() {
        return Err(MapleError::invalid("cannot fit a tree on zero rows"));
    }
    cfg.validate()?;
    let p = x[row_idx[0]].len() - 1;
    if p == 0 {
        return Err(MapleError::invalid("no features to split on"));
    }

    let mut nodes: Vec<TreeNode> = Vec::new();
    let mut n_leaves = 0;
    let mut root_split = None;
    let mut root_gain = 0.0;
    // (node slot, rows, depth)
    let mut stack = vec![(0usize, row_idx.to_vec(), 0usize)];
    nodes.push(TreeNode::Leaf {
        leaf_id: 0,
        value: 0.0,
        training_member_count: 0,
    });

    while let Some((slot, rows, depth)) = stack.pop() {
        let can_split = rows.len() >= 2 * cfg.min_samples_leaf
            && cfg.max_depth.map_or(true, |d| depth < d);
        let choice = if can_split {
            let features = candidate_features(p, cfg.max_features, rng);
            best_split(x, y, &rows, &features, cfg.min_samples_leaf)
        } else {
            None
        };
        match choice {
            Some(c) => {
                if slot == 0 {
                    root_split = Some(c.feature);
                    root_gain = c.gain / rows.len() as f64;
                }
                let (l_rows, r_rows): (Vec<usize>, Vec<usize>) =
                    rows.iter().partition(|&&i| x[i][c.feature] <= c.threshold);
                let left = nodes.len();
                let right = left + 1;
                for _ in 0..2 {
                    nodes.push(TreeNode::Leaf {
                        leaf_id: 0,
                        value: 0.0,
                        training_member_count: 0,
                    });
                }
                nodes[slot] = TreeNode::Split {
                    feature: c.feature,
                    threshold: c.threshold,
                    left,
                    right,
                };
                // right first so the left subtree gets the lower leaf ids
                stack.push((right, r_rows, depth + 1));
                stack.push((left, l_rows, depth + 1));
            }
            None => {
                let value = rows.iter().map(|&i| y[i]).sum::<f64>() / rows.len() as f64;
                nodes[slot] = TreeNode::Leaf {
                    leaf_id: n_leaves,
                    value,
                    training_member_count: rows.len(),
                };
                n_leaves += 1;
            }
        }
    }

    Ok(RegressionTree {
        nodes,
        root_split_feature: root_split,
        root_impurity_reduction: root_gain,
    })
}

fn candidate_features(p: usize, max_features: usize, rng: &mut impl Rng) -> Vec<usize> {
    if max_features >= p {
        return (1..=p).collect();
    }
    let mut feats: Vec<usize> = sample(rng, p, max_features).into_iter().map(|j| j + 1).collect();
    feats.sort_unstable();
    feats
}

/// Exhaustive search over `features` (ascending) for the split with the
/// largest positive impurity reduction that leaves at least `min_leaf` rows
/// on each side.
pub fn best_split(
    x: &[Vec<f64>],
    y: &[f64],
    rows: &[usize],
    features: &[usize],
    min_leaf: usize,
) -> Option<SplitChoice> {
    let n = rows.len();
    let total: f64 = rows.iter().map(|&i| y[i]).sum();
    let mean = total / n as f64;
    let sse: f64 = rows.iter().map(|&i| (y[i] - mean).powi(2)).sum();
    // pure node: nothing to gain
    if sse <= 1e-12 * n as f64 * (1.0 + mean * mean) {
        return None;
    }
    let min_gain = 1e-12 * sse;

    let mut best: Option<SplitChoice> = None;
    let mut pairs: Vec<(f64, f64)> = Vec::with_capacity(n);
    for &f in features {
        pairs.clear();
        pairs.extend(rows.iter().map(|&i| (x[i][f], y[i])));
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut left_sum = 0.0;
        for pos in 1..n {
            left_sum += pairs[pos - 1].1;
            if pos < min_leaf || n - pos < min_leaf {
                continue;
            }
            if pairs[pos - 1].0 == pairs[pos].0 {
                continue;
            }
            let nl = pos as f64;
            let nr = (n - pos) as f64;
            let diff = left_sum / nl - (total - left_sum) / nr;
            let gain = nl * nr / n as f64 * diff * diff;
            if gain > min_gain && best.map_or(true, |b| gain > b.gain) {
                best = Some(SplitChoice {
                    feature: f,
                    threshold: 0.5 * (pairs[pos - 1].0 + pairs[pos].0),
                    gain,
                });
            }
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub kind: EnsembleKind,
    pub config: EnsembleConfig,
    /// Initial constant prediction (boosting only; 0 for forests).
    pub base: f64,
    pub learning_rate: f64,
    pub trees: Vec<RegressionTree>,
}

impl Ensemble {
    pub fn fit(
        kind: EnsembleKind,
        x_train: &[Vec<f64>],
        y_train: &[f64],
        cfg: &EnsembleConfig,
    ) -> Result<Self> {
        match kind {
            EnsembleKind::Rf => Self::fit_random_forest(x_train, y_train, cfg),
            EnsembleKind::Gbrt => Self::fit_gbrt(x_train, y_train, cfg),
        }
    }

    /// Bagged CART trees; tree `k` draws from the stream seeded `seed + k`.
    pub fn fit_random_forest(
        x_train: &[Vec<f64>],
        y_train: &[f64],
        cfg: &EnsembleConfig,
    ) -> Result<Self> {
        check_training(x_train, y_train, cfg)?;
        let n = x_train.len();
        let trees = (0..cfg.n_trees)
            .into_par_iter()
            .map(|k| {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(k as u64));
                let rows: Vec<usize> = if cfg.bootstrap {
                    (0..n).map(|_| rng.gen_range(0..n)).collect()
                } else {
                    (0..n).collect()
                };
                let mut tree = fit_tree(x_train, y_train, &rows, cfg, &mut rng)?;
                tree.record_membership(x_train);
                Ok(tree)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Ensemble {
            kind: EnsembleKind::Rf,
            config: cfg.clone(),
            base: 0.0,
            learning_rate: cfg.learning_rate,
            trees,
        })
    }

    /// Least-squares boosting from the training mean with shrinkage.
    pub fn fit_gbrt(x_train: &[Vec<f64>], y_train: &[f64], cfg: &EnsembleConfig) -> Result<Self> {
        check_training(x_train, y_train, cfg)?;
        let n = x_train.len();
        let base = y_train.iter().sum::<f64>() / n as f64;
        let rows: Vec<usize> = (0..n).collect();
        let mut current = vec![base; n];
        let mut trees = Vec::with_capacity(cfg.n_trees);
        for k in 0..cfg.n_trees {
            let residual: Vec<f64> = y_train.iter().zip(&current).map(|(y, f)| y - f).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(k as u64));
            let mut tree = fit_tree(x_train, &residual, &rows, cfg, &mut rng)?;
            tree.record_membership(x_train);
            for (f, row) in current.iter_mut().zip(x_train) {
                *f += cfg.learning_rate * tree.predict(row);
            }
            trees.push(tree);
        }
        Ok(Ensemble {
            kind: EnsembleKind::Gbrt,
            config: cfg.clone(),
            base,
            learning_rate: cfg.learning_rate,
            trees,
        })
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        match self.kind {
            EnsembleKind::Rf => {
                self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
            }
            EnsembleKind::Gbrt => {
                self.base + self.learning_rate * self.trees.iter().map(|t| t.predict(x)).sum::<f64>()
            }
        }
    }

    /// Training RMSE after each boosting round (round 0 is the base alone).
    pub fn boosting_curve(&self, x_train: &[Vec<f64>], y_train: &[f64]) -> Vec<f64> {
        let mut current = vec![self.base; x_train.len()];
        let mut curve = Vec::with_capacity(self.trees.len() + 1);
        let rmse = |f: &[f64]| {
            (f.iter().zip(y_train).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / f.len() as f64)
                .sqrt()
        };
        curve.push(rmse(&current));
        for tree in &self.trees {
            for (f, row) in current.iter_mut().zip(x_train) {
                *f += self.learning_rate * tree.predict(row);
            }
            curve.push(rmse(&current));
        }
        curve
    }

    /// Copy of a random forest whose leaf values are full-training-set means.
    pub fn with_training_leaf_means(&self, x_train: &[Vec<f64>], y_train: &[f64]) -> Self {
        let mut out = self.clone();
        for tree in &mut out.trees {
            tree.set_leaf_means(x_train, y_train);
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn check_training(x: &[Vec<f64>], y: &[f64], cfg: &EnsembleConfig) -> Result<()> {
    cfg.validate()?;
    if x.len() != y.len() {
        return Err(MapleError::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    let needed = 2 * cfg.min_samples_leaf;
    if x.len() < needed.max(1) {
        return Err(MapleError::InsufficientRows {
            needed,
            have: x.len(),
        });
    }
    Ok(())
}
