//! Supervised neighborhoods: the local training distribution induced by leaf
//! co-occurrence, and the weighted local linear fit over all features.

use serde::{Deserialize, Serialize};

use crate::error::{MapleError, Result};
use crate::forest::{Ensemble, RegressionTree};
use crate::linalg;

/// 1 iff `x` and `x_other` land in the same leaf of `tree`.
pub fn connection(tree: &RegressionTree, x: &[f64], x_other: &[f64]) -> u8 {
    u8::from(tree.leaf_index(x) == tree.leaf_index(x_other))
}

/// Sparse distribution over training rows for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalWeights {
    pub query: Vec<f64>,
    /// `(training index, weight)` with weight > 0, ascending by index.
    pub entries: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightEntry {
    pub index: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_id: Option<usize>,
    pub entries: Vec<WeightEntry>,
}

impl LocalWeights {
    pub fn weight(&self, index: usize) -> f64 {
        self.entries
            .binary_search_by_key(&index, |e| e.0)
            .map(|pos| self.entries[pos].1)
            .unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.entries.iter().map(|e| e.1).sum()
    }

    /// Entries by descending weight, ties by ascending index.
    pub fn sorted_desc(&self) -> Vec<(usize, f64)> {
        let mut out = self.entries.clone();
        out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        out
    }

    pub fn to_record(&self, query_id: Option<usize>) -> WeightsRecord {
        WeightsRecord {
            query_id,
            entries: self
                .sorted_desc()
                .into_iter()
                .map(|(index, weight)| WeightEntry { index, weight })
                .collect(),
        }
    }
}

/// Per-tree leaf assignments of the training rows, precomputed so each query
/// only needs to route itself through the trees.
#[derive(Debug, Clone)]
pub struct Neighborhoods {
    n_train: usize,
    /// `train_leaf[k][i]`: leaf of training row `i` in tree `k`.
    train_leaf: Vec<Vec<usize>>,
    /// `members[k][leaf]`: training rows in that leaf, ascending.
    members: Vec<Vec<Vec<usize>>>,
}

impl Neighborhoods {
    pub fn new(ensemble: &Ensemble, x_train: &[Vec<f64>]) -> Result<Self> {
        if ensemble.trees.is_empty() {
            return Err(MapleError::invalid("ensemble has no trees"));
        }
        let mut train_leaf = Vec::with_capacity(ensemble.trees.len());
        let mut members = Vec::with_capacity(ensemble.trees.len());
        for tree in &ensemble.trees {
            let leaves: Vec<usize> = x_train.iter().map(|r| tree.leaf_index(r)).collect();
            let mut m = vec![Vec::new(); tree.n_leaves()];
            for (i, &l) in leaves.iter().enumerate() {
                m[l].push(i);
            }
            train_leaf.push(leaves);
            members.push(m);
        }
        Ok(Neighborhoods {
            n_train: x_train.len(),
            train_leaf,
            members,
        })
    }

    pub fn n_train(&self) -> usize {
        self.n_train
    }

    pub fn n_trees(&self) -> usize {
        self.train_leaf.len()
    }

    /// Leaves of `x` in every tree.
    pub fn route(&self, ensemble: &Ensemble, x: &[f64]) -> Vec<usize> {
        ensemble.trees.iter().map(|t| t.leaf_index(x)).collect()
    }

    /// `w(x_i, x) = (1/K) Σ_k c_k(x_i, x) / num_k(x)` with `num_k` counted
    /// over the full training set.
    pub fn local_weights(&self, ensemble: &Ensemble, x: &[f64]) -> LocalWeights {
        let k = self.n_trees() as f64;
        let mut acc = vec![0.0; self.n_train];
        for (tree_members, leaf) in self.members.iter().zip(self.route(ensemble, x)) {
            let group = &tree_members[leaf];
            if group.is_empty() {
                continue;
            }
            let share = 1.0 / group.len() as f64;
            for &i in group {
                acc[i] += share;
            }
        }
        let entries = acc
            .into_iter()
            .enumerate()
            .filter(|&(_, a)| a > 0.0)
            .map(|(i, a)| (i, a / k))
            .collect();
        LocalWeights {
            query: x.to_vec(),
            entries,
        }
    }

    /// Fraction of trees in which training row `i` shares a leaf with the
    /// query whose routing is `leaves`.
    pub fn co_occurrence(&self, leaves: &[usize], i: usize) -> f64 {
        let hits = self
            .train_leaf
            .iter()
            .zip(leaves)
            .filter(|(tl, &l)| tl[i] == l)
            .count();
        hits as f64 / self.n_trees() as f64
    }
}

/// One-shot form of [`Neighborhoods::local_weights`].
pub fn local_weights(ensemble: &Ensemble, x_train: &[Vec<f64>], x: &[f64]) -> Result<LocalWeights> {
    Ok(Neighborhoods::new(ensemble, x_train)?.local_weights(ensemble, x))
}

/// Weighted ridge fit over `cols`; column 0, when present, is the
/// unpenalized intercept. Returns coefficients aligned with `cols`.
pub fn weighted_fit(
    x_train: &[Vec<f64>],
    y_train: &[f64],
    weights: &LocalWeights,
    cols: &[usize],
    ridge: f64,
) -> Result<Vec<f64>> {
    if !(ridge >= 0.0) {
        return Err(MapleError::invalid("ridge must be >= 0"));
    }
    let (gram, rhs) = linalg::weighted_normal_equations(x_train, y_train, &weights.entries, cols);
    let penalized: Vec<bool> = cols.iter().map(|&c| c != 0).collect();
    linalg::solve_ridge(&gram, &rhs, ridge, &penalized)
}

/// A local linear model: intercept plus coefficients on selected features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearForm {
    pub intercept: f64,
    /// `(feature index, coefficient)`, ascending by index.
    pub coefficients: Vec<(usize, f64)>,
}

impl LinearForm {
    pub fn constant(value: f64) -> Self {
        LinearForm {
            intercept: value,
            coefficients: Vec::new(),
        }
    }

    /// Pairs a solution from [`weighted_fit`] with its columns.
    pub fn from_fit(cols: &[usize], beta: &[f64]) -> Self {
        let mut intercept = 0.0;
        let mut coefficients = Vec::with_capacity(cols.len());
        for (&c, &b) in cols.iter().zip(beta) {
            if c == 0 {
                intercept = b;
            } else {
                coefficients.push((c, b));
            }
        }
        LinearForm {
            intercept,
            coefficients,
        }
    }

    pub fn coefficient(&self, j: usize) -> Option<f64> {
        self.coefficients.iter().find(|c| c.0 == j).map(|c| c.1)
    }

    /// `intercept + Σ_j coef_j · x[j]`, accumulated in index order.
    pub fn value_at(&self, x: &[f64]) -> f64 {
        self.coefficients
            .iter()
            .fold(self.intercept, |acc, &(j, b)| acc + b * x[j])
    }
}

/// The all-feature local linear prediction at `x`.
pub fn silo_predict(
    ensemble: &Ensemble,
    hoods: &Neighborhoods,
    x_train: &[Vec<f64>],
    y_train: &[f64],
    x: &[f64],
    ridge: f64,
) -> Result<f64> {
    if x.len() != x_train[0].len() {
        return Err(MapleError::DimensionMismatch {
            expected: x_train[0].len(),
            got: x.len(),
        });
    }
    let cols: Vec<usize> = (0..x.len()).collect();
    let w = hoods.local_weights(ensemble, x);
    let beta = weighted_fit(x_train, y_train, &w, &cols, ridge)?;
    Ok(LinearForm::from_fit(&cols, &beta).value_at(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forest::{EnsembleConfig, EnsembleKind, TreeNode};

    fn split_tree(threshold: f64) -> RegressionTree {
        RegressionTree {
            nodes: vec![
                TreeNode::Split {
                    feature: 1,
                    threshold,
                    left: 1,
                    right: 2,
                },
                TreeNode::Leaf {
                    leaf_id: 0,
                    value: 0.0,
                    training_member_count: 0,
                },
                TreeNode::Leaf {
                    leaf_id: 1,
                    value: 0.0,
                    training_member_count: 0,
                },
            ],
            root_split_feature: Some(1),
            root_impurity_reduction: 0.0,
        }
    }

    fn single_leaf() -> RegressionTree {
        RegressionTree {
            nodes: vec![TreeNode::Leaf {
                leaf_id: 0,
                value: 0.0,
                training_member_count: 0,
            }],
            root_split_feature: None,
            root_impurity_reduction: 0.0,
        }
    }

    pub(crate) fn ensemble_of(trees: Vec<RegressionTree>) -> Ensemble {
        Ensemble {
            kind: EnsembleKind::Rf,
            config: EnsembleConfig::random_forest(1),
            base: 0.0,
            learning_rate: 0.1,
            trees,
        }
    }

    #[test]
    fn connection_examples() {
        let leaf = single_leaf();
        assert_eq!(connection(&leaf, &[1.0, 0.0], &[1.0, 9.0]), 1);
        let t = split_tree(0.5);
        assert_eq!(connection(&t, &[1.0, 0.2], &[1.0, 0.7]), 0);
        assert_eq!(connection(&t, &[1.0, 0.7], &[1.0, 0.2]), 0);
        assert_eq!(connection(&t, &[1.0, 0.7], &[1.0, 0.7]), 1);
    }

    #[test]
    fn weights_single_tree() {
        let x = vec![vec![1.0, 0.1], vec![1.0, 0.2], vec![1.0, 0.9]];
        let e = ensemble_of(vec![split_tree(0.5)]);
        let w = local_weights(&e, &x, &[1.0, 0.3]).unwrap();
        assert_eq!(w.entries, vec![(0, 0.5), (1, 0.5)]);
        assert_eq!(w.weight(2), 0.0);
    }

    #[test]
    fn weights_two_trees_average() {
        // tree1 groups the query with {0,1}; tree2 with {1,2}
        let x = vec![vec![1.0, 0.1], vec![1.0, 0.4], vec![1.0, 0.8]];
        let e = ensemble_of(vec![split_tree(0.5), split_tree(0.25)]);
        let w = local_weights(&e, &x, &[1.0, 0.3]).unwrap();
        assert_eq!(w.entries, vec![(0, 0.25), (1, 0.5), (2, 0.25)]);
        let rec = w.to_record(Some(4));
        assert_eq!(rec.entries[0].index, 1);
        assert_eq!(rec.entries[1].index, 0);
    }

    #[test]
    fn uniform_weights_recover_exact_line() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![1.0, i as f64 / 10.0]).collect();
        let y: Vec<f64> = x.iter().map(|r| 2.0 * r[1]).collect();
        let e = ensemble_of(vec![single_leaf()]);
        let hoods = Neighborhoods::new(&e, &x).unwrap();
        for q in [-1.0, 0.35, 3.0] {
            let p = silo_predict(&e, &hoods, &x, &y, &[1.0, q], 0.0).unwrap();
            assert!((p - 2.0 * q).abs() < 1e-10);
        }
    }

    #[test]
    fn point_mass_weights_need_ridge() {
        let x = vec![vec![1.0, 0.1, 0.3], vec![1.0, 0.8, 0.6]];
        let y = vec![1.5, -2.0];
        let w = LocalWeights {
            query: x[0].clone(),
            entries: vec![(0, 1.0)],
        };
        assert!(matches!(
            weighted_fit(&x, &y, &w, &[0, 1, 2], 0.0),
            Err(MapleError::Singular)
        ));
        let beta = weighted_fit(&x, &y, &w, &[0, 1, 2], 1e-6).unwrap();
        let at = linalg::dot(&beta, &x[0]);
        assert!((at - 1.5).abs() < 1e-6);
    }
}
