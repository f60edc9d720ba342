//! Global feature scores from root splits, and top-d selection.

use serde::{Deserialize, Serialize};

use crate::error::{MapleError, Result};
use crate::forest::Ensemble;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScores {
    /// `scores[j - 1]` is the score of feature `j`.
    pub scores: Vec<f64>,
    /// Per tree: root split feature (if any) and its impurity reduction.
    pub provenance: Vec<(Option<usize>, f64)>,
}

impl FeatureScores {
    pub fn p(&self) -> usize {
        self.scores.len()
    }

    pub fn score(&self, j: usize) -> f64 {
        self.scores[j - 1]
    }

    /// Features `1..=p` by descending score, ties by ascending index.
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (1..=self.p()).collect();
        order.sort_by(|&a, &b| self.score(b).total_cmp(&self.score(a)).then(a.cmp(&b)));
        order
    }
}

/// `s_j = Σ_k 1{split_k = j} r_k`; trees whose root is a leaf add nothing.
pub fn feature_scores(ensemble: &Ensemble, p: usize) -> FeatureScores {
    let mut scores = vec![0.0; p];
    let mut provenance = Vec::with_capacity(ensemble.trees.len());
    for tree in &ensemble.trees {
        if let Some(j) = tree.root_split_feature {
            scores[j - 1] += tree.root_impurity_reduction;
        }
        provenance.push((tree.root_split_feature, tree.root_impurity_reduction));
    }
    FeatureScores { scores, provenance }
}

/// The `d` highest-scored features, returned in ascending index order.
pub fn select_top_d(scores: &FeatureScores, d: usize) -> Result<Vec<usize>> {
    if d == 0 || d > scores.p() {
        return Err(MapleError::invalid(format!(
            "d = {d} outside 1..={}",
            scores.p()
        )));
    }
    let mut chosen: Vec<usize> = scores.ranking().into_iter().take(d).collect();
    chosen.sort_unstable();
    Ok(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(v: &[f64]) -> FeatureScores {
        FeatureScores {
            scores: v.to_vec(),
            provenance: Vec::new(),
        }
    }

    #[test]
    fn selection_examples() {
        let s = scores(&[0.0, 0.7, 0.0, 0.9]);
        assert_eq!(select_top_d(&s, 1).unwrap(), vec![4]);
        assert_eq!(select_top_d(&s, 2).unwrap(), vec![2, 4]);
        assert_eq!(select_top_d(&s, 4).unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(select_top_d(&scores(&[0.5, 0.5]), 1).unwrap(), vec![1]);
        assert!(select_top_d(&s, 0).is_err());
        assert!(select_top_d(&s, 5).is_err());
    }

    #[test]
    fn nesting_with_ties() {
        let s = scores(&[0.2, 0.0, 0.2, 0.1, 0.0, 0.2]);
        for d in 1..6 {
            let a = select_top_d(&s, d).unwrap();
            let b = select_top_d(&s, d + 1).unwrap();
            assert!(a.iter().all(|j| b.contains(j)));
        }
    }
}
