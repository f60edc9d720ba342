//! Tree-ensemble supervised neighborhoods with per-query local linear models.
//!
//! A fitted [`MapleModel`] is both a regressor and a local explanation system:
//! every prediction is the value of a weighted linear fit whose weights come
//! from leaf co-occurrence in a random forest or gradient boosted ensemble,
//! restricted to the features with the largest root-split impurity reductions.
//!
//! Modules, bottom-up:
//!
//! - [`data`]: CSV loading, standardization, 50/25/25 splits, synthetic data.
//! - [`forest`]: CART regression trees, random forests and gradient boosting.
//! - [`silo`]: local training distributions and the all-feature local fit.
//! - [`dstump`]: root-split feature scores and top-d selection.
//! - [`maple`]: the combined model, explanations and black-box mode.
//! - [`diagnostics`]: influential points, boxplots, grid search, exemplars.
//! - [`eval`]: RMSE, causal and standard explanation metrics, trial harness.

pub mod data;
pub mod diagnostics;
pub mod dstump;
pub mod error;
pub mod eval;
pub mod forest;
pub mod linalg;
pub mod maple;
pub mod silo;

pub use data::{Dataset, SplitAssignment, Standardizer, SyntheticKind, SyntheticSpec};
pub use error::{MapleError, Result};
pub use forest::{Ensemble, EnsembleConfig, EnsembleKind, RegressionTree};
pub use maple::{Explanation, MapleModel, Mode};
pub use silo::{LocalWeights, Neighborhoods};
