//! Random-forest binary classifier used as the calibrator model.
//!
//! Trees are CART with Gini splits, grown on bootstrap resamples with
//! per-split feature subsampling. Tree `t` draws all of its randomness from
//! `seed::derive(config.seed, "tree", t)`, so the trained forest does not
//! depend on how many threads build it or in which order.

mod persist;
mod tree;

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::confidence::ScoredRecord;
use crate::evaluation::{auc, risk_coverage_curve, EvalError};
use crate::features::FeatureVector;
use crate::records::PredictionRecord;
use crate::seed;

pub use persist::{load_forest, save_forest, FORMAT_VERSION, MAGIC};
pub use tree::{best_split, gini, DecisionTree, Node, Split, IMPURITY_EPS};

#[derive(Debug, Error)]
pub enum ForestError {
    #[error("gini of an empty label list")]
    EmptyLabels,
    #[error("degenerate labels: training data must contain both classes")]
    DegenerateLabels,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid forest config: {0}")]
    InvalidConfig(String),
    #[error("feature catalog mismatch: model expects {expected:?}, got {found:?}")]
    CatalogMismatch {
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("validation set must contain both correct and incorrect records")]
    DegenerateValidation,
    #[error("empty hyperparameter grid")]
    EmptyGrid,
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("I/O error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported forest file version {found} (expected {expected})")]
    Version { found: u8, expected: u8 },
    #[error("malformed forest file: {0}")]
    Format(String),
}

/// Dense row-major feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    n_cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn with_cols(n_cols: usize) -> Self {
        Self {
            n_cols,
            data: Vec::new(),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, ForestError> {
        let n_cols = rows.first().map_or(0, Vec::len);
        let mut m = Self::with_cols(n_cols);
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<(), ForestError> {
        if row.len() != self.n_cols {
            return Err(ForestError::Shape(format!(
                "row of width {} in matrix of width {}",
                row.len(),
                self.n_cols
            )));
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.data.len().checked_div(self.n_cols).unwrap_or(0)
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n_cols + j]
    }
}

/// Features tried at each split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeaturesPerSplit {
    /// `max(1, floor(sqrt(n_features)))`.
    Sqrt,
    Count(usize),
}

impl FeaturesPerSplit {
    pub fn resolve(self, n_features: usize) -> usize {
        match self {
            FeaturesPerSplit::Sqrt => ((n_features as f64).sqrt().floor() as usize).max(1),
            FeaturesPerSplit::Count(k) => k,
        }
    }
}

impl fmt::Display for FeaturesPerSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeaturesPerSplit::Sqrt => f.write_str("sqrt"),
            FeaturesPerSplit::Count(k) => write!(f, "{k}"),
        }
    }
}

impl Serialize for FeaturesPerSplit {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            FeaturesPerSplit::Sqrt => s.serialize_str("sqrt"),
            FeaturesPerSplit::Count(k) => s.serialize_u64(*k as u64),
        }
    }
}

impl<'de> Deserialize<'de> for FeaturesPerSplit {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(usize),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Count(k) => Ok(FeaturesPerSplit::Count(k)),
            Raw::Name(s) if s == "sqrt" => Ok(FeaturesPerSplit::Sqrt),
            Raw::Name(s) => Err(serde::de::Error::custom(format!(
                "features_per_split must be a count or \"sqrt\", got {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// `None` grows until leaves are pure or too small to split.
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    pub features_per_split: FeaturesPerSplit,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: None,
            min_samples_leaf: 1,
            features_per_split: FeaturesPerSplit::Sqrt,
            bootstrap: true,
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self, n_features: usize) -> Result<(), ForestError> {
        let bad = |m: String| Err(ForestError::InvalidConfig(m));
        if self.n_trees == 0 {
            return bad("n_trees must be at least 1".into());
        }
        if self.max_depth == Some(0) {
            return bad("max_depth must be positive or unlimited".into());
        }
        if self.min_samples_leaf == 0 {
            return bad("min_samples_leaf must be at least 1".into());
        }
        if let FeaturesPerSplit::Count(k) = self.features_per_split {
            if k == 0 || k > n_features {
                return bad(format!("features_per_split {k} not in 1..={n_features}"));
            }
        }
        Ok(())
    }

    /// Compact label used in reports, e.g. `trees=100,depth=8,leaf=5`.
    pub fn label(&self) -> String {
        let depth = self
            .max_depth
            .map_or_else(|| "none".to_string(), |d| d.to_string());
        format!(
            "trees={},depth={},leaf={},mtry={},bootstrap={}",
            self.n_trees, depth, self.min_samples_leaf, self.features_per_split, self.bootstrap
        )
    }
}

/// Default hyperparameter grid: 100 or 300 trees, depth 4, 8 or unlimited,
/// min leaf 1, 5 or 25; sqrt feature sampling with bootstrap.
pub fn default_grid(seed: u64) -> Vec<ForestConfig> {
    let mut grid = Vec::with_capacity(18);
    for n_trees in [100, 300] {
        for max_depth in [Some(4), Some(8), None] {
            for min_samples_leaf in [1, 5, 25] {
                grid.push(ForestConfig {
                    n_trees,
                    max_depth,
                    min_samples_leaf,
                    features_per_split: FeaturesPerSplit::Sqrt,
                    bootstrap: true,
                    seed,
                });
            }
        }
    }
    grid
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomForest {
    trees: Vec<DecisionTree>,
    config: ForestConfig,
    feature_names: Vec<String>,
}

impl RandomForest {
    /// Assembles a forest from already-built trees.
    pub fn from_trees(
        trees: Vec<DecisionTree>,
        config: ForestConfig,
        feature_names: Vec<String>,
    ) -> Result<Self, ForestError> {
        if trees.is_empty() {
            return Err(ForestError::InvalidConfig(
                "forest needs at least one tree".into(),
            ));
        }
        if let Some(f) = trees.iter().filter_map(DecisionTree::max_feature).max() {
            if f >= feature_names.len() {
                return Err(ForestError::Format(format!(
                    "split on feature {f} but only {} features named",
                    feature_names.len()
                )));
            }
        }
        Ok(Self {
            trees,
            config,
            feature_names,
        })
    }

    pub fn trees(&self) -> &[DecisionTree] {
        &self.trees
    }

    pub fn config(&self) -> &ForestConfig {
        &self.config
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    /// Mean leaf probability across trees for a raw feature row.
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        let sum: f64 = self.trees.iter().map(|t| t.predict(x)).sum();
        sum / self.trees.len() as f64
    }

    /// Probability of the positive class; the vector's names must match the
    /// catalog the forest was trained on.
    pub fn predict_proba(&self, fv: &FeatureVector) -> Result<f64, ForestError> {
        self.check_catalog(&fv.names)?;
        Ok(self.predict_row(&fv.values))
    }

    pub fn check_catalog(&self, names: &[&str]) -> Result<(), ForestError> {
        if names.len() != self.feature_names.len()
            || names.iter().zip(&self.feature_names).any(|(a, b)| *a != b)
        {
            return Err(ForestError::CatalogMismatch {
                expected: self.feature_names.clone(),
                found: names.iter().map(|s| s.to_string()).collect(),
            });
        }
        Ok(())
    }
}

/// Trains `config.n_trees` trees. Trees are built in parallel on the current
/// rayon pool; the result is identical for any pool size.
pub fn train_forest(
    features: &Matrix,
    labels: &[bool],
    feature_names: &[&str],
    config: &ForestConfig,
) -> Result<RandomForest, ForestError> {
    let n = features.n_rows();
    if labels.len() != n {
        return Err(ForestError::Shape(format!(
            "{n} rows but {} labels",
            labels.len()
        )));
    }
    if feature_names.len() != features.n_cols() {
        return Err(ForestError::Shape(format!(
            "{} columns but {} feature names",
            features.n_cols(),
            feature_names.len()
        )));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    if n < 2 || pos == 0 || pos == n {
        return Err(ForestError::DegenerateLabels);
    }
    config.validate(features.n_cols())?;
    let params = tree::GrowParams {
        max_depth: config.max_depth,
        min_samples_leaf: config.min_samples_leaf,
        features_per_split: config.features_per_split.resolve(features.n_cols()),
    };
    let trees: Vec<DecisionTree> = (0..config.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(config.seed, "tree", t as u64));
            let idx: Vec<usize> = if config.bootstrap {
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            tree::grow(features, labels, idx, &params, &mut rng)
        })
        .collect();
    Ok(RandomForest {
        trees,
        config: config.clone(),
        feature_names: feature_names.iter().map(|s| s.to_string()).collect(),
    })
}

/// Outcome of a hyperparameter search.
#[derive(Debug, Clone)]
pub struct GridSearchResult {
    pub best_config: ForestConfig,
    pub best_forest: RandomForest,
    pub val_auc: f64,
    /// Validation AUC of every grid entry, in grid order.
    pub scores: Vec<(ForestConfig, f64)>,
}

/// Trains one forest per grid entry and keeps the one with the lowest
/// risk-coverage AUC on the validation records (earliest entry on ties).
///
/// `val_features` row `i` must be the feature vector of `val_records[i]`; the
/// validation target is always answer correctness, whatever labels the forest
/// was trained on.
pub fn grid_search(
    train_features: &Matrix,
    train_labels: &[bool],
    feature_names: &[&str],
    val_features: &Matrix,
    val_records: &[PredictionRecord],
    grid: &[ForestConfig],
) -> Result<GridSearchResult, ForestError> {
    if grid.is_empty() {
        return Err(ForestError::EmptyGrid);
    }
    if val_features.n_rows() != val_records.len() {
        return Err(ForestError::Shape(format!(
            "{} validation rows but {} validation records",
            val_features.n_rows(),
            val_records.len()
        )));
    }
    let n_correct = val_records.iter().filter(|r| r.correct).count();
    if n_correct == 0 || n_correct == val_records.len() {
        return Err(ForestError::DegenerateValidation);
    }
    let mut best: Option<(ForestConfig, RandomForest, f64)> = None;
    let mut scores = Vec::with_capacity(grid.len());
    for config in grid {
        let forest = train_forest(train_features, train_labels, feature_names, config)?;
        let scored: Vec<ScoredRecord<'_>> = val_records
            .iter()
            .enumerate()
            .map(|(i, r)| ScoredRecord::new(r, forest.predict_row(val_features.row(i))))
            .collect();
        let val_auc = auc(&risk_coverage_curve(&scored)?);
        scores.push((config.clone(), val_auc));
        if best.as_ref().is_none_or(|(_, _, b)| val_auc < *b) {
            best = Some((config.clone(), forest, val_auc));
        }
    }
    let (best_config, best_forest, val_auc) = best.expect("grid is non-empty");
    Ok(GridSearchResult {
        best_config,
        best_forest,
        val_auc,
        scores,
    })
}
