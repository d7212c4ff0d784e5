//! Experiment orchestration: calibrator training on known-OOD data, split
//! averaging, baselines, ablations and sweeps.
//!
//! Every random choice is seeded from `master_seed` through [`crate::seed::derive`]:
//!
//! | tag            | index | used for                                     |
//! |----------------|-------|----------------------------------------------|
//! | `test`         | 0     | sampling the test mixture                    |
//! | `calibrate`    | 0     | sampling the mixed calibrator pool           |
//! | `calibrate-source` | 0 | sampling the source-only calibrator pool     |
//! | `split`        | s     | train/validation split `s`                   |
//! | `forest`       | s     | forest seed for split `s`                    |
//! | `oracle`       | i     | halving dataset `i` on the matrix diagonal   |
//!
//! Methods and ablation masks within one run share these seeds, so their rows
//! differ only in the factor being varied.

mod experiment;
mod output;
mod sweeps;
pub mod synth;

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confidence::ConfidenceError;
use crate::evaluation::EvalError;
use crate::features::{FeatureError, FeatureMask, Variant};
use crate::forest::{FeaturesPerSplit, ForestConfig, ForestError};
use crate::records::{load_records, RecordError, RecordSet};

pub use experiment::{
    feature_matrix, run_experiment, run_outlier_baseline, run_source_only_calibrator,
    train_on_records, CoverageSummary, DomainRow, ExperimentReport, MethodArtifacts, MethodResult,
    SkippedMethod, SplitResult, TrainingTarget,
};
pub use output::{
    write_ablation, write_alpha_sweep, write_curve, write_experiment, write_learning_curve,
    write_matrix, write_reliability,
};
pub use sweeps::{
    ablation_run, alpha_sweep, extrapolation_cell, learning_curve, run_matrix, AblationRow,
    AblationTable, AlphaPoint, AlphaSweep, AveragedRow, LearningCurve, LearningPoint, MatrixCell,
    MatrixInputs, MatrixReport, LEARNING_CURVE_SLACK,
};
pub use synth::{generate_synthetic, SyntheticSpec};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Records(#[from] RecordError),
    #[error(transparent)]
    Confidence(#[from] ConfidenceError),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("I/O error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("record `{id}` (domain `{domain}`) appears in both {first} and {second}")]
    Overlap {
        id: String,
        domain: String,
        first: &'static str,
        second: &'static str,
    },
    #[error("extrapolation cell undefined: {0}")]
    Extrapolation(String),
}

/// Confidence methods a run can compare.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodKind {
    #[serde(rename = "maxprob")]
    MaxProb,
    DropoutMean,
    DropoutVar,
    /// Base-feature calibrator trained on source plus known OOD.
    Calibrator,
    CalibratorSourceOnly,
    /// Dropout-feature calibrator trained on source plus known OOD.
    CalibratorDropout,
    CalibratorDropoutSourceOnly,
    /// In-domain detector used as a confidence.
    Outlier,
}

impl MethodKind {
    pub const ALL: [MethodKind; 8] = [
        MethodKind::MaxProb,
        MethodKind::DropoutMean,
        MethodKind::DropoutVar,
        MethodKind::Calibrator,
        MethodKind::CalibratorSourceOnly,
        MethodKind::CalibratorDropout,
        MethodKind::CalibratorDropoutSourceOnly,
        MethodKind::Outlier,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::MaxProb => "maxprob",
            MethodKind::DropoutMean => "dropout-mean",
            MethodKind::DropoutVar => "dropout-var",
            MethodKind::Calibrator => "calibrator",
            MethodKind::CalibratorSourceOnly => "calibrator-source-only",
            MethodKind::CalibratorDropout => "calibrator-dropout",
            MethodKind::CalibratorDropoutSourceOnly => "calibrator-dropout-source-only",
            MethodKind::Outlier => "outlier",
        }
    }

    pub fn is_trained(self) -> bool {
        !matches!(
            self,
            MethodKind::MaxProb | MethodKind::DropoutMean | MethodKind::DropoutVar
        )
    }

    pub fn needs_dropout(self) -> bool {
        matches!(
            self,
            MethodKind::DropoutMean
                | MethodKind::DropoutVar
                | MethodKind::CalibratorDropout
                | MethodKind::CalibratorDropoutSourceOnly
        )
    }

    pub fn is_source_only(self) -> bool {
        matches!(
            self,
            MethodKind::CalibratorSourceOnly | MethodKind::CalibratorDropoutSourceOnly
        )
    }

    pub fn variant(self) -> Variant {
        if matches!(
            self,
            MethodKind::CalibratorDropout | MethodKind::CalibratorDropoutSourceOnly
        ) {
            Variant::Dropout
        } else {
            Variant::Base
        }
    }

    /// Which pools the method's forest is trained on.
    pub fn training_data(self) -> &'static str {
        match self {
            MethodKind::MaxProb | MethodKind::DropoutMean | MethodKind::DropoutVar => "none",
            MethodKind::CalibratorSourceOnly | MethodKind::CalibratorDropoutSourceOnly => {
                "source only"
            }
            MethodKind::Calibrator | MethodKind::CalibratorDropout => "source + known OOD",
            MethodKind::Outlier => "source + known OOD (domain labels)",
        }
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MethodKind::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = MethodKind::ALL.iter().map(|m| m.name()).collect();
                format!(
                    "unknown method `{s}` (expected one of {})",
                    names.join(", ")
                )
            })
    }
}

/// Run configuration. As a file it is a flat TOML document whose keys are the
/// field names; relative record paths resolve against the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Source records the test mixture draws from.
    pub source_records: Option<PathBuf>,
    /// Source records for calibrator training; must not overlap `source_records`.
    pub source_heldout_records: Option<PathBuf>,
    pub known_ood_records: Option<PathBuf>,
    pub unknown_ood_records: Option<PathBuf>,
    /// Fraction of the test mixture (and of the calibrator pool) drawn from the source.
    pub alpha: f64,
    pub test_n: usize,
    pub calib_per_domain: usize,
    pub train_fraction: f64,
    pub n_splits: usize,
    pub methods: Vec<MethodKind>,
    pub grid_n_trees: Vec<usize>,
    /// 0 means unlimited depth.
    pub grid_max_depth: Vec<usize>,
    pub grid_min_samples_leaf: Vec<usize>,
    pub grid_features_per_split: FeaturesPerSplit,
    pub grid_bootstrap: bool,
    pub acc_levels: Vec<f64>,
    pub master_seed: u64,
    /// Feature groups removed from every calibrator and outlier detector.
    pub ablate: FeatureMask,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            source_records: None,
            source_heldout_records: None,
            known_ood_records: None,
            unknown_ood_records: None,
            alpha: 0.5,
            test_n: 8000,
            calib_per_domain: 2000,
            train_fraction: 0.8,
            n_splits: 10,
            methods: vec![
                MethodKind::MaxProb,
                MethodKind::DropoutMean,
                MethodKind::DropoutVar,
                MethodKind::Calibrator,
                MethodKind::CalibratorSourceOnly,
                MethodKind::CalibratorDropout,
            ],
            grid_n_trees: vec![100, 300],
            grid_max_depth: vec![4, 8, 0],
            grid_min_samples_leaf: vec![1, 5, 25],
            grid_features_per_split: FeaturesPerSplit::Sqrt,
            grid_bootstrap: true,
            acc_levels: vec![0.8, 0.9],
            master_seed: 0,
            ablate: FeatureMask::none(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file, resolving record paths relative to its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.source_records,
            &mut cfg.source_heldout_records,
            &mut cfg.known_ood_records,
            &mut cfg.unknown_ood_records,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if self.test_n == 0 {
            return bad("test_n must be positive".into());
        }
        if self.calib_per_domain == 0 {
            return bad("calib_per_domain must be positive".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!(
                "train_fraction {} outside (0, 1)",
                self.train_fraction
            ));
        }
        if self.n_splits == 0 {
            return bad("n_splits must be at least 1".into());
        }
        if self.methods.is_empty() {
            return bad("methods is empty".into());
        }
        if self.grid_n_trees.is_empty()
            || self.grid_max_depth.is_empty()
            || self.grid_min_samples_leaf.is_empty()
        {
            return bad("every grid_* list needs at least one value".into());
        }
        if self.grid_n_trees.contains(&0) {
            return bad("grid_n_trees values must be positive".into());
        }
        if self.grid_min_samples_leaf.contains(&0) {
            return bad("grid_min_samples_leaf values must be positive".into());
        }
        if let Some(a) = self.acc_levels.iter().find(|a| !(**a > 0.0 && **a <= 1.0)) {
            return bad(format!("accuracy level {a} outside (0, 1]"));
        }
        Ok(())
    }

    /// Cartesian product of the `grid_*` lists, all with forest seed `seed`.
    pub fn grid(&self, seed: u64) -> Vec<ForestConfig> {
        let mut grid = Vec::new();
        for &n_trees in &self.grid_n_trees {
            for &depth in &self.grid_max_depth {
                for &min_samples_leaf in &self.grid_min_samples_leaf {
                    grid.push(ForestConfig {
                        n_trees,
                        max_depth: (depth > 0).then_some(depth),
                        min_samples_leaf,
                        features_per_split: self.grid_features_per_split,
                        bootstrap: self.grid_bootstrap,
                        seed,
                    });
                }
            }
        }
        grid
    }

    /// Loads the four record pools named in the config.
    pub fn load_data(&self) -> Result<ExperimentData, HarnessError> {
        let load = |p: &Option<PathBuf>, key: &str| -> Result<RecordSet, HarnessError> {
            let p = p
                .as_ref()
                .ok_or_else(|| HarnessError::Config(format!("missing `{key}`")))?;
            Ok(load_records(p)?)
        };
        ExperimentData::new(
            load(&self.source_records, "source_records")?,
            load(&self.source_heldout_records, "source_heldout_records")?,
            load(&self.known_ood_records, "known_ood_records")?,
            load(&self.unknown_ood_records, "unknown_ood_records")?,
        )
    }
}

/// The record pools of one experiment.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    /// Source pool for the test mixture.
    pub source: RecordSet,
    /// Source pool for calibrator training.
    pub source_heldout: RecordSet,
    pub known_ood: RecordSet,
    /// Only ever read when building the test mixture.
    pub unknown_ood: RecordSet,
}

impl ExperimentData {
    /// Checks that calibrator pools share no `(domain, id)` with the test pools.
    pub fn new(
        source: RecordSet,
        source_heldout: RecordSet,
        known_ood: RecordSet,
        unknown_ood: RecordSet,
    ) -> Result<Self, HarnessError> {
        let data = Self {
            source,
            source_heldout,
            known_ood,
            unknown_ood,
        };
        let train_pools = [
            ("source_heldout_records", &data.source_heldout),
            ("known_ood_records", &data.known_ood),
        ];
        let test_pools = [
            ("source_records", &data.source),
            ("unknown_ood_records", &data.unknown_ood),
        ];
        for (test_name, test) in test_pools {
            let keys: BTreeSet<(&str, &str)> = test
                .iter()
                .map(|r| (r.domain.as_str(), r.id.as_str()))
                .collect();
            for (train_name, train) in train_pools {
                if let Some(r) = train
                    .iter()
                    .find(|r| keys.contains(&(r.domain.as_str(), r.id.as_str())))
                {
                    return Err(HarnessError::Overlap {
                        id: r.id.clone(),
                        domain: r.domain.clone(),
                        first: train_name,
                        second: test_name,
                    });
                }
            }
        }
        Ok(data)
    }
}

/// Mean, sample standard deviation and range of per-split values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    /// Sample (n - 1) standard deviation; 0 for a single value.
    pub sd: f64,
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

impl MeanSd {
    /// Summary of a non-empty slice.
    pub fn of(values: &[f64]) -> Self {
        assert!(!values.is_empty(), "MeanSd of no values");
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // summation error can push the mean a hair outside the range
        Self {
            mean: mean.clamp(min, max),
            sd,
            min,
            max,
            n,
        }
    }
}
