//! Calibrator feature extraction.
//!
//! Feature catalog, in canonical order:
//!
//! | variant | position | name             | group                      |
//! |---------|----------|------------------|----------------------------|
//! | both    | 0        | `passage_len`    | `passage_len`              |
//! | both    | 1        | `prediction_len` | `prediction_len`           |
//! | base    | 2..7     | `prob_1`..`prob_5` | `top1` (1), `top2_5` (2-5), `all_softmax` (1-5) |
//! | dropout | 2..7     | `mean_prob_1`..`mean_prob_5` | same groups as base |
//! | dropout | 7        | `dropout_neg_var` | `dropout_var`             |
//!
//! The dropout variant replaces the model's raw probabilities with those of the
//! mean ensemble over dropout masks and appends the negative dropout variance.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confidence::neg_variance;
use crate::records::PredictionRecord;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("unknown feature group `{0}` (expected one of top1, top2_5, all_softmax, passage_len, prediction_len, dropout_var)")]
    UnknownGroup(String),
    #[error("feature group `{group}` does not exist in the {variant} catalog")]
    GroupNotInVariant {
        group: FeatureGroup,
        variant: Variant,
    },
    #[error("mask {0} removes every feature")]
    EmptyVector(FeatureMask),
    #[error("record `{id}`: dropout features need {field}")]
    MissingDropout { id: String, field: &'static str },
}

/// Which probabilities feed the calibrator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Base,
    Dropout,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Base => "base",
            Variant::Dropout => "dropout",
        })
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "base" => Ok(Variant::Base),
            "dropout" => Ok(Variant::Dropout),
            other => Err(format!(
                "unknown variant `{other}` (expected base or dropout)"
            )),
        }
    }
}

/// Ablation groups, one per row of the feature-ablation table plus the dropout variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureGroup {
    Top1,
    #[serde(rename = "top2_5")]
    Top2To5,
    AllSoftmax,
    PassageLen,
    PredictionLen,
    DropoutVar,
}

impl FeatureGroup {
    pub const ALL: [FeatureGroup; 6] = [
        FeatureGroup::Top1,
        FeatureGroup::Top2To5,
        FeatureGroup::AllSoftmax,
        FeatureGroup::PassageLen,
        FeatureGroup::PredictionLen,
        FeatureGroup::DropoutVar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FeatureGroup::Top1 => "top1",
            FeatureGroup::Top2To5 => "top2_5",
            FeatureGroup::AllSoftmax => "all_softmax",
            FeatureGroup::PassageLen => "passage_len",
            FeatureGroup::PredictionLen => "prediction_len",
            FeatureGroup::DropoutVar => "dropout_var",
        }
    }

    /// Catalog positions covered by this group.
    fn positions(self) -> std::ops::Range<usize> {
        match self {
            FeatureGroup::PassageLen => 0..1,
            FeatureGroup::PredictionLen => 1..2,
            FeatureGroup::Top1 => 2..3,
            FeatureGroup::Top2To5 => 3..7,
            FeatureGroup::AllSoftmax => 2..7,
            FeatureGroup::DropoutVar => 7..8,
        }
    }

    fn available_in(self, variant: Variant) -> bool {
        self != FeatureGroup::DropoutVar || variant == Variant::Dropout
    }
}

impl fmt::Display for FeatureGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureGroup {
    type Err = FeatureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FeatureGroup::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| FeatureError::UnknownGroup(s.to_string()))
    }
}

/// Set of excluded feature groups.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureMask {
    pub excluded: BTreeSet<FeatureGroup>,
}

impl FeatureMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn excluding(groups: impl IntoIterator<Item = FeatureGroup>) -> Self {
        Self {
            excluded: groups.into_iter().collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.excluded.is_empty()
    }

    /// Parses a comma-separated group list; the empty string is the empty mask.
    pub fn parse_list(s: &str) -> Result<Self, FeatureError> {
        s.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(FeatureGroup::from_str)
            .collect::<Result<BTreeSet<_>, _>>()
            .map(|excluded| Self { excluded })
    }

    fn keeps(&self, position: usize) -> bool {
        !self
            .excluded
            .iter()
            .any(|g| g.positions().contains(&position))
    }
}

impl fmt::Display for FeatureMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.excluded.is_empty() {
            return f.write_str("none");
        }
        let names: Vec<_> = self.excluded.iter().map(|g| g.name()).collect();
        f.write_str(&names.join(","))
    }
}

const BASE_CATALOG: [&str; 7] = [
    "passage_len",
    "prediction_len",
    "prob_1",
    "prob_2",
    "prob_3",
    "prob_4",
    "prob_5",
];

const DROPOUT_CATALOG: [&str; 8] = [
    "passage_len",
    "prediction_len",
    "mean_prob_1",
    "mean_prob_2",
    "mean_prob_3",
    "mean_prob_4",
    "mean_prob_5",
    "dropout_neg_var",
];

/// Full, unmasked catalog of a variant.
pub fn catalog(variant: Variant) -> &'static [&'static str] {
    match variant {
        Variant::Base => &BASE_CATALOG,
        Variant::Dropout => &DROPOUT_CATALOG,
    }
}

/// Ordered calibrator inputs for one record.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub names: Vec<&'static str>,
    pub mask: FeatureMask,
}

/// A validated (variant, mask) pair: the unit the calibrator is trained on.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FeatureSpec {
    variant: Variant,
    mask: FeatureMask,
    kept: Vec<usize>,
}

impl FeatureSpec {
    pub fn new(variant: Variant, mask: FeatureMask) -> Result<Self, FeatureError> {
        if let Some(group) = mask.excluded.iter().find(|g| !g.available_in(variant)) {
            return Err(FeatureError::GroupNotInVariant {
                group: *group,
                variant,
            });
        }
        let kept: Vec<usize> = (0..catalog(variant).len())
            .filter(|&i| mask.keeps(i))
            .collect();
        if kept.is_empty() {
            return Err(FeatureError::EmptyVector(mask));
        }
        Ok(Self {
            variant,
            mask,
            kept,
        })
    }

    pub fn base() -> Self {
        Self::new(Variant::Base, FeatureMask::none()).expect("unmasked catalog is non-empty")
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn mask(&self) -> &FeatureMask {
        &self.mask
    }

    pub fn names(&self) -> Vec<&'static str> {
        let cat = catalog(self.variant);
        self.kept.iter().map(|&i| cat[i]).collect()
    }

    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }

    /// Masked feature values for one record, without the name bookkeeping.
    pub fn values(&self, r: &PredictionRecord) -> Result<Vec<f64>, FeatureError> {
        let full = match self.variant {
            Variant::Base => full_base(r),
            Variant::Dropout => full_dropout(r)?,
        };
        Ok(self.kept.iter().map(|&i| full[i]).collect())
    }

    pub fn extract(&self, r: &PredictionRecord) -> Result<FeatureVector, FeatureError> {
        Ok(FeatureVector {
            values: self.values(r)?,
            names: self.names(),
            mask: self.mask.clone(),
        })
    }
}

fn full_base(r: &PredictionRecord) -> Vec<f64> {
    let mut v = Vec::with_capacity(BASE_CATALOG.len());
    v.push(f64::from(r.passage_len));
    v.push(f64::from(r.prediction_len));
    v.extend_from_slice(&r.top_probs);
    v
}

fn full_dropout(r: &PredictionRecord) -> Result<Vec<f64>, FeatureError> {
    let missing = |field| FeatureError::MissingDropout {
        id: r.id.clone(),
        field,
    };
    let probs = r
        .dropout_probs
        .as_deref()
        .ok_or_else(|| missing("dropout_probs"))?;
    let mean_top = r
        .dropout_mean_top_probs
        .as_ref()
        .ok_or_else(|| missing("dropout_mean_top_probs"))?;
    if probs.len() < 2 {
        return Err(missing("at least two dropout_probs"));
    }
    let mut v = Vec::with_capacity(DROPOUT_CATALOG.len());
    v.push(f64::from(r.passage_len));
    v.push(f64::from(r.prediction_len));
    v.extend_from_slice(mean_top);
    v.push(neg_variance(probs));
    Ok(v)
}

/// The seven base features of a record under `mask`.
pub fn extract_base_features(
    r: &PredictionRecord,
    mask: &FeatureMask,
) -> Result<FeatureVector, FeatureError> {
    FeatureSpec::new(Variant::Base, mask.clone())?.extract(r)
}

/// The eight dropout-variant features of a record under `mask`.
pub fn extract_dropout_features(
    r: &PredictionRecord,
    mask: &FeatureMask,
) -> Result<FeatureVector, FeatureError> {
    FeatureSpec::new(Variant::Dropout, mask.clone())?.extract(r)
}
