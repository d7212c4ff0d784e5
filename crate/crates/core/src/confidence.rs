//! Confidence estimators: MaxProb, test-time dropout statistics, the trained
//! calibrator and the outlier-detector baseline.
//!
//! Only the ranking of confidences matters downstream, so scores are neither
//! clamped nor rescaled. The dropout variance is the population variance.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::features::{FeatureError, FeatureMask, FeatureSpec, Variant};
use crate::forest::{ForestError, RandomForest};
use crate::records::{PredictionRecord, RecordSet};

#[derive(Debug, Error)]
pub enum ConfidenceError {
    #[error("record `{id}`: {method} needs dropout_probs")]
    MissingDropout { id: String, method: &'static str },
    #[error("record `{id}`: dropout variance needs at least two dropout probabilities")]
    SingletonDropout { id: String },
    #[error("record `{id}`: non-finite confidence")]
    NonFinite { id: String },
    #[error("cannot score an empty record set")]
    Empty,
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Forest(#[from] ForestError),
}

/// A record paired with the confidence some method assigned to it.
#[derive(Debug, Clone, Copy)]
pub struct ScoredRecord<'a> {
    pub record: &'a PredictionRecord,
    pub confidence: f64,
}

impl<'a> ScoredRecord<'a> {
    pub fn new(record: &'a PredictionRecord, confidence: f64) -> Self {
        Self { record, confidence }
    }
}

/// `-Var[values]` with the population (1/K) normalisation.
pub fn neg_variance(values: &[f64]) -> f64 {
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    -values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k
}

pub fn max_prob(r: &PredictionRecord) -> f64 {
    r.top_probs[0]
}

/// Mean probability of the predicted answer across dropout masks.
pub fn dropout_mean(r: &PredictionRecord) -> Result<f64, ConfidenceError> {
    let probs = dropout_probs(r, "dropout mean")?;
    Ok(probs.iter().sum::<f64>() / probs.len() as f64)
}

/// Negative variance of the predicted answer's probability across dropout masks.
pub fn dropout_neg_var(r: &PredictionRecord) -> Result<f64, ConfidenceError> {
    let probs = dropout_probs(r, "dropout variance")?;
    if probs.len() < 2 {
        return Err(ConfidenceError::SingletonDropout { id: r.id.clone() });
    }
    Ok(neg_variance(probs))
}

fn dropout_probs<'r>(
    r: &'r PredictionRecord,
    method: &'static str,
) -> Result<&'r [f64], ConfidenceError> {
    r.dropout_probs
        .as_deref()
        .ok_or_else(|| ConfidenceError::MissingDropout {
            id: r.id.clone(),
            method,
        })
}

/// Calibrator probability that the model's answer on `r` is correct.
pub fn calibrator_confidence(
    model: &RandomForest,
    r: &PredictionRecord,
    variant: Variant,
    mask: &FeatureMask,
) -> Result<f64, ConfidenceError> {
    let fv = FeatureSpec::new(variant, mask.clone())?.extract(r)?;
    Ok(model.predict_proba(&fv)?)
}

/// In-domain probability from an outlier detector trained on the unmasked base catalog.
pub fn outlier_confidence(
    model: &RandomForest,
    r: &PredictionRecord,
) -> Result<f64, ConfidenceError> {
    let fv = FeatureSpec::base().extract(r)?;
    Ok(model.predict_proba(&fv)?)
}

/// A confidence estimator ready to score records.
#[derive(Debug, Clone)]
pub enum ConfidenceMethod {
    MaxProb,
    DropoutMean,
    DropoutNegVar,
    /// Forest trained on correctness labels.
    Calibrator {
        model: Arc<RandomForest>,
        spec: FeatureSpec,
    },
    /// Forest trained on in-domain labels.
    Outlier {
        model: Arc<RandomForest>,
        spec: FeatureSpec,
    },
}

impl ConfidenceMethod {
    pub fn calibrator(
        model: Arc<RandomForest>,
        variant: Variant,
        mask: FeatureMask,
    ) -> Result<Self, ConfidenceError> {
        let spec = FeatureSpec::new(variant, mask)?;
        model.check_catalog(&spec.names())?;
        Ok(ConfidenceMethod::Calibrator { model, spec })
    }

    pub fn outlier(model: Arc<RandomForest>, mask: FeatureMask) -> Result<Self, ConfidenceError> {
        let spec = FeatureSpec::new(Variant::Base, mask)?;
        model.check_catalog(&spec.names())?;
        Ok(ConfidenceMethod::Outlier { model, spec })
    }

    pub fn score(&self, r: &PredictionRecord) -> Result<f64, ConfidenceError> {
        let c = match self {
            ConfidenceMethod::MaxProb => max_prob(r),
            ConfidenceMethod::DropoutMean => dropout_mean(r)?,
            ConfidenceMethod::DropoutNegVar => dropout_neg_var(r)?,
            ConfidenceMethod::Calibrator { model, spec }
            | ConfidenceMethod::Outlier { model, spec } => model.predict_row(&spec.values(r)?),
        };
        if !c.is_finite() {
            return Err(ConfidenceError::NonFinite { id: r.id.clone() });
        }
        Ok(c)
    }

    /// Whether the scores are probabilities (and so can go in a reliability diagram).
    pub fn is_probability(&self) -> bool {
        !matches!(self, ConfidenceMethod::DropoutNegVar)
    }
}

impl fmt::Display for ConfidenceMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfidenceMethod::MaxProb => f.write_str("maxprob"),
            ConfidenceMethod::DropoutMean => f.write_str("dropout-mean"),
            ConfidenceMethod::DropoutNegVar => f.write_str("dropout-var"),
            ConfidenceMethod::Calibrator { spec, .. } => {
                write!(f, "calibrator[{}; ablate={}]", spec.variant(), spec.mask())
            }
            ConfidenceMethod::Outlier { spec, .. } => write!(f, "outlier[ablate={}]", spec.mask()),
        }
    }
}

/// Scores every record in order; fails on the first record the method cannot score.
pub fn score_all<'a>(
    set: &'a RecordSet,
    method: &ConfidenceMethod,
) -> Result<Vec<ScoredRecord<'a>>, ConfidenceError> {
    score_records(set.records(), method)
}

pub fn score_records<'a>(
    records: &'a [PredictionRecord],
    method: &ConfidenceMethod,
) -> Result<Vec<ScoredRecord<'a>>, ConfidenceError> {
    if records.is_empty() {
        return Err(ConfidenceError::Empty);
    }
    records
        .iter()
        .map(|r| Ok(ScoredRecord::new(r, method.score(r)?)))
        .collect()
}
