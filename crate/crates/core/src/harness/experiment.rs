//! The main pipeline: sample the test mixture once, train calibrators on
//! seeded train/validation splits of the calibrator pool, and score every
//! method on the same test set.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::Serialize;

use super::{ExperimentConfig, ExperimentData, HarnessError, MeanSd, MethodKind};
use crate::confidence::{score_all, ConfidenceMethod};
use crate::evaluation::{
    best_possible_scores, per_domain_breakdown, reliability_diagram, risk_coverage_curve,
    selective_metrics, CoverageAtAccuracy, DomainBreakdown, ReliabilityBin, RiskCoverageCurve,
    SelectiveMetrics, DEFAULT_BINS,
};
use crate::features::{FeatureError, FeatureSpec};
use crate::forest::{grid_search, ForestConfig, GridSearchResult, Matrix};
use crate::records::{concat, sample, sample_mixture, split, PredictionRecord, RecordSet};
use crate::seed::derive;

/// One method's numbers on one train/validation split.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitResult {
    pub split: usize,
    pub auc: f64,
    pub cov_at_acc: Vec<CoverageAtAccuracy>,
    /// Validation AUC of the selected forest.
    pub val_auc: Option<f64>,
    /// Hyperparameters of the selected forest.
    pub forest: Option<String>,
}

/// Split-averaged share and pooled accuracy of one domain inside the answered
/// prefix at one accuracy level.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DomainRow {
    pub acc_level: f64,
    pub domain: String,
    pub share: f64,
    pub accuracy: Option<f64>,
    pub answered: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageSummary {
    pub accuracy: f64,
    pub coverage: MeanSd,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodResult {
    pub method: MethodKind,
    pub label: String,
    pub training_data: String,
    /// Provenance of every record pool the method's forest was trained on.
    pub training_sources: Vec<String>,
    /// Domains present in the method's training and validation records.
    pub training_domains: Vec<String>,
    pub auc: MeanSd,
    pub cov_at_acc: Vec<CoverageSummary>,
    pub splits: Vec<SplitResult>,
    pub per_domain: Vec<DomainRow>,
}

impl MethodResult {
    pub fn mean_cov_at(&self, acc_level: f64) -> Option<f64> {
        self.cov_at_acc
            .iter()
            .find(|c| c.accuracy == acc_level)
            .map(|c| c.coverage.mean)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedMethod {
    pub method: MethodKind,
    pub reason: String,
}

/// Curve and reliability bins from the first split, for CSV export.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodArtifacts {
    pub curve: RiskCoverageCurve,
    pub reliability: Option<Vec<ReliabilityBin>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub test_provenance: String,
    pub test_size: usize,
    pub test_domains: BTreeMap<String, usize>,
    pub test_accuracy: f64,
    pub best_possible: SelectiveMetrics,
    pub methods: Vec<MethodResult>,
    pub skipped: Vec<SkippedMethod>,
    /// Keyed by method name, plus `best-possible`.
    #[serde(skip)]
    pub artifacts: BTreeMap<String, MethodArtifacts>,
}

impl ExperimentReport {
    pub fn method(&self, kind: MethodKind) -> Option<&MethodResult> {
        self.methods.iter().find(|m| m.method == kind)
    }
}

/// Calibrator pool with its per-split train/validation partitions.
struct Pool {
    sources: Vec<String>,
    domains: Vec<String>,
    splits: Vec<(RecordSet, RecordSet)>,
}

impl Pool {
    fn new(
        set: RecordSet,
        sources: Vec<String>,
        cfg: &ExperimentConfig,
    ) -> Result<Self, HarnessError> {
        let domains = set
            .iter()
            .map(|r| r.domain.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let splits = (0..cfg.n_splits)
            .map(|s| {
                stratified_split(
                    &set,
                    cfg.train_fraction,
                    derive(cfg.master_seed, "split", s as u64),
                )
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            sources,
            domains,
            splits,
        })
    }

    fn all_have_dropout(&self) -> bool {
        self.splits
            .first()
            .is_some_and(|(t, v)| t.all_have_dropout() && v.all_have_dropout())
    }
}

/// Splits each domain separately so train and validation keep the pool's domain mix.
fn stratified_split(
    set: &RecordSet,
    fraction: f64,
    seed: u64,
) -> Result<(RecordSet, RecordSet), HarnessError> {
    let mut by_domain: BTreeMap<&str, Vec<PredictionRecord>> = BTreeMap::new();
    for r in set {
        by_domain
            .entry(r.domain.as_str())
            .or_default()
            .push(r.clone());
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (domain, records) in by_domain {
        let group = RecordSet::new(records, domain)?;
        let (t, v) = split(&group, fraction, derive(seed, domain, 0))?;
        train.push(t);
        val.push(v);
    }
    let join = |parts: Vec<RecordSet>, tag: &str| {
        let refs: Vec<&RecordSet> = parts.iter().collect();
        concat(&refs, format!("{}[{tag} {seed}]", set.provenance()))
    };
    Ok((join(train, "train")?, join(val, "validation")?))
}

/// Feature rows of `records` under `spec`.
pub fn feature_matrix(
    records: &[PredictionRecord],
    spec: &FeatureSpec,
) -> Result<Matrix, FeatureError> {
    let mut m = Matrix::with_cols(spec.len());
    for r in records {
        m.push_row(&spec.values(r)?).expect("spec fixes the width");
    }
    Ok(m)
}

/// What a forest is trained to predict.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TrainingTarget {
    /// Whether the model's answer is correct (calibrator).
    Correctness,
    /// Whether the record's domain is one of these (outlier detector).
    InDomain(BTreeSet<String>),
}

impl TrainingTarget {
    pub fn label(&self, r: &PredictionRecord) -> bool {
        match self {
            TrainingTarget::Correctness => r.correct,
            TrainingTarget::InDomain(domains) => domains.contains(&r.domain),
        }
    }
}

/// Grid-searches a forest on `train` with `target` labels; validation always
/// ranks `val` by correctness.
pub fn train_on_records(
    train: &RecordSet,
    val: &RecordSet,
    spec: &FeatureSpec,
    target: &TrainingTarget,
    grid: &[ForestConfig],
) -> Result<GridSearchResult, HarnessError> {
    let x_train = feature_matrix(train.records(), spec)?;
    let y_train: Vec<bool> = train.iter().map(|r| target.label(r)).collect();
    let x_val = feature_matrix(val.records(), spec)?;
    Ok(grid_search(
        &x_train,
        &y_train,
        &spec.names(),
        &x_val,
        val.records(),
        grid,
    )?)
}

/// Runs every configured method against one seeded test mixture.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
) -> Result<ExperimentReport, HarnessError> {
    cfg.validate()?;
    let seed = cfg.master_seed;
    let test = sample_mixture(
        &data.source,
        &data.unknown_ood,
        cfg.alpha,
        cfg.test_n,
        derive(seed, "test", 0),
    )?;
    let mut methods: Vec<MethodKind> = Vec::new();
    for &m in &cfg.methods {
        if !methods.contains(&m) {
            methods.push(m);
        }
    }

    let n_cal = 2 * cfg.calib_per_domain;
    let mixed = if methods
        .iter()
        .any(|m| m.is_trained() && !m.is_source_only())
    {
        let set = sample_mixture(
            &data.source_heldout,
            &data.known_ood,
            cfg.alpha,
            n_cal,
            derive(seed, "calibrate", 0),
        )?;
        let sources = vec![
            data.source_heldout.provenance().to_string(),
            data.known_ood.provenance().to_string(),
        ];
        Some(Pool::new(set, sources, cfg)?)
    } else {
        None
    };
    let source_only = if methods.iter().any(|m| m.is_source_only()) {
        let set = sample(
            &data.source_heldout,
            n_cal,
            derive(seed, "calibrate-source", 0),
        )?;
        Some(Pool::new(
            set,
            vec![data.source_heldout.provenance().to_string()],
            cfg,
        )?)
    } else {
        None
    };
    let in_domain: BTreeSet<String> = data
        .source_heldout
        .iter()
        .map(|r| r.domain.clone())
        .collect();

    let best_scores = best_possible_scores(test.records());
    let best_possible = selective_metrics(&best_scores, &cfg.acc_levels)?;
    let mut artifacts = BTreeMap::new();
    artifacts.insert(
        "best-possible".to_string(),
        MethodArtifacts {
            curve: risk_coverage_curve(&best_scores)?,
            reliability: None,
        },
    );

    let mut results = Vec::new();
    let mut skipped = Vec::new();
    for kind in methods {
        let skip = |reason: String| SkippedMethod {
            method: kind,
            reason,
        };
        if kind.needs_dropout() && !test.all_have_dropout() {
            skipped.push(skip("test records lack dropout fields".into()));
            continue;
        }
        if !kind.is_trained() {
            let method = match kind {
                MethodKind::MaxProb => ConfidenceMethod::MaxProb,
                MethodKind::DropoutMean => ConfidenceMethod::DropoutMean,
                _ => ConfidenceMethod::DropoutNegVar,
            };
            let eval = evaluate(&test, &method, 0, cfg)?;
            artifacts.insert(kind.name().to_string(), eval.artifacts);
            results.push(summarise(
                kind,
                method.to_string(),
                vec![],
                vec![],
                vec![eval.split],
                vec![eval.per_domain],
            ));
            continue;
        }
        let pool = if kind.is_source_only() {
            &source_only
        } else {
            &mixed
        };
        let pool = pool
            .as_ref()
            .expect("pool sampled for every trained method");
        if kind.needs_dropout() && !pool.all_have_dropout() {
            skipped.push(skip("calibrator records lack dropout fields".into()));
            continue;
        }
        let spec = match FeatureSpec::new(kind.variant(), cfg.ablate.clone()) {
            Ok(spec) => spec,
            Err(e @ FeatureError::GroupNotInVariant { .. }) => {
                skipped.push(skip(e.to_string()));
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let target = match kind {
            MethodKind::Outlier => TrainingTarget::InDomain(in_domain.clone()),
            _ => TrainingTarget::Correctness,
        };
        let mut splits = Vec::with_capacity(cfg.n_splits);
        let mut breakdowns = Vec::with_capacity(cfg.n_splits);
        for (s, (train, val)) in pool.splits.iter().enumerate() {
            let grid = cfg.grid(derive(seed, "forest", s as u64));
            let gs = train_on_records(train, val, &spec, &target, &grid)?;
            let model = Arc::new(gs.best_forest);
            let method = match kind {
                MethodKind::Outlier => ConfidenceMethod::outlier(model, spec.mask().clone())?,
                _ => ConfidenceMethod::calibrator(model, spec.variant(), spec.mask().clone())?,
            };
            let mut eval = evaluate(&test, &method, s, cfg)?;
            eval.split.val_auc = Some(gs.val_auc);
            eval.split.forest = Some(gs.best_config.label());
            debug_assert!(eval.split.auc >= best_possible.auc - 1e-12);
            if s == 0 {
                artifacts.insert(kind.name().to_string(), eval.artifacts);
            }
            splits.push(eval.split);
            breakdowns.push(eval.per_domain);
        }
        let label = match kind {
            MethodKind::Outlier => format!("outlier[ablate={}]", spec.mask()),
            _ => format!("calibrator[{}; ablate={}]", spec.variant(), spec.mask()),
        };
        results.push(summarise(
            kind,
            label,
            pool.sources.clone(),
            pool.domains.clone(),
            splits,
            breakdowns,
        ));
    }

    Ok(ExperimentReport {
        config: cfg.clone(),
        test_provenance: test.provenance().to_string(),
        test_size: test.len(),
        test_domains: count_domains(&test),
        test_accuracy: test.iter().filter(|r| r.correct).count() as f64 / test.len() as f64,
        best_possible,
        methods: results,
        skipped,
        artifacts,
    })
}

fn count_domains(set: &RecordSet) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for r in set {
        *m.entry(r.domain.clone()).or_insert(0) += 1;
    }
    m
}

struct Evaluation {
    split: SplitResult,
    per_domain: Vec<DomainBreakdown>,
    artifacts: MethodArtifacts,
}

fn evaluate(
    test: &RecordSet,
    method: &ConfidenceMethod,
    split: usize,
    cfg: &ExperimentConfig,
) -> Result<Evaluation, HarnessError> {
    let scored = score_all(test, method)?;
    let metrics = selective_metrics(&scored, &cfg.acc_levels)?;
    let multi_domain = test.iter().any(|r| r.domain != test.records()[0].domain);
    let per_domain = if multi_domain {
        cfg.acc_levels
            .iter()
            .map(|&a| per_domain_breakdown(&scored, a))
            .collect::<Result<_, _>>()?
    } else {
        Vec::new()
    };
    let reliability = if method.is_probability() {
        Some(reliability_diagram(&scored, DEFAULT_BINS)?)
    } else {
        None
    };
    Ok(Evaluation {
        split: SplitResult {
            split,
            auc: metrics.auc,
            cov_at_acc: metrics.cov_at_acc,
            val_auc: None,
            forest: None,
        },
        per_domain,
        artifacts: MethodArtifacts {
            curve: risk_coverage_curve(&scored)?,
            reliability,
        },
    })
}

fn summarise(
    kind: MethodKind,
    label: String,
    training_sources: Vec<String>,
    training_domains: Vec<String>,
    splits: Vec<SplitResult>,
    breakdowns: Vec<Vec<DomainBreakdown>>,
) -> MethodResult {
    let aucs: Vec<f64> = splits.iter().map(|s| s.auc).collect();
    let cov_at_acc = splits[0]
        .cov_at_acc
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let covs: Vec<f64> = splits.iter().map(|s| s.cov_at_acc[i].coverage).collect();
            CoverageSummary {
                accuracy: c.accuracy,
                coverage: MeanSd::of(&covs),
            }
        })
        .collect();
    MethodResult {
        method: kind,
        label,
        training_data: kind.training_data().to_string(),
        training_sources,
        training_domains,
        auc: MeanSd::of(&aucs),
        cov_at_acc,
        per_domain: domain_rows(&breakdowns),
        splits,
    }
}

/// Averages shares over splits (absent domain = share 0) and pools accuracy.
fn domain_rows(breakdowns: &[Vec<DomainBreakdown>]) -> Vec<DomainRow> {
    let n = breakdowns.len() as f64;
    // (acc level position, domain) -> (share sum, answered, correct)
    let mut acc: BTreeMap<(usize, String), (f64, usize, usize)> = BTreeMap::new();
    let mut levels: Vec<f64> = Vec::new();
    for split in breakdowns {
        for (i, b) in split.iter().enumerate() {
            if levels.len() <= i {
                levels.push(b.acc_level);
            }
            for (domain, st) in &b.domains {
                let e = acc.entry((i, domain.clone())).or_default();
                e.0 += st.share;
                e.1 += st.answered;
                e.2 += (st.accuracy * st.answered as f64).round() as usize;
            }
        }
    }
    acc.into_iter()
        .map(|((i, domain), (share, answered, correct))| DomainRow {
            acc_level: levels[i],
            domain,
            share: share / n,
            accuracy: (answered > 0).then(|| correct as f64 / answered as f64),
            answered,
        })
        .collect()
}

/// MaxProb against the source-only calibrator.
pub fn run_source_only_calibrator(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
) -> Result<ExperimentReport, HarnessError> {
    let cfg = ExperimentConfig {
        methods: vec![MethodKind::MaxProb, MethodKind::CalibratorSourceOnly],
        ..cfg.clone()
    };
    run_experiment(&cfg, data)
}

/// MaxProb, the calibrator and the in-domain detector on shared splits.
pub fn run_outlier_baseline(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
) -> Result<ExperimentReport, HarnessError> {
    let cfg = ExperimentConfig {
        methods: vec![
            MethodKind::MaxProb,
            MethodKind::Calibrator,
            MethodKind::Outlier,
        ],
        ..cfg.clone()
    };
    run_experiment(&cfg, data)
}
