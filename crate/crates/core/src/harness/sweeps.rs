//! Runs built from repeated experiments: the known-OOD learning curve, the
//! mixture-ratio sweep, the known/unknown extrapolation matrix and feature
//! ablations.

use std::collections::BTreeMap;

use serde::Serialize;

use super::experiment::{CoverageSummary, ExperimentReport};
use super::{run_experiment, ExperimentConfig, ExperimentData, HarnessError, MeanSd, MethodKind};
use crate::features::FeatureMask;
use crate::records::{split, RecordError, RecordSet};
use crate::seed::derive;

/// Allowed AUC increase over the previous budget before a learning-curve row is flagged.
pub const LEARNING_CURVE_SLACK: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LearningPoint {
    pub budget: usize,
    pub calibrator_auc: MeanSd,
    pub maxprob_auc: f64,
    /// AUC is no more than `LEARNING_CURVE_SLACK` above the previous budget's.
    pub within_noise: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LearningCurve {
    pub config: ExperimentConfig,
    pub points: Vec<LearningPoint>,
}

fn auc_of(report: &ExperimentReport, kind: MethodKind) -> Result<MeanSd, HarnessError> {
    report
        .method(kind)
        .map(|m| m.auc)
        .ok_or_else(|| HarnessError::Config(format!("method {kind} produced no result")))
}

/// Mixed calibrator AUC as a function of the known-OOD budget. Each budget `b`
/// trains on `b` source and `b` known-OOD records.
pub fn learning_curve(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    budgets: &[usize],
) -> Result<LearningCurve, HarnessError> {
    if budgets.is_empty() {
        return Err(HarnessError::Config("no budgets given".into()));
    }
    if let Some(&b) = budgets.iter().find(|&&b| b > data.known_ood.len()) {
        return Err(RecordError::Insufficient {
            pool: "known_ood",
            needed: b,
            available: data.known_ood.len(),
        }
        .into());
    }
    let mut points: Vec<LearningPoint> = Vec::with_capacity(budgets.len());
    for &budget in budgets {
        let run_cfg = ExperimentConfig {
            calib_per_domain: budget,
            methods: vec![MethodKind::MaxProb, MethodKind::Calibrator],
            ..cfg.clone()
        };
        let report = run_experiment(&run_cfg, data)?;
        let calibrator_auc = auc_of(&report, MethodKind::Calibrator)?;
        let within_noise = points
            .last()
            .is_none_or(|p| calibrator_auc.mean <= p.calibrator_auc.mean + LEARNING_CURVE_SLACK);
        points.push(LearningPoint {
            budget,
            calibrator_auc,
            maxprob_auc: auc_of(&report, MethodKind::MaxProb)?.mean,
            within_noise,
        });
    }
    Ok(LearningCurve {
        config: cfg.clone(),
        points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlphaPoint {
    pub alpha: f64,
    pub calibrator_auc: MeanSd,
    pub maxprob_auc: f64,
    /// Per-split calibrator AUC minus MaxProb AUC; negative favours the calibrator.
    pub difference: MeanSd,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlphaSweep {
    pub config: ExperimentConfig,
    pub points: Vec<AlphaPoint>,
}

/// Varies the source fraction of both the calibrator pool and the test mixture.
/// Alphas are sorted and deduplicated.
pub fn alpha_sweep(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    alphas: &[f64],
) -> Result<AlphaSweep, HarnessError> {
    if alphas.is_empty() {
        return Err(HarnessError::Config("no alphas given".into()));
    }
    if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(HarnessError::Config(format!("alpha {a} outside [0, 1]")));
    }
    let mut alphas = alphas.to_vec();
    alphas.sort_by(f64::total_cmp);
    alphas.dedup();
    let mut points = Vec::with_capacity(alphas.len());
    for alpha in alphas {
        let run_cfg = ExperimentConfig {
            alpha,
            methods: vec![MethodKind::MaxProb, MethodKind::Calibrator],
            ..cfg.clone()
        };
        let report = run_experiment(&run_cfg, data)?;
        let maxprob_auc = auc_of(&report, MethodKind::MaxProb)?.mean;
        let calibrator = report
            .method(MethodKind::Calibrator)
            .expect("calibrator requested");
        let diffs: Vec<f64> = calibrator
            .splits
            .iter()
            .map(|s| s.auc - maxprob_auc)
            .collect();
        points.push(AlphaPoint {
            alpha,
            calibrator_auc: calibrator.auc,
            maxprob_auc,
            difference: MeanSd::of(&diffs),
        });
    }
    Ok(AlphaSweep {
        config: cfg.clone(),
        points,
    })
}

/// Calibrator improvement over MaxProb as a percentage of the improvement the
/// best-possible ranking would give.
pub fn extrapolation_cell(
    maxprob_auc: f64,
    calib_auc: f64,
    best_auc: f64,
) -> Result<f64, HarnessError> {
    if best_auc > maxprob_auc.min(calib_auc) + 1e-9 {
        return Err(HarnessError::Extrapolation(format!(
            "best-possible AUC {best_auc} exceeds a method AUC ({maxprob_auc}, {calib_auc})"
        )));
    }
    let denom = maxprob_auc - best_auc;
    if denom <= 1e-12 {
        return Err(HarnessError::Extrapolation(
            "MaxProb already matches the best-possible AUC".into(),
        ));
    }
    Ok(100.0 * (maxprob_auc - calib_auc) / denom)
}

/// Record pools for the extrapolation matrix. One source test pool and one
/// source held-out pool are shared by every cell.
#[derive(Debug, Clone)]
pub struct MatrixInputs {
    pub source: RecordSet,
    pub source_heldout: RecordSet,
    pub ood: BTreeMap<String, RecordSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatrixCell {
    pub known: String,
    pub unknown: String,
    /// Known and unknown OOD come from the same dataset (disjoint halves).
    pub oracle: bool,
    pub value: Option<f64>,
    pub note: Option<String>,
    pub maxprob_auc: f64,
    pub calibrator_auc: f64,
    pub best_auc: f64,
    pub training_sources: Vec<String>,
    pub training_domains: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AveragedRow {
    pub method: String,
    pub auc: MeanSd,
    pub cov_at_acc: Vec<CoverageSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatrixReport {
    pub config: ExperimentConfig,
    pub datasets: Vec<String>,
    /// Row-major over (known, unknown), diagonal included.
    pub cells: Vec<MatrixCell>,
    /// Per-method averages over the off-diagonal cells.
    pub averaged: Vec<AveragedRow>,
}

impl MatrixReport {
    pub fn cell(&self, known: &str, unknown: &str) -> Option<&MatrixCell> {
        self.cells
            .iter()
            .find(|c| c.known == known && c.unknown == unknown)
    }
}

/// Runs every ordered (known, unknown) pair of OOD datasets.
pub fn run_matrix(
    cfg: &ExperimentConfig,
    inputs: &MatrixInputs,
) -> Result<MatrixReport, HarnessError> {
    if inputs.ood.len() < 2 {
        return Err(HarnessError::Config(format!(
            "matrix needs at least two OOD datasets, got {}",
            inputs.ood.len()
        )));
    }
    let mut methods = cfg.methods.clone();
    for m in [MethodKind::Calibrator, MethodKind::MaxProb] {
        if !methods.contains(&m) {
            methods.insert(0, m);
        }
    }
    let run_cfg = ExperimentConfig {
        methods,
        ..cfg.clone()
    };
    let names: Vec<String> = inputs.ood.keys().cloned().collect();
    let mut cells = Vec::new();
    let mut off_diagonal: Vec<ExperimentReport> = Vec::new();
    for (ki, known) in names.iter().enumerate() {
        for unknown in &names {
            let oracle = known == unknown;
            let (known_set, unknown_set) = if oracle {
                split(
                    &inputs.ood[known],
                    0.5,
                    derive(cfg.master_seed, "oracle", ki as u64),
                )?
            } else {
                (inputs.ood[known].clone(), inputs.ood[unknown].clone())
            };
            let data = ExperimentData::new(
                inputs.source.clone(),
                inputs.source_heldout.clone(),
                known_set,
                unknown_set,
            )?;
            let report = run_experiment(&run_cfg, &data)?;
            let maxprob_auc = auc_of(&report, MethodKind::MaxProb)?.mean;
            let calibrator = report
                .method(MethodKind::Calibrator)
                .expect("calibrator requested");
            let best_auc = report.best_possible.auc;
            let (value, note) = match extrapolation_cell(maxprob_auc, calibrator.auc.mean, best_auc)
            {
                Ok(v) => (Some(v), None),
                Err(e) => (None, Some(e.to_string())),
            };
            cells.push(MatrixCell {
                known: known.clone(),
                unknown: unknown.clone(),
                oracle,
                value,
                note,
                maxprob_auc,
                calibrator_auc: calibrator.auc.mean,
                best_auc,
                training_sources: calibrator.training_sources.clone(),
                training_domains: calibrator.training_domains.clone(),
            });
            if !oracle {
                off_diagonal.push(report);
            }
        }
    }
    Ok(MatrixReport {
        config: cfg.clone(),
        datasets: names,
        cells,
        averaged: average_reports(&off_diagonal),
    })
}

/// Mean over reports of each method's split-mean values, plus the best-possible row.
fn average_reports(reports: &[ExperimentReport]) -> Vec<AveragedRow> {
    let first = &reports[0];
    let levels: Vec<f64> = first
        .best_possible
        .cov_at_acc
        .iter()
        .map(|c| c.accuracy)
        .collect();
    let mut rows: Vec<AveragedRow> = first
        .methods
        .iter()
        .map(|m| {
            let per: Vec<_> = reports.iter().filter_map(|r| r.method(m.method)).collect();
            let aucs: Vec<f64> = per.iter().map(|r| r.auc.mean).collect();
            AveragedRow {
                method: m.method.name().to_string(),
                auc: MeanSd::of(&aucs),
                cov_at_acc: levels
                    .iter()
                    .map(|&a| CoverageSummary {
                        accuracy: a,
                        coverage: MeanSd::of(
                            &per.iter()
                                .filter_map(|r| r.mean_cov_at(a))
                                .collect::<Vec<_>>(),
                        ),
                    })
                    .collect(),
            }
        })
        .collect();
    let best: Vec<f64> = reports.iter().map(|r| r.best_possible.auc).collect();
    rows.push(AveragedRow {
        method: "best-possible".into(),
        auc: MeanSd::of(&best),
        cov_at_acc: levels
            .iter()
            .enumerate()
            .map(|(i, &a)| CoverageSummary {
                accuracy: a,
                coverage: MeanSd::of(
                    &reports
                        .iter()
                        .map(|r| r.best_possible.cov_at_acc[i].coverage)
                        .collect::<Vec<_>>(),
                ),
            })
            .collect(),
    });
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub mask: String,
    pub method: MethodKind,
    pub auc: Option<MeanSd>,
    pub cov_at_acc: Vec<CoverageSummary>,
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub config: ExperimentConfig,
    pub rows: Vec<AblationRow>,
}

/// One experiment per mask with identical seeds; rows cover the trained methods.
pub fn ablation_run(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    masks: &[FeatureMask],
) -> Result<AblationTable, HarnessError> {
    if masks.is_empty() {
        return Err(HarnessError::Config("no ablation masks given".into()));
    }
    let trained: Vec<MethodKind> = cfg
        .methods
        .iter()
        .copied()
        .filter(|m| m.is_trained())
        .collect();
    let methods = if trained.is_empty() {
        vec![MethodKind::Calibrator]
    } else {
        trained
    };
    let mut rows = Vec::new();
    for mask in masks {
        let run_cfg = ExperimentConfig {
            methods: methods.clone(),
            ablate: mask.clone(),
            ..cfg.clone()
        };
        let report = run_experiment(&run_cfg, data)?;
        for &kind in &methods {
            let row = match report.method(kind) {
                Some(m) => AblationRow {
                    mask: mask.to_string(),
                    method: kind,
                    auc: Some(m.auc),
                    cov_at_acc: m.cov_at_acc.clone(),
                    skipped: None,
                },
                None => AblationRow {
                    mask: mask.to_string(),
                    method: kind,
                    auc: None,
                    cov_at_acc: Vec::new(),
                    skipped: report
                        .skipped
                        .iter()
                        .find(|s| s.method == kind)
                        .map(|s| s.reason.clone()),
                },
            };
            rows.push(row);
        }
    }
    Ok(AblationTable {
        config: cfg.clone(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extrapolation_arithmetic() {
        assert!((extrapolation_cell(0.20, 0.18, 0.10).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(extrapolation_cell(0.2, 0.2, 0.1).unwrap(), 0.0);
        assert!((extrapolation_cell(0.2, 0.1, 0.1).unwrap() - 100.0).abs() < 1e-12);
        assert!(extrapolation_cell(0.1, 0.1, 0.1).is_err());
        assert!(extrapolation_cell(0.2, 0.05, 0.1).is_err());
    }
}
