//! Report files: `report.json` plus one CSV per table or figure analog.
//!
//! Values are fractions in `[0, 1]` written with shortest round-trip float
//! formatting; maps are ordered, so output bytes depend only on the report.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::experiment::{CoverageSummary, ExperimentReport};
use super::sweeps::{AblationTable, AlphaSweep, LearningCurve, MatrixReport};
use super::{HarnessError, MeanSd};
use crate::evaluation::{ReliabilityBin, RiskCoverageCurve};

fn io_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn write_json(dir: &Path, value: &impl Serialize) -> Result<PathBuf, HarnessError> {
    let path = dir.join("report.json");
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_err(&path, e))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    Ok(path)
}

fn write_csv(
    dir: &Path,
    name: &str,
    header: &[String],
    rows: &[Vec<String>],
) -> Result<PathBuf, HarnessError> {
    let path = dir.join(name);
    let mut w = csv::Writer::from_path(&path).map_err(|e| io_err(&path, e))?;
    w.write_record(header).map_err(|e| io_err(&path, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| io_err(&path, e))?;
    }
    w.flush().map_err(|e| io_err(&path, e))?;
    Ok(path)
}

fn create_dir(dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn num(x: f64) -> String {
    format!("{x}")
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

fn cov_header(levels: &[f64]) -> Vec<String> {
    levels
        .iter()
        .flat_map(|a| [format!("cov_at_{a}_mean"), format!("cov_at_{a}_sd")])
        .collect()
}

fn cov_cells(covs: &[CoverageSummary]) -> Vec<String> {
    covs.iter()
        .flat_map(|c| [num(c.coverage.mean), num(c.coverage.sd)])
        .collect()
}

fn auc_cells(m: &MeanSd) -> Vec<String> {
    vec![
        num(m.mean),
        num(m.sd),
        num(m.min),
        num(m.max),
        m.n.to_string(),
    ]
}

pub fn write_curve(
    dir: &Path,
    name: &str,
    curve: &RiskCoverageCurve,
) -> Result<PathBuf, HarnessError> {
    let header = ["coverage", "risk", "threshold"].map(String::from);
    let rows: Vec<Vec<String>> = curve
        .points
        .iter()
        .map(|p| vec![num(p.coverage), num(p.risk), num(p.threshold)])
        .collect();
    write_csv(dir, &format!("curve_{name}.csv"), &header, &rows)
}

pub fn write_reliability(
    dir: &Path,
    name: &str,
    bins: &[ReliabilityBin],
) -> Result<PathBuf, HarnessError> {
    let header = ["bin_lo", "bin_hi", "count", "mean_conf", "accuracy"].map(String::from);
    let rows: Vec<Vec<String>> = bins
        .iter()
        .map(|b| {
            vec![
                num(b.lo),
                num(b.hi),
                b.count.to_string(),
                opt(b.mean_confidence),
                opt(b.accuracy),
            ]
        })
        .collect();
    write_csv(dir, &format!("reliability_{name}.csv"), &header, &rows)
}

/// Writes `report.json`, `table1.csv`, `per_domain.csv` and the first split's
/// curve and reliability CSVs. Returns the written paths.
pub fn write_experiment(
    report: &ExperimentReport,
    dir: &Path,
) -> Result<Vec<PathBuf>, HarnessError> {
    create_dir(dir)?;
    let mut out = vec![write_json(dir, report)?];
    let levels = &report.config.acc_levels;

    let mut header: Vec<String> = [
        "method",
        "label",
        "training_data",
        "auc_mean",
        "auc_sd",
        "auc_min",
        "auc_max",
        "n",
    ]
    .map(String::from)
    .to_vec();
    header.extend(cov_header(levels));
    let mut rows: Vec<Vec<String>> = report
        .methods
        .iter()
        .map(|m| {
            let mut row = vec![
                m.method.name().to_string(),
                m.label.clone(),
                m.training_data.clone(),
            ];
            row.extend(auc_cells(&m.auc));
            row.extend(cov_cells(&m.cov_at_acc));
            row
        })
        .collect();
    let best = &report.best_possible;
    let mut row = vec![
        "best-possible".to_string(),
        "best-possible".into(),
        "none".into(),
    ];
    row.extend(auc_cells(&MeanSd::of(&[best.auc])));
    for c in &best.cov_at_acc {
        row.extend([num(c.coverage), num(0.0)]);
    }
    rows.push(row);
    out.push(write_csv(dir, "table1.csv", &header, &rows)?);

    let header = [
        "method",
        "acc_level",
        "domain",
        "share",
        "accuracy",
        "answered",
    ]
    .map(String::from);
    let rows: Vec<Vec<String>> = report
        .methods
        .iter()
        .flat_map(|m| {
            m.per_domain.iter().map(|d| {
                vec![
                    m.method.name().to_string(),
                    num(d.acc_level),
                    d.domain.clone(),
                    num(d.share),
                    opt(d.accuracy),
                    d.answered.to_string(),
                ]
            })
        })
        .collect();
    out.push(write_csv(dir, "per_domain.csv", &header, &rows)?);

    for (name, art) in &report.artifacts {
        out.push(write_curve(dir, name, &art.curve)?);
        if let Some(bins) = &art.reliability {
            out.push(write_reliability(dir, name, bins)?);
        }
    }
    Ok(out)
}

/// `report.json` and `table4.csv`.
pub fn write_ablation(table: &AblationTable, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    create_dir(dir)?;
    let mut out = vec![write_json(dir, table)?];
    let mut header: Vec<String> = [
        "mask", "method", "auc_mean", "auc_sd", "auc_min", "auc_max", "n",
    ]
    .map(String::from)
    .to_vec();
    header.extend(cov_header(&table.config.acc_levels));
    header.push("skipped".into());
    let width = header.len();
    let rows: Vec<Vec<String>> = table
        .rows
        .iter()
        .map(|r| {
            let mut row = vec![r.mask.clone(), r.method.name().to_string()];
            if let Some(auc) = &r.auc {
                row.extend(auc_cells(auc));
                row.extend(cov_cells(&r.cov_at_acc));
            }
            row.resize(width - 1, String::new());
            row.push(r.skipped.clone().unwrap_or_default());
            row
        })
        .collect();
    out.push(write_csv(dir, "table4.csv", &header, &rows)?);
    Ok(out)
}

/// `report.json` and `fig2.csv`.
pub fn write_learning_curve(
    curve: &LearningCurve,
    dir: &Path,
) -> Result<Vec<PathBuf>, HarnessError> {
    create_dir(dir)?;
    let mut out = vec![write_json(dir, curve)?];
    let header = [
        "budget",
        "calibrator_auc_mean",
        "calibrator_auc_sd",
        "maxprob_auc",
        "within_noise",
    ]
    .map(String::from);
    let rows: Vec<Vec<String>> = curve
        .points
        .iter()
        .map(|p| {
            vec![
                p.budget.to_string(),
                num(p.calibrator_auc.mean),
                num(p.calibrator_auc.sd),
                num(p.maxprob_auc),
                p.within_noise.to_string(),
            ]
        })
        .collect();
    out.push(write_csv(dir, "fig2.csv", &header, &rows)?);
    Ok(out)
}

/// `report.json` and `fig5.csv`.
pub fn write_alpha_sweep(sweep: &AlphaSweep, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    create_dir(dir)?;
    let mut out = vec![write_json(dir, sweep)?];
    let header = [
        "alpha",
        "calibrator_auc_mean",
        "maxprob_auc",
        "difference_mean",
        "difference_sd",
    ]
    .map(String::from);
    let rows: Vec<Vec<String>> = sweep
        .points
        .iter()
        .map(|p| {
            vec![
                num(p.alpha),
                num(p.calibrator_auc.mean),
                num(p.maxprob_auc),
                num(p.difference.mean),
                num(p.difference.sd),
            ]
        })
        .collect();
    out.push(write_csv(dir, "fig5.csv", &header, &rows)?);
    Ok(out)
}

/// `report.json`, `fig4.csv` (one row per cell) and `table1.csv` (off-diagonal averages).
pub fn write_matrix(report: &MatrixReport, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    create_dir(dir)?;
    let mut out = vec![write_json(dir, report)?];
    let header = [
        "known",
        "unknown",
        "oracle",
        "value",
        "maxprob_auc",
        "calibrator_auc",
        "best_auc",
        "note",
    ]
    .map(String::from);
    let rows: Vec<Vec<String>> = report
        .cells
        .iter()
        .map(|c| {
            vec![
                c.known.clone(),
                c.unknown.clone(),
                c.oracle.to_string(),
                opt(c.value),
                num(c.maxprob_auc),
                num(c.calibrator_auc),
                num(c.best_auc),
                c.note.clone().unwrap_or_default(),
            ]
        })
        .collect();
    out.push(write_csv(dir, "fig4.csv", &header, &rows)?);

    let mut header: Vec<String> = ["method", "auc_mean", "auc_sd", "auc_min", "auc_max", "n"]
        .map(String::from)
        .to_vec();
    header.extend(cov_header(&report.config.acc_levels));
    let rows: Vec<Vec<String>> = report
        .averaged
        .iter()
        .map(|r| {
            let mut row = vec![r.method.clone()];
            row.extend(auc_cells(&r.auc));
            row.extend(cov_cells(&r.cov_at_acc));
            row
        })
        .collect();
    out.push(write_csv(dir, "table1.csv", &header, &rows)?);
    Ok(out)
}
