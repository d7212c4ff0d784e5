//! `selqa` command-line front end.
//!
//! Exit status: 0 on success, 1 on usage errors, 2 on data or validation errors.

mod plots;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use selqa::confidence::{score_all, ConfidenceMethod};
use selqa::evaluation::{
    per_domain_breakdown, reliability_diagram, risk_coverage_curve, selective_metrics,
    tune_unanswerable_threshold, DEFAULT_BINS,
};
use selqa::features::{FeatureMask, FeatureSpec, Variant};
use selqa::forest::{load_forest, save_forest, FeaturesPerSplit};
use selqa::harness::{
    ablation_run, alpha_sweep, generate_synthetic, learning_curve, run_experiment, run_matrix,
    run_outlier_baseline, train_on_records, write_ablation, write_alpha_sweep, write_curve,
    write_experiment, write_learning_curve, write_matrix, write_reliability, ExperimentConfig,
    MatrixInputs, SyntheticSpec, TrainingTarget,
};
use selqa::records::{load_records, sample_mixture, save_records, split, RecordSet};
use serde::Serialize;

/// Seed used when `--seed` is not given.
const DEFAULT_SEED: u64 = 0;

#[derive(Parser)]
#[command(
    name = "selqa",
    version,
    about = "Selective question answering under domain shift"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check record files against every record invariant.
    Validate {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Generate synthetic records.
    Synth(SynthArgs),
    /// Sample a test mixture of source and OOD records.
    Mix {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        ood: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid-search and save a calibrator (or outlier detector) forest.
    TrainCalibrator(TrainArgs),
    /// Write per-record confidences as CSV.
    Score {
        #[command(flatten)]
        method: MethodArgs,
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Selective-prediction metrics for one method on one record file.
    Eval {
        #[command(flatten)]
        method: MethodArgs,
        records: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.8,0.9")]
        acc_levels: Vec<f64>,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
        /// Also write report.json, the curve and reliability CSVs here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full method comparison from a config file.
    Experiment(RunArgs),
    /// One experiment per feature mask.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Masks separated by `;`; each is a comma list of groups or `none`.
        #[arg(
            long,
            default_value = "none;top1;top2_5;all_softmax;passage_len;prediction_len"
        )]
        masks: String,
    },
    /// Calibrator AUC against the known-OOD budget.
    LearningCurve {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "100,200,500,1000,2000")]
        budgets: Vec<usize>,
    },
    /// Calibrator minus MaxProb AUC against the source fraction.
    AlphaSweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
        alphas: Vec<f64>,
    },
    /// Known/unknown OOD extrapolation matrix. Source pools come from the config.
    Matrix {
        #[command(flatten)]
        run: RunArgs,
        /// OOD dataset as `name=path`; repeat for each dataset.
        #[arg(long = "ood", required = true)]
        ood: Vec<String>,
    },
    /// MaxProb, calibrator and in-domain detector on shared splits.
    OutlierBaseline(RunArgs),
    /// Pick the confidence threshold below which to predict "unanswerable".
    TuneUnanswerable {
        #[command(flatten)]
        method: MethodArgs,
        records: PathBuf,
    },
    /// Render SVG plots from the CSVs in a report directory.
    Report { dir: PathBuf },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    domain: String,
    #[arg(long)]
    n: usize,
    /// `in-domain` (calibrated, short passages) or `shifted` (harder, long passages).
    #[arg(long, default_value = "in-domain")]
    preset: String,
    #[arg(long)]
    overconfidence: Option<f64>,
    #[arg(long)]
    skill_alpha: Option<f64>,
    #[arg(long)]
    skill_beta: Option<f64>,
    /// Inclusive passage-length range `lo:hi`.
    #[arg(long)]
    passage_len: Option<String>,
    #[arg(long)]
    dropout_masks: Option<usize>,
    #[arg(long)]
    answerable_fraction: Option<f64>,
    #[arg(long)]
    id_prefix: Option<String>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    /// Validation records; without it `--val-fraction` of `--train` is held out.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
    #[arg(long, default_value = "base")]
    variant: Variant,
    #[arg(long, default_value = "")]
    ablate: String,
    /// Train an outlier detector whose positive class is these domains.
    #[arg(long, value_delimiter = ',')]
    in_domain: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "100,300")]
    n_trees: Vec<usize>,
    /// 0 means unlimited.
    #[arg(long, value_delimiter = ',', default_value = "4,8,0")]
    max_depth: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,5,25")]
    min_samples_leaf: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MethodArgs {
    /// maxprob, dropout-mean, dropout-var, calibrator or outlier.
    #[arg(long, default_value = "maxprob")]
    method: String,
    /// Forest file for calibrator and outlier.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value = "base")]
    variant: Variant,
    #[arg(long, default_value = "")]
    ablate: String,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `master_seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

/// A problem with how the command was invoked rather than with the data.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Validate { files } => {
            for f in files {
                let set = load_records(&f)?;
                println!("{}: ok, {} records", f.display(), set.len());
            }
        }
        Command::Synth(a) => synth(a)?,
        Command::Mix {
            source,
            ood,
            alpha,
            n,
            seed,
            out,
        } => {
            let set = sample_mixture(&load_records(source)?, &load_records(ood)?, alpha, n, seed)?;
            save_records(&set, &out)?;
            println!("wrote {} records to {}", set.len(), out.display());
        }
        Command::TrainCalibrator(a) => train(a)?,
        Command::Score {
            method,
            records,
            out,
        } => {
            let set = load_records(records)?;
            let method = build_method(&method)?;
            let scored = score_all(&set, &method)?;
            let mut w = csv::Writer::from_path(&out)
                .with_context(|| format!("writing {}", out.display()))?;
            w.write_record(["id", "domain", "correct", "confidence"])?;
            for s in &scored {
                w.write_record([
                    s.record.id.as_str(),
                    s.record.domain.as_str(),
                    if s.record.correct { "true" } else { "false" },
                    &s.confidence.to_string(),
                ])?;
            }
            w.flush()?;
        }
        Command::Eval {
            method,
            records,
            acc_levels,
            bins,
            out,
        } => eval(&method, &records, &acc_levels, bins, out.as_deref())?,
        Command::Experiment(a) => {
            let (cfg, out) = load_run(&a)?;
            let report = run_experiment(&cfg, &cfg.load_data()?)?;
            write_experiment(&report, &out)?;
            println!("{:<32} {:>8} {:>8}", "method", "AUC", "sd");
            for m in &report.methods {
                println!(
                    "{:<32} {:>8} {:>8}",
                    m.method.name(),
                    pct(m.auc.mean),
                    pct(m.auc.sd)
                );
            }
            println!(
                "{:<32} {:>8}",
                "best-possible",
                pct(report.best_possible.auc)
            );
            for s in &report.skipped {
                println!("skipped {}: {}", s.method, s.reason);
            }
        }
        Command::Ablate { run, masks } => {
            let (cfg, out) = load_run(&run)?;
            let masks = masks
                .split(';')
                .map(|m| {
                    let m = m.trim();
                    if m == "none" {
                        Ok(FeatureMask::none())
                    } else {
                        FeatureMask::parse_list(m).map_err(|e| usage(e.to_string()))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let table = ablation_run(&cfg, &cfg.load_data()?, &masks)?;
            write_ablation(&table, &out)?;
            for r in &table.rows {
                match &r.auc {
                    Some(auc) => println!(
                        "{:<28} {:<24} AUC {}",
                        r.mask,
                        r.method.name(),
                        pct(auc.mean)
                    ),
                    None => println!("{:<28} {:<24} skipped", r.mask, r.method.name()),
                }
            }
        }
        Command::LearningCurve { run, budgets } => {
            let (cfg, out) = load_run(&run)?;
            let curve = learning_curve(&cfg, &cfg.load_data()?, &budgets)?;
            write_learning_curve(&curve, &out)?;
            for p in &curve.points {
                println!(
                    "budget {:>6}  calibrator AUC {}",
                    p.budget,
                    pct(p.calibrator_auc.mean)
                );
            }
        }
        Command::AlphaSweep { run, alphas } => {
            let (cfg, out) = load_run(&run)?;
            let sweep = alpha_sweep(&cfg, &cfg.load_data()?, &alphas)?;
            write_alpha_sweep(&sweep, &out)?;
            plots::render_plots(&out)?;
            for p in &sweep.points {
                println!(
                    "alpha {:<5} AUC difference {}",
                    p.alpha,
                    pct(p.difference.mean)
                );
            }
        }
        Command::Matrix { run, ood } => {
            let (cfg, out) = load_run(&run)?;
            let mut sets = BTreeMap::new();
            for spec in ood {
                let (name, path) = spec
                    .split_once('=')
                    .ok_or_else(|| usage(format!("--ood expects name=path, got `{spec}`")))?;
                sets.insert(name.to_string(), load_records(path)?);
            }
            let source = |p: &Option<PathBuf>, key: &str| -> Result<RecordSet> {
                let p = p
                    .as_ref()
                    .ok_or_else(|| usage(format!("config is missing `{key}`")))?;
                Ok(load_records(p)?)
            };
            let inputs = MatrixInputs {
                source: source(&cfg.source_records, "source_records")?,
                source_heldout: source(&cfg.source_heldout_records, "source_heldout_records")?,
                ood: sets,
            };
            let report = run_matrix(&cfg, &inputs)?;
            write_matrix(&report, &out)?;
            for c in &report.cells {
                let v = c
                    .value
                    .map_or_else(|| "n/a".to_string(), |v| format!("{v:.1}"));
                let tag = if c.oracle { " (oracle)" } else { "" };
                println!("known {:<16} unknown {:<16} {v}{tag}", c.known, c.unknown);
            }
        }
        Command::OutlierBaseline(a) => {
            let (cfg, out) = load_run(&a)?;
            let report = run_outlier_baseline(&cfg, &cfg.load_data()?)?;
            write_experiment(&report, &out)?;
            for m in &report.methods {
                println!("{:<32} AUC {}", m.method.name(), pct(m.auc.mean));
            }
        }
        Command::TuneUnanswerable { method, records } => {
            let set = load_records(records)?;
            let method = build_method(&method)?;
            let t = tune_unanswerable_threshold(&score_all(&set, &method)?)?;
            println!("gamma_prime {}", t.gamma_prime);
            println!("EM {}", pct(t.em_score));
        }
        Command::Report { dir } => {
            for p in plots::render_plots(&dir)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn parse_mask(s: &str) -> Result<FeatureMask> {
    FeatureMask::parse_list(s).map_err(|e| usage(e.to_string()))
}

fn load_run(a: &RunArgs) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.master_seed = seed;
    }
    Ok((cfg, a.out.clone()))
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut spec = match a.preset.as_str() {
        "in-domain" => SyntheticSpec::in_domain(&a.domain, a.n),
        "shifted" => SyntheticSpec::shifted(&a.domain, a.n, 2.5),
        other => {
            return Err(usage(format!(
                "unknown preset `{other}` (expected in-domain or shifted)"
            )))
        }
    };
    if let Some(f) = a.overconfidence {
        spec.overconfidence = f;
    }
    if let Some(x) = a.skill_alpha {
        spec.skill_alpha = x;
    }
    if let Some(x) = a.skill_beta {
        spec.skill_beta = x;
    }
    if let Some(range) = &a.passage_len {
        let parsed = range
            .split_once(':')
            .and_then(|(lo, hi)| Some((lo.parse().ok()?, hi.parse().ok()?)));
        spec.passage_len =
            parsed.ok_or_else(|| usage(format!("--passage-len expects lo:hi, got `{range}`")))?;
    }
    spec.dropout_masks = a.dropout_masks;
    spec.answerable_fraction = a.answerable_fraction;
    spec.id_prefix = a.id_prefix;
    let set = generate_synthetic(&spec, a.seed)?;
    save_records(&set, &a.out)?;
    println!("wrote {} records to {}", set.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let records = load_records(&a.train)?;
    let (train, val) = match &a.val {
        Some(p) => (records, load_records(p)?),
        None => {
            if !(a.val_fraction > 0.0 && a.val_fraction < 1.0) {
                return Err(usage("--val-fraction must lie in (0, 1)"));
            }
            split(&records, 1.0 - a.val_fraction, a.seed)?
        }
    };
    let spec = FeatureSpec::new(a.variant, parse_mask(&a.ablate)?)?;
    let target = if a.in_domain.is_empty() {
        TrainingTarget::Correctness
    } else {
        TrainingTarget::InDomain(a.in_domain.iter().cloned().collect::<BTreeSet<_>>())
    };
    let grid_cfg = ExperimentConfig {
        grid_n_trees: a.n_trees,
        grid_max_depth: a.max_depth,
        grid_min_samples_leaf: a.min_samples_leaf,
        grid_features_per_split: FeaturesPerSplit::Sqrt,
        ..ExperimentConfig::default()
    };
    grid_cfg.validate().map_err(|e| usage(e.to_string()))?;
    let result = train_on_records(&train, &val, &spec, &target, &grid_cfg.grid(a.seed))?;
    save_forest(&result.best_forest, &a.out)?;
    println!("selected {}", result.best_config.label());
    println!("validation AUC {}", pct(result.val_auc));
    Ok(())
}

fn build_method(a: &MethodArgs) -> Result<ConfidenceMethod> {
    let mask = parse_mask(&a.ablate)?;
    let model = || -> Result<Arc<selqa::forest::RandomForest>> {
        let p = a
            .model
            .as_ref()
            .ok_or_else(|| usage(format!("--method {} needs --model", a.method)))?;
        Ok(Arc::new(load_forest(p)?))
    };
    Ok(match a.method.as_str() {
        "maxprob" => ConfidenceMethod::MaxProb,
        "dropout-mean" => ConfidenceMethod::DropoutMean,
        "dropout-var" => ConfidenceMethod::DropoutNegVar,
        "calibrator" => ConfidenceMethod::calibrator(model()?, a.variant, mask)?,
        "outlier" => ConfidenceMethod::outlier(model()?, mask)?,
        other => {
            return Err(usage(format!(
                "unknown method `{other}` (expected maxprob, dropout-mean, dropout-var, calibrator or outlier)"
            )))
        }
    })
}

#[derive(Serialize)]
struct EvalReport {
    method: String,
    records: String,
    n: usize,
    accuracy: f64,
    metrics: selqa::evaluation::SelectiveMetrics,
    per_domain: Vec<selqa::evaluation::DomainBreakdown>,
}

fn eval(
    a: &MethodArgs,
    records: &Path,
    acc_levels: &[f64],
    bins: usize,
    out: Option<&Path>,
) -> Result<()> {
    if let Some(bad) = acc_levels.iter().find(|x| !(**x > 0.0 && **x <= 1.0)) {
        return Err(usage(format!("accuracy level {bad} outside (0, 1]")));
    }
    if bins == 0 {
        return Err(usage("--bins must be positive"));
    }
    let set = load_records(records)?;
    let method = build_method(a)?;
    let scored = score_all(&set, &method)?;
    let metrics = selective_metrics(&scored, acc_levels)?;
    let domains: BTreeSet<&str> = set.iter().map(|r| r.domain.as_str()).collect();
    let per_domain = if domains.len() >= 2 {
        acc_levels
            .iter()
            .map(|&l| per_domain_breakdown(&scored, l))
            .collect::<Result<_, _>>()?
    } else {
        Vec::new()
    };
    println!("method {method}");
    println!("records {}", set.len());
    println!("AUC {}", pct(metrics.auc));
    for c in &metrics.cov_at_acc {
        println!("Cov@{} {}", pct(c.accuracy), pct(c.coverage));
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let name = a.method.as_str();
        write_curve(dir, name, &risk_coverage_curve(&scored)?)?;
        if method.is_probability() {
            write_reliability(dir, name, &reliability_diagram(&scored, bins)?)?;
        }
        let report = EvalReport {
            method: method.to_string(),
            records: set.provenance().to_string(),
            n: set.len(),
            accuracy: set.iter().filter(|r| r.correct).count() as f64 / set.len() as f64,
            metrics,
            per_domain,
        };
        let mut text = serde_json::to_string_pretty(&report)?;
        text.push('\n');
        let path = dir.join("report.json");
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}
