//! End-to-end runs of the `selqa` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use selqa::confidence::{max_prob, ScoredRecord};
use selqa::evaluation::selective_metrics;
use selqa::records::load_records;

fn selqa(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_selqa"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = selqa(args, cwd);
    assert!(
        out.status.success(),
        "selqa {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str], cwd: &Path) -> i32 {
    selqa(args, cwd).status.code().unwrap()
}

/// Writes source, held-out, known and unknown OOD record files.
fn synth_pools(dir: &Path) {
    let gen = |extra: &[&str]| {
        let mut args = vec!["synth", "--dropout-masks", "5"];
        args.extend_from_slice(extra);
        ok(&args, dir);
    };
    gen(&[
        "--domain",
        "squad",
        "--n",
        "800",
        "--id-prefix",
        "test",
        "--seed",
        "1",
        "--out",
        "source.jsonl",
    ]);
    gen(&[
        "--domain",
        "squad",
        "--n",
        "800",
        "--id-prefix",
        "held",
        "--seed",
        "2",
        "--out",
        "held.jsonl",
    ]);
    gen(&[
        "--domain",
        "known",
        "--preset",
        "shifted",
        "--overconfidence",
        "2.5",
        "--n",
        "600",
        "--seed",
        "3",
        "--out",
        "known.jsonl",
    ]);
    gen(&[
        "--domain",
        "unknown",
        "--preset",
        "shifted",
        "--overconfidence",
        "2.5",
        "--n",
        "600",
        "--seed",
        "4",
        "--out",
        "unknown.jsonl",
    ]);
    fs::write(
        dir.join("exp.toml"),
        r#"source_records = "source.jsonl"
source_heldout_records = "held.jsonl"
known_ood_records = "known.jsonl"
unknown_ood_records = "unknown.jsonl"
test_n = 600
calib_per_domain = 200
n_splits = 2
grid_n_trees = [20]
grid_max_depth = [4, 0]
grid_min_samples_leaf = [5]
"#,
    )
    .unwrap();
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    out.sort();
    out
}

#[test]
fn exit_codes_separate_usage_from_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&["--help"], d), 0);
    assert_eq!(code(&["--version"], d), 0);
    assert_eq!(code(&[], d), 1);
    assert_eq!(code(&["eval"], d), 1);
    assert_eq!(code(&["eval", "x.jsonl", "--bogus"], d), 1);
    assert_eq!(code(&["validate", "missing.jsonl"], d), 2);

    fs::write(
        d.join("bad.jsonl"),
        r#"{"id":"a","domain":"squad","passage_len":5,"prediction_len":1,"top_probs":[0.2,0.7,0.0,0.0,0.0],"correct":true}"#,
    )
    .unwrap();
    let out = selqa(&["validate", "bad.jsonl"], d);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("top_probs not sorted"), "{err}");

    ok(
        &[
            "synth", "--domain", "squad", "--n", "50", "--out", "s.jsonl",
        ],
        d,
    );
    // calibrator needs a model file: a usage error
    assert_eq!(code(&["eval", "s.jsonl", "--method", "calibrator"], d), 1);
    assert_eq!(code(&["eval", "s.jsonl", "--method", "nope"], d), 1);
    // no dropout fields in the records: a data error
    assert_eq!(code(&["eval", "s.jsonl", "--method", "dropout-var"], d), 2);
    // no answerable flags
    assert_eq!(code(&["tune-unanswerable", "s.jsonl"], d), 2);
}

#[test]
fn eval_report_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        &[
            "synth", "--domain", "squad", "--n", "400", "--out", "a.jsonl",
        ],
        d,
    );
    ok(
        &[
            "synth", "--domain", "news", "--preset", "shifted", "--n", "400", "--seed", "5",
            "--out", "b.jsonl",
        ],
        d,
    );
    ok(
        &[
            "mix",
            "--source",
            "a.jsonl",
            "--ood",
            "b.jsonl",
            "--n",
            "500",
            "--seed",
            "9",
            "--out",
            "mix.jsonl",
        ],
        d,
    );
    ok(
        &[
            "eval",
            "mix.jsonl",
            "--acc-levels",
            "0.7,0.9",
            "--out",
            "ev",
        ],
        d,
    );

    let set = load_records(d.join("mix.jsonl")).unwrap();
    assert_eq!(set.len(), 500);
    assert_eq!(set.iter().filter(|r| r.domain == "squad").count(), 250);
    let scored: Vec<ScoredRecord<'_>> = set
        .iter()
        .map(|r| ScoredRecord::new(r, max_prob(r)))
        .collect();
    let want = selective_metrics(&scored, &[0.7, 0.9]).unwrap();
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("ev/report.json")).unwrap()).unwrap();
    assert_eq!(report["metrics"]["auc"].as_f64().unwrap(), want.auc);
    for (i, c) in want.cov_at_acc.iter().enumerate() {
        assert_eq!(
            report["metrics"]["cov_at_acc"][i]["coverage"]
                .as_f64()
                .unwrap(),
            c.coverage
        );
    }
    let curve = fs::read_to_string(d.join("ev/curve_maxprob.csv")).unwrap();
    assert_eq!(curve.lines().count(), 501);
    let bins = fs::read_to_string(d.join("ev/reliability_maxprob.csv")).unwrap();
    assert_eq!(bins.lines().count(), 11);

    ok(&["score", "mix.jsonl", "--out", "scores.csv"], d);
    let scores = fs::read_to_string(d.join("scores.csv")).unwrap();
    assert!(scores.starts_with("id,domain,correct,confidence\n"));
    assert_eq!(scores.lines().count(), 501);
}

#[test]
fn trained_calibrator_round_trips_through_a_model_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth_pools(d);
    let out = ok(
        &[
            "train-calibrator",
            "--train",
            "held.jsonl",
            "--val",
            "known.jsonl",
            "--n-trees",
            "10",
            "--max-depth",
            "4",
            "--min-samples-leaf",
            "5",
            "--out",
            "cal.model",
        ],
        d,
    );
    assert!(out.contains("selected trees=10,depth=4,leaf=5"), "{out}");
    let first = ok(
        &[
            "eval",
            "unknown.jsonl",
            "--method",
            "calibrator",
            "--model",
            "cal.model",
        ],
        d,
    );
    let second = ok(
        &[
            "eval",
            "unknown.jsonl",
            "--method",
            "calibrator",
            "--model",
            "cal.model",
        ],
        d,
    );
    assert_eq!(first, second);
    assert!(first.contains("AUC"));
    // the dropout variant expects a different feature catalog
    assert_eq!(
        code(
            &[
                "eval",
                "unknown.jsonl",
                "--method",
                "calibrator",
                "--model",
                "cal.model",
                "--variant",
                "dropout"
            ],
            d
        ),
        2
    );

    ok(
        &[
            "mix",
            "--source",
            "held.jsonl",
            "--ood",
            "known.jsonl",
            "--n",
            "800",
            "--out",
            "pool.jsonl",
        ],
        d,
    );
    ok(
        &[
            "train-calibrator",
            "--train",
            "pool.jsonl",
            "--in-domain",
            "squad",
            "--n-trees",
            "10",
            "--max-depth",
            "4",
            "--min-samples-leaf",
            "5",
            "--out",
            "ood.model",
        ],
        d,
    );
    ok(
        &[
            "eval",
            "unknown.jsonl",
            "--method",
            "outlier",
            "--model",
            "ood.model",
        ],
        d,
    );
}

#[test]
fn experiment_is_byte_reproducible_and_plots_render() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth_pools(d);
    ok(&["experiment", "--config", "exp.toml", "--out", "run1"], d);
    ok(&["experiment", "--config", "exp.toml", "--out", "run2"], d);
    let (a, b) = (files(&d.join("run1")), files(&d.join("run2")));
    assert!(a.len() > 5);
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.file_name(), y.file_name());
        assert_eq!(
            fs::read(x).unwrap(),
            fs::read(y).unwrap(),
            "{}",
            x.display()
        );
    }

    let other = ok(
        &[
            "experiment",
            "--config",
            "exp.toml",
            "--seed",
            "7",
            "--out",
            "run3",
        ],
        d,
    );
    assert!(other.contains("calibrator"));
    assert_ne!(
        fs::read(d.join("run1/table1.csv")).unwrap(),
        fs::read(d.join("run3/table1.csv")).unwrap()
    );

    ok(&["report", "run1"], d);
    ok(&["report", "run2"], d);
    let svg1 = fs::read(d.join("run1/curve_calibrator.svg")).unwrap();
    assert!(svg1.starts_with(b"<svg"));
    assert_eq!(svg1, fs::read(d.join("run2/curve_calibrator.svg")).unwrap());
    assert!(d.join("run1/reliability_maxprob.svg").exists());

    fs::create_dir(d.join("empty")).unwrap();
    assert_eq!(code(&["report", "empty"], d), 2);
}

#[test]
fn sweep_commands_write_their_tables() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth_pools(d);
    ok(
        &[
            "alpha-sweep",
            "--config",
            "exp.toml",
            "--alphas",
            "0.25,0.5",
            "--out",
            "alpha",
        ],
        d,
    );
    let fig = fs::read_to_string(d.join("alpha/fig5.csv")).unwrap();
    assert_eq!(fig.lines().count(), 3);
    assert!(d.join("alpha/fig5.svg").exists());

    ok(
        &[
            "learning-curve",
            "--config",
            "exp.toml",
            "--budgets",
            "50,100",
            "--out",
            "lc",
        ],
        d,
    );
    assert_eq!(
        fs::read_to_string(d.join("lc/fig2.csv"))
            .unwrap()
            .lines()
            .count(),
        3
    );

    ok(
        &[
            "ablate",
            "--config",
            "exp.toml",
            "--masks",
            "none;top1,passage_len",
            "--out",
            "abl",
        ],
        d,
    );
    assert!(fs::read_to_string(d.join("abl/table4.csv"))
        .unwrap()
        .contains("\"top1,passage_len\",calibrator,"));
    assert_eq!(
        code(
            &["ablate", "--config", "exp.toml", "--masks", "wings", "--out", "abl2"],
            d
        ),
        1
    );

    ok(
        &["outlier-baseline", "--config", "exp.toml", "--out", "outl"],
        d,
    );
    assert!(fs::read_to_string(d.join("outl/table1.csv"))
        .unwrap()
        .contains("\noutlier,"));

    ok(
        &[
            "matrix",
            "--config",
            "exp.toml",
            "--ood",
            "k=known.jsonl",
            "--ood",
            "u=unknown.jsonl",
            "--out",
            "mx",
        ],
        d,
    );
    assert_eq!(
        fs::read_to_string(d.join("mx/fig4.csv"))
            .unwrap()
            .lines()
            .count(),
        5
    );
    assert_eq!(
        code(
            &["matrix", "--config", "exp.toml", "--ood", "nameless", "--out", "mx2"],
            d
        ),
        1
    );
}

#[test]
fn unanswerable_threshold_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        &[
            "synth",
            "--domain",
            "squad2",
            "--n",
            "300",
            "--answerable-fraction",
            "0.5",
            "--out",
            "u.jsonl",
        ],
        d,
    );
    let out = ok(&["tune-unanswerable", "u.jsonl"], d);
    assert!(out.starts_with("gamma_prime "), "{out}");
    assert!(out.contains("\nEM "), "{out}");
}
