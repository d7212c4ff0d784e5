//! Prediction records: the per-example model outputs every other module consumes.
//!
//! Records are stored one JSON object per line. Keys match the field names of
//! [`PredictionRecord`]; optional fields are omitted when absent.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

/// Number of top softmax probabilities carried by every record.
pub const TOP_K: usize = 5;

/// Slack allowed when checking that a probability vector sums to at most one.
pub const SUM_TOLERANCE: f64 = 1e-6;

const FIELDS: [&str; 9] = [
    "id",
    "domain",
    "passage_len",
    "prediction_len",
    "top_probs",
    "correct",
    "answerable",
    "dropout_probs",
    "dropout_mean_top_probs",
];

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("I/O error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: field `{field}`: {message}")]
    BadField {
        line: usize,
        field: String,
        message: String,
    },
    #[error("duplicate id `{id}`")]
    DuplicateId { id: String },
    #[error("record `{id}`: {rule}")]
    Invariant { id: String, rule: String },
    #[error("empty record set")]
    Empty,
    #[error("insufficient records: need {needed} from {pool}, have {available}")]
    Insufficient {
        pool: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// One QA example's model outputs plus its exact-match label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub id: String,
    pub domain: String,
    pub passage_len: u32,
    pub prediction_len: u32,
    pub top_probs: [f64; TOP_K],
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answerable: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout_probs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout_mean_top_probs: Option<[f64; TOP_K]>,
}

impl PredictionRecord {
    /// Checks every record invariant, naming the first violated rule.
    pub fn validate(&self) -> Result<(), RecordError> {
        let fail = |rule: String| {
            Err(RecordError::Invariant {
                id: self.id.clone(),
                rule,
            })
        };
        if let Err(rule) = check_top_probs("top_probs", &self.top_probs) {
            return fail(rule);
        }
        if let Some(probs) = &self.dropout_mean_top_probs {
            if let Err(rule) = check_top_probs("dropout_mean_top_probs", probs) {
                return fail(rule);
            }
        }
        if let Some(probs) = &self.dropout_probs {
            if probs.is_empty() {
                return fail("dropout_probs is empty".into());
            }
            if let Some(p) = probs.iter().find(|p| !is_probability(**p)) {
                return fail(format!("dropout_probs entry {p} outside [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn has_dropout(&self) -> bool {
        self.dropout_probs.is_some() && self.dropout_mean_top_probs.is_some()
    }
}

fn is_probability(p: f64) -> bool {
    p.is_finite() && (0.0..=1.0).contains(&p)
}

fn check_top_probs(name: &str, probs: &[f64; TOP_K]) -> Result<(), String> {
    if let Some(p) = probs.iter().find(|p| !is_probability(**p)) {
        return Err(format!("{name} entry {p} outside [0, 1]"));
    }
    if probs.windows(2).any(|w| w[0] < w[1]) {
        return Err(format!("{name} not sorted (must be non-increasing)"));
    }
    let sum: f64 = probs.iter().sum();
    if sum > 1.0 + SUM_TOLERANCE {
        return Err(format!("{name} sums to {sum} > 1"));
    }
    Ok(())
}

/// Pads an n-best probability list to exactly five entries with zeros.
pub fn pad_top_probs(probs: &[f64]) -> [f64; TOP_K] {
    let mut out = [0.0; TOP_K];
    for (slot, p) in out.iter_mut().zip(probs) {
        *slot = *p;
    }
    out
}

/// An ordered collection of records with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordSet {
    records: Vec<PredictionRecord>,
    provenance: String,
}

impl RecordSet {
    /// Builds a set, validating every record and id uniqueness.
    pub fn new(
        records: Vec<PredictionRecord>,
        provenance: impl Into<String>,
    ) -> Result<Self, RecordError> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            r.validate()?;
            if !seen.insert(r.id.as_str()) {
                return Err(RecordError::DuplicateId { id: r.id.clone() });
            }
        }
        Ok(Self {
            records,
            provenance: provenance.into(),
        })
    }

    pub fn records(&self) -> &[PredictionRecord] {
        &self.records
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, PredictionRecord> {
        self.records.iter()
    }

    pub fn into_records(self) -> Vec<PredictionRecord> {
        self.records
    }

    /// Errors with [`RecordError::Empty`] when the set has no records.
    pub fn require_non_empty(&self) -> Result<(), RecordError> {
        if self.records.is_empty() {
            Err(RecordError::Empty)
        } else {
            Ok(())
        }
    }

    /// True when every record carries both dropout fields.
    pub fn all_have_dropout(&self) -> bool {
        self.records.iter().all(PredictionRecord::has_dropout)
    }

    fn subset(&self, indices: impl IntoIterator<Item = usize>, provenance: String) -> RecordSet {
        RecordSet {
            records: indices
                .into_iter()
                .map(|i| self.records[i].clone())
                .collect(),
            provenance,
        }
    }
}

impl<'a> IntoIterator for &'a RecordSet {
    type Item = &'a PredictionRecord;
    type IntoIter = std::slice::Iter<'a, PredictionRecord>;

    fn into_iter(self) -> Self::IntoIter {
        self.records.iter()
    }
}

/// Reads a record file, validating each line.
pub fn load_records(path: impl AsRef<Path>) -> Result<RecordSet, RecordError> {
    let path = path.as_ref();
    let io_err = |source| RecordError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_record_line(&line, i + 1)?);
    }
    if records.is_empty() {
        return Err(RecordError::Empty);
    }
    RecordSet::new(records, path.display().to_string())
}

/// Parses one line of the record format. `line_no` is 1-based and only used in errors.
pub fn parse_record_line(line: &str, line_no: usize) -> Result<PredictionRecord, RecordError> {
    let value: Value = serde_json::from_str(line).map_err(|e| RecordError::Malformed {
        line: line_no,
        message: e.to_string(),
    })?;
    let Value::Object(obj) = value else {
        return Err(RecordError::Malformed {
            line: line_no,
            message: "expected a JSON object".into(),
        });
    };
    if let Some(key) = obj.keys().find(|k| !FIELDS.contains(&k.as_str())) {
        return Err(RecordError::BadField {
            line: line_no,
            field: key.clone(),
            message: "unknown field".into(),
        });
    }
    Ok(PredictionRecord {
        id: required(&obj, "id", line_no)?,
        domain: required(&obj, "domain", line_no)?,
        passage_len: required(&obj, "passage_len", line_no)?,
        prediction_len: required(&obj, "prediction_len", line_no)?,
        top_probs: required(&obj, "top_probs", line_no)?,
        correct: required(&obj, "correct", line_no)?,
        answerable: optional(&obj, "answerable", line_no)?,
        dropout_probs: optional(&obj, "dropout_probs", line_no)?,
        dropout_mean_top_probs: optional(&obj, "dropout_mean_top_probs", line_no)?,
    })
}

fn required<T: DeserializeOwned>(
    obj: &Map<String, Value>,
    field: &str,
    line: usize,
) -> Result<T, RecordError> {
    match obj.get(field) {
        Some(v) => decode(v, field, line),
        None => Err(RecordError::BadField {
            line,
            field: field.into(),
            message: "missing".into(),
        }),
    }
}

fn optional<T: DeserializeOwned>(
    obj: &Map<String, Value>,
    field: &str,
    line: usize,
) -> Result<Option<T>, RecordError> {
    match obj.get(field) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => decode(v, field, line).map(Some),
    }
}

fn decode<T: DeserializeOwned>(v: &Value, field: &str, line: usize) -> Result<T, RecordError> {
    T::deserialize(v).map_err(|e| RecordError::BadField {
        line,
        field: field.into(),
        message: e.to_string(),
    })
}

/// Writes a set in the line-per-record format. Floats use shortest round-trip
/// formatting, so loading the file back reproduces every value exactly.
pub fn save_records(set: &RecordSet, path: impl AsRef<Path>) -> Result<(), RecordError> {
    let path = path.as_ref();
    let io_err = |source| RecordError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for r in set {
        let line = serde_json::to_string(r).expect("records always serialize");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// `round(fraction * n)` with halves rounded up.
pub fn round_half_up(fraction: f64, n: usize) -> usize {
    (fraction * n as f64 + 0.5).floor() as usize
}

/// Draws a test mixture of `n` records: `round(alpha * n)` from `source`, the
/// rest from `ood`, both without replacement, returned in a seeded shuffle.
///
/// `alpha` may be 0 or 1, giving a pure pool.
pub fn sample_mixture(
    source: &RecordSet,
    ood: &RecordSet,
    alpha: f64,
    n: usize,
    seed: u64,
) -> Result<RecordSet, RecordError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(RecordError::InvalidArgument(format!(
            "alpha {alpha} outside [0, 1]"
        )));
    }
    if n == 0 {
        return Err(RecordError::InvalidArgument(
            "mixture size must be positive".into(),
        ));
    }
    let n_source = round_half_up(alpha, n).min(n);
    let n_ood = n - n_source;
    for (pool, set, needed) in [("source", source, n_source), ("ood", ood, n_ood)] {
        if set.len() < needed {
            return Err(RecordError::Insufficient {
                pool,
                needed,
                available: set.len(),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut drawn: Vec<&PredictionRecord> = Vec::with_capacity(n);
    drawn.extend(
        index::sample(&mut rng, source.len(), n_source)
            .into_iter()
            .map(|i| &source.records[i]),
    );
    drawn.extend(
        index::sample(&mut rng, ood.len(), n_ood)
            .into_iter()
            .map(|i| &ood.records[i]),
    );
    drawn.shuffle(&mut rng);
    RecordSet::new(
        drawn.into_iter().cloned().collect(),
        format!(
            "mixture(alpha={alpha}, n={n}, seed={seed}; {} + {})",
            source.provenance, ood.provenance
        ),
    )
}

/// Seeded partition into a first part of `round(fraction * |set|)` records and the rest.
pub fn split(
    set: &RecordSet,
    fraction: f64,
    seed: u64,
) -> Result<(RecordSet, RecordSet), RecordError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(RecordError::InvalidArgument(format!(
            "split fraction {fraction} outside (0, 1)"
        )));
    }
    set.require_non_empty()?;
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = round_half_up(fraction, set.len());
    let first = set.subset(
        order[..cut].iter().copied(),
        format!("{}[split {seed} a]", set.provenance),
    );
    let second = set.subset(
        order[cut..].iter().copied(),
        format!("{}[split {seed} b]", set.provenance),
    );
    Ok((first, second))
}

/// Seeded sample of `n` records without replacement.
pub fn sample(set: &RecordSet, n: usize, seed: u64) -> Result<RecordSet, RecordError> {
    if set.len() < n {
        return Err(RecordError::Insufficient {
            pool: "sample",
            needed: n,
            available: set.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = index::sample(&mut rng, set.len(), n);
    Ok(set.subset(idx, format!("{}[sample {n} seed {seed}]", set.provenance)))
}

/// Concatenates sets, re-checking id uniqueness across them.
pub fn concat(
    sets: &[&RecordSet],
    provenance: impl Into<String>,
) -> Result<RecordSet, RecordError> {
    let records = sets
        .iter()
        .flat_map(|s| s.records.iter().cloned())
        .collect();
    RecordSet::new(records, provenance)
}
