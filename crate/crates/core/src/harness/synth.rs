//! Seeded synthetic record generator.
//!
//! Each record has a latent probability of correctness `q ~ Beta(a, b)` and is
//! correct with probability `q`. The model's reported confidence is
//! `1 - (1 - q)^f`: `f = 1` is perfectly calibrated and `f > 1` inflates
//! confidence, which is how out-of-domain overconfidence is modelled. Passage
//! lengths come from a per-domain range, so a calibrator can tell domains apart.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::records::{PredictionRecord, RecordError, RecordSet, TOP_K};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub domain: String,
    pub n: usize,
    /// Ids are `{id_prefix}-{index}`; defaults to the domain name.
    #[serde(default)]
    pub id_prefix: Option<String>,
    pub skill_alpha: f64,
    pub skill_beta: f64,
    /// Confidence exponent `f`; 1 is calibrated, above 1 is overconfident.
    pub overconfidence: f64,
    /// Inclusive range of passage lengths.
    pub passage_len: (u32, u32),
    /// Number of dropout masks to simulate; `None` omits dropout fields.
    #[serde(default)]
    pub dropout_masks: Option<usize>,
    /// Spread of per-mask probabilities around the confidence.
    #[serde(default = "default_dropout_noise")]
    pub dropout_noise: f64,
    /// Fraction of answerable questions; `None` omits the answerable flag.
    #[serde(default)]
    pub answerable_fraction: Option<f64>,
}

fn default_dropout_noise() -> f64 {
    0.1
}

impl SyntheticSpec {
    /// Calibrated in-domain records with short passages.
    pub fn in_domain(domain: &str, n: usize) -> Self {
        Self {
            domain: domain.to_string(),
            n,
            id_prefix: None,
            skill_alpha: 2.0,
            skill_beta: 1.5,
            overconfidence: 1.0,
            passage_len: (50, 150),
            dropout_masks: None,
            dropout_noise: default_dropout_noise(),
            answerable_fraction: None,
        }
    }

    /// Harder, overconfident records with longer passages.
    pub fn shifted(domain: &str, n: usize, overconfidence: f64) -> Self {
        Self {
            skill_alpha: 1.5,
            skill_beta: 2.0,
            overconfidence,
            passage_len: (150, 400),
            ..Self::in_domain(domain, n)
        }
    }

    pub fn with_prefix(mut self, prefix: &str) -> Self {
        self.id_prefix = Some(prefix.to_string());
        self
    }

    pub fn validate(&self) -> Result<(), RecordError> {
        let bad = |m: String| Err(RecordError::InvalidArgument(m));
        if self.n == 0 {
            return bad("synthetic spec needs n >= 1".into());
        }
        if !(self.skill_alpha > 0.0 && self.skill_beta > 0.0) {
            return bad("skill parameters must be positive".into());
        }
        if !(self.overconfidence > 0.0 && self.overconfidence.is_finite()) {
            return bad("overconfidence must be positive".into());
        }
        if self.passage_len.0 > self.passage_len.1 {
            return bad("passage_len range is empty".into());
        }
        if self.dropout_masks == Some(0) {
            return bad("dropout_masks must be at least 1".into());
        }
        if !(self.dropout_noise >= 0.0 && self.dropout_noise.is_finite()) {
            return bad("dropout_noise must be non-negative".into());
        }
        if let Some(p) = self.answerable_fraction {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("answerable_fraction {p} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Inflated confidence `1 - (1 - q)^f`.
pub fn overconfident(q: f64, f: f64) -> f64 {
    1.0 - (1.0 - q).powf(f)
}

pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<RecordSet, RecordError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let skill = Beta::new(spec.skill_alpha, spec.skill_beta)
        .map_err(|e| RecordError::InvalidArgument(format!("skill distribution: {e}")))?;
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let prefix = spec.id_prefix.as_deref().unwrap_or(&spec.domain);
    let mut records = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let answerable = spec.answerable_fraction.map(|p| rng.random_bool(p));
        let mut q: f64 = skill.sample(&mut rng);
        if answerable == Some(false) {
            // the model still answers, less confidently, and cannot be right
            q *= 0.5;
        }
        let conf = overconfident(q, spec.overconfidence).clamp(0.0, 1.0);
        let correct = answerable != Some(false) && rng.random_bool(q.clamp(0.0, 1.0));
        let top_probs = tail_probs(conf, &mut rng);
        let (dropout_probs, dropout_mean_top_probs) = match spec.dropout_masks {
            None => (None, None),
            Some(k) => {
                let sd = spec.dropout_noise * (conf * (1.0 - conf)).sqrt();
                let probs: Vec<f64> = (0..k)
                    .map(|_| (conf + sd * noise.sample(&mut rng)).clamp(0.0, 1.0))
                    .collect();
                let mean = probs.iter().sum::<f64>() / k as f64;
                (Some(probs), Some(rescale_tail(&top_probs, mean)))
            }
        };
        records.push(PredictionRecord {
            id: format!("{prefix}-{i}"),
            domain: spec.domain.clone(),
            passage_len: rng.random_range(spec.passage_len.0..=spec.passage_len.1),
            prediction_len: rng.random_range(1..=6),
            top_probs,
            correct,
            answerable,
            dropout_probs,
            dropout_mean_top_probs,
        });
    }
    RecordSet::new(
        records,
        format!(
            "synthetic(domain={}, n={}, seed={seed})",
            spec.domain, spec.n
        ),
    )
}

/// Top-5 vector headed by `conf`, with the other four non-increasing, no larger
/// than `conf`, and sharing part of the remaining mass.
fn tail_probs(conf: f64, rng: &mut impl Rng) -> [f64; TOP_K] {
    let mut w: [f64; TOP_K - 1] = std::array::from_fn(|_| rng.random::<f64>());
    w.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = w.iter().sum();
    let mass = (1.0 - conf) * rng.random_range(0.5..1.0);
    let mut out = [0.0; TOP_K];
    out[0] = conf;
    for (j, wj) in w.iter().enumerate() {
        let v = if total > 0.0 { mass * wj / total } else { 0.0 };
        out[j + 1] = v.min(out[j]);
    }
    out
}

/// Mean-ensemble top-5: `mean` first, the tail of `top` scaled to fit.
fn rescale_tail(top: &[f64; TOP_K], mean: f64) -> [f64; TOP_K] {
    let tail: f64 = top[1..].iter().sum();
    let scale = if tail > 0.0 {
        ((1.0 - mean) / tail).min(1.0)
    } else {
        0.0
    };
    let mut out = [0.0; TOP_K];
    out[0] = mean;
    for j in 1..TOP_K {
        out[j] = (top[j] * scale).min(out[j - 1]);
    }
    out
}
