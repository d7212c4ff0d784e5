//! Selective-prediction metrics.
//!
//! Records are ranked by confidence, highest first; equal confidences are
//! ordered by record id (ascending, then by domain). The risk-coverage curve has
//! one point per prefix of that ranking, so coverage runs over `1/n, 2/n, ..., 1`
//! and the curve is never evaluated at coverage 0. AUC is the mean of the `n`
//! prefix risks, i.e. a right Riemann sum on the uniform coverage grid.
//!
//! All values are fractions in `[0, 1]`; percentages only appear in CLI output.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confidence::ScoredRecord;
use crate::records::PredictionRecord;

/// Slack for comparing a prefix accuracy against a requested accuracy level.
pub const ACCURACY_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot evaluate an empty scored set")]
    Empty,
    #[error("record `{id}`: confidence {value} outside [0, 1]")]
    ConfidenceOutOfRange { id: String, value: f64 },
    #[error("record `{id}`: missing answerable flag")]
    MissingAnswerable { id: String },
    #[error("per-domain breakdown needs at least two domains, found {0}")]
    TooFewDomains(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskCoveragePoint {
    pub coverage: f64,
    pub risk: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskCoverageCurve {
    pub points: Vec<RiskCoveragePoint>,
    pub total: usize,
}

impl RiskCoverageCurve {
    /// Risk at full coverage, i.e. the overall error rate.
    pub fn final_risk(&self) -> f64 {
        self.points.last().map_or(0.0, |p| p.risk)
    }
}

fn rank_cmp(a: &ScoredRecord<'_>, b: &ScoredRecord<'_>) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then_with(|| a.record.id.cmp(&b.record.id))
        .then_with(|| a.record.domain.cmp(&b.record.domain))
}

/// Scored records in answering order: most confident first, ties by id.
pub fn rank<'s, 'a>(scored: &'s [ScoredRecord<'a>]) -> Vec<&'s ScoredRecord<'a>> {
    let mut order: Vec<&ScoredRecord<'a>> = scored.iter().collect();
    order.sort_by(|a, b| rank_cmp(a, b));
    order
}

pub fn risk_coverage_curve(scored: &[ScoredRecord<'_>]) -> Result<RiskCoverageCurve, EvalError> {
    if scored.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = scored.len();
    let mut wrong = 0usize;
    let points = rank(scored)
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let k = i + 1;
            wrong += usize::from(!s.record.correct);
            RiskCoveragePoint {
                coverage: k as f64 / n as f64,
                risk: wrong as f64 / k as f64,
                threshold: s.confidence,
            }
        })
        .collect();
    Ok(RiskCoverageCurve { points, total: n })
}

/// Mean of the prefix risks.
pub fn auc(curve: &RiskCoverageCurve) -> f64 {
    if curve.points.is_empty() {
        return 0.0;
    }
    curve.points.iter().map(|p| p.risk).sum::<f64>() / curve.points.len() as f64
}

/// Largest prefix coverage whose accuracy is at least `acc_level`; 0 when none qualifies.
pub fn coverage_at_accuracy(scored: &[ScoredRecord<'_>], acc_level: f64) -> Result<f64, EvalError> {
    Ok(prefix_at_accuracy(scored, acc_level)?.1)
}

/// (prefix length, coverage) of the largest qualifying prefix.
fn prefix_at_accuracy(
    scored: &[ScoredRecord<'_>],
    acc_level: f64,
) -> Result<(usize, f64), EvalError> {
    check_acc_level(acc_level)?;
    if scored.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = scored.len();
    let mut correct = 0usize;
    let mut best = 0usize;
    for (i, s) in rank(scored).into_iter().enumerate() {
        correct += usize::from(s.record.correct);
        let k = i + 1;
        if correct as f64 / k as f64 + ACCURACY_TOLERANCE >= acc_level {
            best = k;
        }
    }
    Ok((best, best as f64 / n as f64))
}

fn check_acc_level(acc_level: f64) -> Result<(), EvalError> {
    if acc_level > 0.0 && acc_level <= 1.0 {
        Ok(())
    } else {
        Err(EvalError::InvalidArgument(format!(
            "accuracy level {acc_level} outside (0, 1]"
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageAtAccuracy {
    pub accuracy: f64,
    pub coverage: f64,
}

/// AUC plus coverage at each requested accuracy level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectiveMetrics {
    pub auc: f64,
    pub cov_at_acc: Vec<CoverageAtAccuracy>,
}

pub fn selective_metrics(
    scored: &[ScoredRecord<'_>],
    acc_levels: &[f64],
) -> Result<SelectiveMetrics, EvalError> {
    let curve = risk_coverage_curve(scored)?;
    let cov_at_acc = acc_levels
        .iter()
        .map(|&a| {
            Ok(CoverageAtAccuracy {
                accuracy: a,
                coverage: coverage_at_accuracy(scored, a)?,
            })
        })
        .collect::<Result<_, EvalError>>()?;
    Ok(SelectiveMetrics {
        auc: auc(&curve),
        cov_at_acc,
    })
}

/// Oracle ranking that answers every correct record before any incorrect one.
pub fn best_possible_scores(records: &[PredictionRecord]) -> Vec<ScoredRecord<'_>> {
    records
        .iter()
        .map(|r| ScoredRecord::new(r, if r.correct { 1.0 } else { 0.0 }))
        .collect()
}

pub fn best_possible_curve(records: &[PredictionRecord]) -> Result<RiskCoverageCurve, EvalError> {
    risk_coverage_curve(&best_possible_scores(records))
}

/// One equal-width confidence bin. Statistics are `None` for empty bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_confidence: Option<f64>,
    pub accuracy: Option<f64>,
}

pub const DEFAULT_BINS: usize = 10;

/// Equal-width bins over `[0, 1]`; each bin is `[lo, hi)` except the last, which includes 1.
pub fn reliability_diagram(
    scored: &[ScoredRecord<'_>],
    n_bins: usize,
) -> Result<Vec<ReliabilityBin>, EvalError> {
    if n_bins == 0 {
        return Err(EvalError::InvalidArgument("need at least one bin".into()));
    }
    if scored.is_empty() {
        return Err(EvalError::Empty);
    }
    let edge = |i: usize| i as f64 / n_bins as f64;
    let mut sums = vec![(0usize, 0.0f64, 0usize); n_bins];
    for s in scored {
        let c = s.confidence;
        if !(0.0..=1.0).contains(&c) {
            return Err(EvalError::ConfidenceOutOfRange {
                id: s.record.id.clone(),
                value: c,
            });
        }
        let mut b = ((c * n_bins as f64).floor() as usize).min(n_bins - 1);
        // undo rounding in c * n_bins so membership agrees with the edges
        if b + 1 < n_bins && c >= edge(b + 1) {
            b += 1;
        } else if b > 0 && c < edge(b) {
            b -= 1;
        }
        let slot = &mut sums[b];
        slot.0 += 1;
        slot.1 += c;
        slot.2 += usize::from(s.record.correct);
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .map(|(i, (count, conf_sum, correct))| ReliabilityBin {
            lo: edge(i),
            hi: edge(i + 1),
            count,
            mean_confidence: (count > 0).then(|| conf_sum / count as f64),
            accuracy: (count > 0).then(|| correct as f64 / count as f64),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainStats {
    pub answered: usize,
    /// Fraction of the answered prefix coming from this domain.
    pub share: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainBreakdown {
    pub acc_level: f64,
    pub coverage: f64,
    pub answered: usize,
    pub domains: BTreeMap<String, DomainStats>,
}

/// Per-domain share and accuracy inside the largest prefix meeting `acc_level`.
/// Domains with no answered records are omitted.
pub fn per_domain_breakdown(
    scored: &[ScoredRecord<'_>],
    acc_level: f64,
) -> Result<DomainBreakdown, EvalError> {
    let n_domains = scored
        .iter()
        .map(|s| s.record.domain.as_str())
        .collect::<BTreeSet<_>>()
        .len();
    if n_domains < 2 {
        return Err(EvalError::TooFewDomains(n_domains));
    }
    let (answered, coverage) = prefix_at_accuracy(scored, acc_level)?;
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for s in rank(scored).into_iter().take(answered) {
        let e = counts.entry(s.record.domain.clone()).or_default();
        e.0 += 1;
        e.1 += usize::from(s.record.correct);
    }
    let domains = counts
        .into_iter()
        .map(|(d, (k, c))| {
            (
                d,
                DomainStats {
                    answered: k,
                    share: k as f64 / answered as f64,
                    accuracy: c as f64 / k as f64,
                },
            )
        })
        .collect();
    Ok(DomainBreakdown {
        acc_level,
        coverage,
        answered,
        domains,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnanswerableThreshold {
    /// Records with confidence below this are predicted unanswerable. May be ±∞.
    pub gamma_prime: f64,
    pub em_score: f64,
}

/// Picks the abstention threshold maximising mean EM when abstaining counts as
/// predicting "unanswerable". Candidates are −∞, the midpoints between
/// consecutive distinct confidences, and +∞; ties go to the lowest threshold.
pub fn tune_unanswerable_threshold(
    scored: &[ScoredRecord<'_>],
) -> Result<UnanswerableThreshold, EvalError> {
    if scored.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut rows: Vec<(f64, bool, bool)> = scored
        .iter()
        .map(|s| {
            s.record
                .answerable
                .map(|a| (s.confidence, a, s.record.correct))
                .ok_or_else(|| EvalError::MissingAnswerable {
                    id: s.record.id.clone(),
                })
        })
        .collect::<Result<_, _>>()?;
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = rows.len();
    // Abstaining on everything: every unanswerable record scores.
    let unanswerable = rows.iter().filter(|r| !r.1).count();
    // answer everything (gamma = -inf)
    let mut score = rows.iter().filter(|r| r.1 && r.2).count();
    let mut best = (f64::NEG_INFINITY, score);
    let mut i = 0;
    while i < n {
        // move the whole tied group at rows[i].0 to the abstained side
        let c = rows[i].0;
        while i < n && rows[i].0 == c {
            let (_, answerable, correct) = rows[i];
            if answerable {
                score -= usize::from(correct);
            } else {
                score += 1;
            }
            i += 1;
        }
        let gamma = if i < n {
            c + (rows[i].0 - c) / 2.0
        } else {
            f64::INFINITY
        };
        if score > best.1 {
            best = (gamma, score);
        }
    }
    debug_assert_eq!(score, unanswerable);
    Ok(UnanswerableThreshold {
        gamma_prime: best.0,
        em_score: best.1 as f64 / n as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::with_conf;

    fn recs(confs: &[f64], correct: &[bool]) -> Vec<PredictionRecord> {
        confs
            .iter()
            .zip(correct)
            .enumerate()
            .map(|(i, (&c, &ok))| with_conf(&format!("r{i}"), c, ok))
            .collect()
    }

    fn maxprob(records: &[PredictionRecord]) -> Vec<ScoredRecord<'_>> {
        records
            .iter()
            .map(|r| ScoredRecord::new(r, r.top_probs[0]))
            .collect()
    }

    #[test]
    fn worked_curve() {
        let r = recs(&[0.9, 0.8, 0.7, 0.6], &[true, true, false, true]);
        let s = maxprob(&r);
        let curve = risk_coverage_curve(&s).unwrap();
        let risks: Vec<f64> = curve.points.iter().map(|p| p.risk).collect();
        let covs: Vec<f64> = curve.points.iter().map(|p| p.coverage).collect();
        assert_eq!(risks, [0.0, 0.0, 1.0 / 3.0, 0.25]);
        assert_eq!(covs, [0.25, 0.5, 0.75, 1.0]);
        assert_eq!(curve.points[2].threshold, 0.7);
        // (0 + 0 + 1/3 + 1/4) / 4 = 7/48
        assert!((auc(&curve) - 7.0 / 48.0).abs() < 1e-15);
        assert_eq!(coverage_at_accuracy(&s, 0.8).unwrap(), 0.5);
    }

    #[test]
    fn extremes() {
        let good = recs(&[0.1, 0.5, 0.9], &[true; 3]);
        let s = maxprob(&good);
        let c = risk_coverage_curve(&s).unwrap();
        assert!(c.points.iter().all(|p| p.risk == 0.0));
        assert_eq!(auc(&c), 0.0);
        assert_eq!(coverage_at_accuracy(&s, 0.9).unwrap(), 1.0);

        let bad = recs(&[0.1, 0.5, 0.9], &[false; 3]);
        let s = maxprob(&bad);
        let c = risk_coverage_curve(&s).unwrap();
        assert!(c.points.iter().all(|p| p.risk == 1.0));
        assert_eq!(auc(&c), 1.0);
        assert_eq!(coverage_at_accuracy(&s, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn empty_and_bad_args() {
        assert!(matches!(risk_coverage_curve(&[]), Err(EvalError::Empty)));
        let r = recs(&[0.5], &[true]);
        assert!(coverage_at_accuracy(&maxprob(&r), 0.0).is_err());
        assert!(coverage_at_accuracy(&maxprob(&r), 1.2).is_err());
    }

    #[test]
    fn ties_broken_by_id() {
        let r = recs(&[0.5, 0.5], &[false, true]);
        let c = risk_coverage_curve(&maxprob(&r)).unwrap();
        // r0 (wrong) ranks before r1
        assert_eq!(c.points[0].risk, 1.0);
        assert_eq!(c.points[1].risk, 0.5);
    }

    #[test]
    fn best_possible() {
        let r = recs(&[0.1, 0.2, 0.3, 0.4], &[true, false, true, true]);
        let c = best_possible_curve(&r).unwrap();
        let risks: Vec<f64> = c.points.iter().map(|p| p.risk).collect();
        assert_eq!(risks, [0.0, 0.0, 0.0, 0.25]);
        assert_eq!(auc(&c), 0.0625);
        let all = recs(&[0.1, 0.2], &[true, true]);
        assert_eq!(auc(&best_possible_curve(&all).unwrap()), 0.0);
    }

    #[test]
    fn best_possible_closed_form() {
        // accuracy a: the oracle curve is max(0, (c - a) / c) at each coverage c
        let n = 1000;
        let correct: Vec<bool> = (0..n).map(|i| i % 10 < 7).collect();
        let r = recs(&vec![0.5; n], &correct);
        let c = best_possible_curve(&r).unwrap();
        for p in &c.points {
            let expected = ((p.coverage - 0.7) / p.coverage).max(0.0);
            assert!((p.risk - expected).abs() <= 1.0 / n as f64, "{p:?}");
        }
    }

    #[test]
    fn reliability_worked_example() {
        let r = recs(&[0.55, 0.52], &[true, false]);
        let bins = reliability_diagram(&maxprob(&r), 10).unwrap();
        assert_eq!(bins.len(), 10);
        let b = &bins[5];
        assert_eq!((b.lo, b.hi, b.count), (0.5, 0.6, 2));
        assert_eq!(b.accuracy, Some(0.5));
        assert!((b.mean_confidence.unwrap() - 0.535).abs() < 1e-12);
        assert!(bins
            .iter()
            .enumerate()
            .all(|(i, b)| i == 5 || (b.count == 0 && b.accuracy.is_none())));
    }

    #[test]
    fn reliability_edges() {
        let r = recs(&[1.0, 0.0, 0.29, 0.3, 0.7], &[true; 5]);
        let bins = reliability_diagram(&maxprob(&r), 10).unwrap();
        assert_eq!(bins[9].count, 1);
        assert_eq!(bins[0].count, 1);
        assert_eq!(bins[2].count, 1);
        assert_eq!(bins[3].count, 1);
        assert_eq!(bins[7].count, 1);
        let r = recs(&[0.29], &[true]);
        let bins = reliability_diagram(&maxprob(&r), 100).unwrap();
        assert_eq!(bins[29].count, 1);
        let single = recs(&[0.42], &[true]);
        let bins = reliability_diagram(&maxprob(&single), 10).unwrap();
        assert_eq!(bins.iter().filter(|b| b.count > 0).count(), 1);
    }

    #[test]
    fn reliability_rejects_out_of_range() {
        let r = recs(&[0.5], &[true]);
        let s = [ScoredRecord::new(&r[0], -0.01)];
        assert!(matches!(
            reliability_diagram(&s, 10),
            Err(EvalError::ConfidenceOutOfRange { .. })
        ));
    }

    #[test]
    fn per_domain_worked() {
        let mut r = recs(
            &[0.9, 0.8, 0.7, 0.6, 0.1],
            &[true, true, true, false, false],
        );
        r[2].domain = "ood".into();
        r[3].domain = "ood".into();
        r[4].domain = "ood".into();
        let s = maxprob(&r);
        // prefix accuracies 1, 1, 1, 3/4, 3/5: largest prefix at 0.75 is 4
        let b = per_domain_breakdown(&s, 0.75).unwrap();
        assert_eq!(b.answered, 4);
        assert_eq!(b.domains["squad"].share, 0.5);
        assert_eq!(b.domains["ood"].share, 0.5);
        assert_eq!(b.domains["squad"].accuracy, 1.0);
        assert_eq!(b.domains["ood"].accuracy, 0.5);
        let shares: f64 = b.domains.values().map(|d| d.share).sum();
        assert!((shares - 1.0).abs() < 1e-12);

        let b = per_domain_breakdown(&s, 1.0).unwrap();
        assert_eq!(b.answered, 3);
        let b2 = per_domain_breakdown(
            &maxprob(
                &r[..2]
                    .iter()
                    .cloned()
                    .chain([r[4].clone()])
                    .collect::<Vec<_>>(),
            ),
            1.0,
        )
        .unwrap();
        assert_eq!(b2.domains.len(), 1);
        assert_eq!(b2.domains["squad"].share, 1.0);

        let one = recs(&[0.5, 0.4], &[true, false]);
        assert!(matches!(
            per_domain_breakdown(&maxprob(&one), 0.8),
            Err(EvalError::TooFewDomains(1))
        ));
    }

    #[test]
    fn unanswerable_threshold() {
        let mut r = recs(&[0.9, 0.2], &[true, false]);
        r[0].answerable = Some(true);
        r[1].answerable = Some(false);
        let t = tune_unanswerable_threshold(&maxprob(&r)).unwrap();
        assert_eq!(t.em_score, 1.0);
        assert!(t.gamma_prime > 0.2 && t.gamma_prime <= 0.9);
        assert_eq!(t.gamma_prime, 0.55);

        let mut all = recs(&[0.9, 0.2, 0.4], &[false; 3]);
        for x in &mut all {
            x.answerable = Some(false);
        }
        let t = tune_unanswerable_threshold(&maxprob(&all)).unwrap();
        assert_eq!(t.gamma_prime, f64::INFINITY);
        assert_eq!(t.em_score, 1.0);

        let mut answer_all = recs(&[0.9, 0.2], &[true, true]);
        for x in &mut answer_all {
            x.answerable = Some(true);
        }
        let t = tune_unanswerable_threshold(&maxprob(&answer_all)).unwrap();
        assert_eq!(t.gamma_prime, f64::NEG_INFINITY);

        let missing = recs(&[0.5], &[true]);
        assert!(matches!(
            tune_unanswerable_threshold(&maxprob(&missing)),
            Err(EvalError::MissingAnswerable { .. })
        ));
    }
}
