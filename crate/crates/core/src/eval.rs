//! Exact rank-based AUC, Youden threshold selection, confusion metrics and
//! the two rule-based benchmark predictors.

use std::fmt;

use serde::Serialize;

use crate::cohort::{CohortExample, CohortKind, ObservationWindow};
use crate::datamodel::{Dataset, Event};
use crate::error::{Error, Result};
use crate::phecode::{axis1_set, psych_category_set, substance_set, PhecodeMap, PhecodeSet, ResolvedPhecodes};

/// Scores paired with binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<bool>,
    n_pos: usize,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFiniteScore);
        }
        let n_pos = labels.iter().filter(|&&l| l).count();
        Ok(ScoredSet { scores, labels, n_pos })
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (f64, bool)>) -> Result<Self> {
        let (scores, labels) = pairs.into_iter().unzip();
        Self::new(scores, labels)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn n_pos(&self) -> usize {
        self.n_pos
    }

    pub fn n_neg(&self) -> usize {
        self.scores.len() - self.n_pos
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn prevalence(&self) -> f64 {
        self.n_pos as f64 / self.len().max(1) as f64
    }

    fn require_both(&self, context: &str) -> Result<()> {
        if self.n_pos == 0 || self.n_neg() == 0 {
            return Err(Error::SingleClass {
                context: context.to_string(),
                n_pos: self.n_pos,
                n_neg: self.n_neg(),
            });
        }
        Ok(())
    }
}

/// Mann–Whitney AUC with average ranks for ties, O(n log n).
pub fn auc(s: &ScoredSet) -> Result<f64> {
    s.require_both("AUC input")?;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s.scores[a].total_cmp(&s.scores[b]));
    // Sum of (1-based, tie-averaged) ranks of positives, doubled to stay integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && s.scores[order[j + 1]] == s.scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share the average (i+j+2)/2.
        let twice_avg = (i + j + 2) as u128;
        let pos_in_block = order[i..=j].iter().filter(|&&k| s.labels[k]).count() as u128;
        twice_rank_sum += twice_avg * pos_in_block;
        i = j + 1;
    }
    let (p, n) = (s.n_pos as u128, s.n_neg() as u128);
    // 2U = 2R - p(p+1)
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

impl OperatingPoint {
    pub fn youden_j(&self) -> f64 {
        self.sensitivity + self.specificity - 1.0
    }
}

/// Threshold maximizing sensitivity + specificity − 1 over the distinct
/// observed scores, predicting positive iff `score >= t`. Ties on J go to
/// the larger threshold.
pub fn youden_threshold(s: &ScoredSet) -> Result<OperatingPoint> {
    s.require_both("Youden threshold input")?;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s.scores[b].total_cmp(&s.scores[a]));
    let (p, n) = (s.n_pos as i128, s.n_neg() as i128);
    let (mut tp, mut fp) = (0i128, 0i128);
    // J * p * n = tp * n - fp * p, compared exactly.
    let mut best: Option<(i128, f64, i128, i128)> = None;
    let mut i = 0;
    while i < order.len() {
        let t = s.scores[order[i]];
        while i < order.len() && s.scores[order[i]] == t {
            if s.labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let j = tp * n - fp * p;
        // Descending sweep: a later candidate only wins with strictly larger J.
        if best.is_none_or(|(bj, ..)| j > bj) {
            best = Some((j, t, tp, fp));
        }
    }
    let (_, threshold, tp, fp) = best.expect("non-empty");
    Ok(OperatingPoint {
        threshold,
        sensitivity: tp as f64 / p as f64,
        specificity: (n - fp) as f64 / n as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Confusion {
    pub sensitivity: f64,
    pub specificity: f64,
    pub prevalence: f64,
}

pub fn confusion_at(s: &ScoredSet, t: f64) -> Result<Confusion> {
    s.require_both("confusion input")?;
    let tp = s.scores.iter().zip(&s.labels).filter(|(sc, l)| **l && **sc >= t).count();
    let tn = s.scores.iter().zip(&s.labels).filter(|(sc, l)| !**l && **sc < t).count();
    Ok(Confusion {
        sensitivity: tp as f64 / s.n_pos as f64,
        specificity: tn as f64 / s.n_neg() as f64,
        prevalence: s.prevalence(),
    })
}

/// Highest sensitivity reachable with false-positive rate at most `max_fpr`.
pub fn tpr_at_fpr(s: &ScoredSet, max_fpr: f64) -> Result<f64> {
    s.require_both("ROC input")?;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s.scores[b].total_cmp(&s.scores[a]));
    let (p, n) = (s.n_pos as f64, s.n_neg() as f64);
    let (mut tp, mut fp, mut best) = (0usize, 0usize, 0.0f64);
    let mut i = 0;
    while i < order.len() {
        let t = s.scores[order[i]];
        while i < order.len() && s.scores[order[i]] == t {
            if s.labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        if fp as f64 / n <= max_fpr + 1e-12 {
            best = best.max(tp as f64 / p);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Method {
    #[serde(rename = "MODEL")]
    Model,
    #[serde(rename = "BENCH1")]
    Bench1,
    #[serde(rename = "BENCH2")]
    Bench2,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Model => "MODEL",
            Method::Bench1 => "BENCH1",
            Method::Bench2 => "BENCH2",
        })
    }
}

/// Trigger sets for the two rule-based benchmarks.
#[derive(Debug, Clone)]
pub struct BenchmarkRules {
    bench1: PhecodeSet,
    bench2: PhecodeSet,
}

impl BenchmarkRules {
    /// With `exclude_substance`, Phecodes 316/317/318 are removed from both
    /// trigger sets (substance use case).
    pub fn new(exclude_substance: bool) -> Self {
        let (mut b1, mut b2) = (psych_category_set(), axis1_set());
        if exclude_substance {
            b1 = b1.without(&substance_set());
            b2 = b2.without(&substance_set());
        }
        BenchmarkRules { bench1: b1, bench2: b2 }
    }

    pub fn trigger_set(&self, method: Method) -> &PhecodeSet {
        match method {
            Method::Bench1 => &self.bench1,
            Method::Bench2 => &self.bench2,
            Method::Model => panic!("the model has no trigger set"),
        }
    }

    /// 1 iff any in-window diagnosis maps into the method's trigger set.
    /// `events` are one person's events in date order.
    pub fn predict_events(
        &self,
        method: Method,
        events: &[Event],
        window: &ObservationWindow,
        phe: &ResolvedPhecodes,
    ) -> u8 {
        let set = self.trigger_set(method);
        let lo = events.partition_point(|e| e.date < window.start);
        u8::from(
            events[lo..]
                .iter()
                .take_while(|e| e.date <= window.end)
                .any(|e| phe.get(e.code).is_some_and(|p| set.contains(p))),
        )
    }

    pub fn predict(&self, method: Method, ex: &CohortExample, d: &Dataset, phe: &ResolvedPhecodes) -> u8 {
        self.predict_events(method, d.person_events(ex.person), &ex.window, phe)
    }
}

/// Psychological-condition benchmark.
pub fn benchmark1(ex: &CohortExample, d: &Dataset, m: &PhecodeMap, exclude_substance: bool) -> u8 {
    BenchmarkRules::new(exclude_substance).predict(Method::Bench1, ex, d, &m.resolve(d.codes()))
}

/// Axis I benchmark.
pub fn benchmark2(ex: &CohortExample, d: &Dataset, m: &PhecodeMap, exclude_substance: bool) -> u8 {
    BenchmarkRules::new(exclude_substance).predict(Method::Bench2, ex, d, &m.resolve(d.codes()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub method: Method,
    pub dataset: String,
    pub cohort: CohortKind,
    pub auc: Option<f64>,
    pub threshold: Option<f64>,
    pub sensitivity: f64,
    pub specificity: f64,
    pub prevalence: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Model evaluation: threshold picked on `val`, metrics measured on `test`.
pub fn evaluate_model(val: &ScoredSet, test: &ScoredSet, dataset: &str, cohort: CohortKind) -> Result<EvalReport> {
    test.require_both("test split")?;
    let op = youden_threshold(val)?;
    let c = confusion_at(test, op.threshold)?;
    Ok(EvalReport {
        method: Method::Model,
        dataset: dataset.to_string(),
        cohort,
        auc: Some(auc(test)?),
        threshold: Some(op.threshold),
        sensitivity: c.sensitivity,
        specificity: c.specificity,
        prevalence: c.prevalence,
        n_pos: test.n_pos(),
        n_neg: test.n_neg(),
    })
}

/// Benchmark evaluation from binary predictions on the test split.
pub fn evaluate_binary(
    method: Method,
    predictions: &[u8],
    labels: &[bool],
    dataset: &str,
    cohort: CohortKind,
) -> Result<EvalReport> {
    let s = ScoredSet::new(predictions.iter().map(|&p| f64::from(p)).collect(), labels.to_vec())?;
    s.require_both("test split")?;
    let c = confusion_at(&s, 1.0)?;
    Ok(EvalReport {
        method,
        dataset: dataset.to_string(),
        cohort,
        auc: None,
        threshold: None,
        sensitivity: c.sensitivity,
        specificity: c.specificity,
        prevalence: c.prevalence,
        n_pos: s.n_pos(),
        n_neg: s.n_neg(),
    })
}
