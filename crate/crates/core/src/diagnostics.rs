//! Representation-overlap statistics and retrieval-outcome classification.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{MetricReport, QueryOutcome};

pub const DEFAULT_THRESHOLD: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub batch_size: usize,
    pub threshold: f64,
    /// Percentage of vectors that take part in at least one pair above the
    /// threshold.
    pub high_sim_percent: f64,
    /// Number of unordered pairs above the threshold.
    pub pair_count: usize,
}

impl OverlapReport {
    pub const CSV_HEADER: &'static str = "batch_size,threshold,high_sim_percent,pair_count";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.4},{}",
            self.batch_size, self.threshold, self.high_sim_percent, self.pair_count
        )
    }
}

/// Counts vectors involved in a pair with cosine similarity strictly above
/// `threshold`.
pub fn high_sim_stats(vectors: &[Vec<f64>], threshold: f64) -> Result<OverlapReport> {
    if vectors.len() < 2 {
        return Err(Error::TooShort {
            len: vectors.len(),
            min: 2,
        });
    }
    let unit: Vec<Vec<f64>> = vectors
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                Err(Error::ZeroNorm(i))
            } else {
                Ok(v.iter().map(|x| x / norm).collect())
            }
        })
        .collect::<Result<_>>()?;
    let mut involved = vec![false; unit.len()];
    let mut pair_count = 0;
    for i in 0..unit.len() {
        for j in i + 1..unit.len() {
            let cos: f64 = unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum();
            if cos > threshold {
                pair_count += 1;
                involved[i] = true;
                involved[j] = true;
            }
        }
    }
    let n_involved = involved.iter().filter(|&&b| b).count();
    Ok(OverlapReport {
        batch_size: unit.len(),
        threshold,
        high_sim_percent: 100.0 * n_involved as f64 / unit.len() as f64,
        pair_count,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Correct,
    Wrong,
    None,
    FalsePositive,
}

impl OutcomeKind {
    pub fn name(self) -> &'static str {
        match self {
            OutcomeKind::Correct => "correct",
            OutcomeKind::Wrong => "wrong",
            OutcomeKind::None => "none",
            OutcomeKind::FalsePositive => "false_positive",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryMetric {
    Eff,
    Gen,
    Loc,
}

impl QueryMetric {
    pub const ALL: [QueryMetric; 3] = [QueryMetric::Eff, QueryMetric::Gen, QueryMetric::Loc];

    pub fn name(self) -> &'static str {
        match self {
            QueryMetric::Eff => "eff",
            QueryMetric::Gen => "gen",
            QueryMetric::Loc => "loc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalOutcome {
    pub index: usize,
    pub metric: QueryMetric,
    pub kind: OutcomeKind,
    /// Best score among entries and prototype, relative to the prototype.
    pub ratio: f64,
    /// Score of the record's own entry relative to the prototype.
    pub gt_ratio: Option<f64>,
}

/// `s / p` for a positive prototype score, extended so that the result is
/// above 1 exactly when `s > p` whatever the sign of `p`.
pub fn relative_score(s: f64, p: f64) -> f64 {
    1.0 + (s - p) / p.abs().max(1e-12)
}

/// Classifies every stored query by its gate decision. Entries win only when
/// strictly above the prototype.
pub fn classify_outcome(index: usize, metric: QueryMetric, entry_id: usize, q: &QueryOutcome) -> RetrievalOutcome {
    let p = q.prototype_score;
    let selected = match (q.top1, q.top1_score) {
        (Some(id), Some(s)) if s > p => Some((id, s)),
        _ => None,
    };
    let ratio = selected.map_or(1.0, |(_, s)| relative_score(s, p));
    let kind = match (metric, selected) {
        (QueryMetric::Loc, Some(_)) => OutcomeKind::FalsePositive,
        (_, None) => OutcomeKind::None,
        (_, Some((id, _))) if id == entry_id => OutcomeKind::Correct,
        (_, Some(_)) => OutcomeKind::Wrong,
    };
    RetrievalOutcome {
        index,
        metric,
        kind,
        ratio,
        gt_ratio: q.gt_score.map(|s| relative_score(s, p)),
    }
}

pub fn classify_retrievals(report: &MetricReport) -> Vec<RetrievalOutcome> {
    let mut out = Vec::with_capacity(report.outcomes.len() * 3);
    for metric in QueryMetric::ALL {
        for o in &report.outcomes {
            let q = match metric {
                QueryMetric::Eff => &o.eff,
                QueryMetric::Gen => &o.gen,
                QueryMetric::Loc => &o.loc,
            };
            out.push(classify_outcome(o.index, metric, o.entry_id, q));
        }
    }
    out
}

/// Per-metric counts of each kind.
pub fn outcome_counts(outcomes: &[RetrievalOutcome]) -> BTreeMap<(QueryMetric, OutcomeKind), usize> {
    let mut counts = BTreeMap::new();
    for o in outcomes {
        *counts.entry((o.metric, o.kind)).or_default() += 1;
    }
    counts
}

/// Percentage of a metric's queries classified as `kind`.
pub fn kind_rate(outcomes: &[RetrievalOutcome], metric: QueryMetric, kind: OutcomeKind) -> f64 {
    let total = outcomes.iter().filter(|o| o.metric == metric).count();
    if total == 0 {
        return 0.0;
    }
    let k = outcomes.iter().filter(|o| o.metric == metric && o.kind == kind).count();
    100.0 * k as f64 / total as f64
}

pub const OUTCOME_CSV_HEADER: &str = "metric,kind,ratio,gt_ratio,index";

pub fn outcomes_to_csv(outcomes: &[RetrievalOutcome]) -> String {
    let mut s = String::from(OUTCOME_CSV_HEADER);
    s.push('\n');
    for o in outcomes {
        let gt = o.gt_ratio.map(|g| format!("{g:.6}")).unwrap_or_default();
        let _ = writeln!(s, "{},{},{:.6},{},{}", o.metric.name(), o.kind.name(), o.ratio, gt, o.index);
    }
    s
}

pub fn overlaps_to_csv(reports: &[OverlapReport]) -> String {
    let mut s = String::from(OverlapReport::CSV_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}
