//! Score thresholds, classifications and accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::funcgen::Label;
use crate::util::sig6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub function_id: String,
    pub method: u8,
    /// Mean absolute mixed partial over the test set.
    pub score: f64,
    /// Mean signed mixed partial, kept for comparison.
    pub signed_score: f64,
    pub wall_time: f64,
    pub label: Label,
    /// Corner evaluations (methods 1-4) or derivative evaluations (5-8).
    pub evaluations: usize,
}

/// `Separable` iff `score <= threshold`.
pub fn classify(score: f64, threshold: f64) -> Label {
    if score <= threshold {
        Label::Separable
    } else {
        Label::NonSeparable
    }
}

/// The largest separable score strictly below every non-separable score, or
/// 0 when there is none. No non-separable record scores above 0 and at or
/// below the result.
pub fn optimal_threshold<'a, I>(records: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a ScoreRecord>,
{
    let mut min_neg = f64::INFINITY;
    let mut seps = Vec::new();
    let mut any_neg = false;
    for r in records {
        match r.label {
            Label::NonSeparable => {
                any_neg = true;
                min_neg = min_neg.min(r.score);
            }
            Label::Separable => seps.push(r.score),
        }
    }
    if !any_neg {
        return Err(Error::NoNegatives);
    }
    Ok(seps.into_iter().filter(|&s| s < min_neg).fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub true_positives: usize,
    pub true_negatives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.true_positives + self.true_negatives + self.false_positives + self.false_negatives
    }

    pub fn accuracy(&self) -> f64 {
        (self.true_positives + self.true_negatives) as f64 / self.total() as f64
    }
}

/// Positives are "separable" predictions.
pub fn confusion<'a, I>(records: I, threshold: f64) -> Confusion
where
    I: IntoIterator<Item = &'a ScoreRecord>,
{
    let mut c = Confusion::default();
    for r in records {
        match (classify(r.score, threshold), r.label) {
            (Label::Separable, Label::Separable) => c.true_positives += 1,
            (Label::NonSeparable, Label::NonSeparable) => c.true_negatives += 1,
            (Label::Separable, Label::NonSeparable) => c.false_positives += 1,
            (Label::NonSeparable, Label::Separable) => c.false_negatives += 1,
        }
    }
    c
}

/// `(TP + TN) / total`; NaN for an empty set.
pub fn accuracy<'a, I>(records: I, threshold: f64) -> f64
where
    I: IntoIterator<Item = &'a ScoreRecord>,
{
    confusion(records, threshold).accuracy()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: u8,
    pub threshold: f64,
    pub accuracy: f64,
    pub mean_time: f64,
    pub functions: usize,
    /// Non-zero only when a non-separable function scores exactly 0.
    pub false_positives: usize,
}

/// One summary per requested method, from that method's records.
pub fn summarise(records: &[ScoreRecord], methods: &[u8]) -> Result<Vec<MethodSummary>> {
    methods
        .iter()
        .map(|&m| {
            let rs: Vec<&ScoreRecord> = records.iter().filter(|r| r.method == m).collect();
            let threshold = optimal_threshold(rs.iter().copied())?;
            let c = confusion(rs.iter().copied(), threshold);
            let mean_time = rs.iter().map(|r| r.wall_time).sum::<f64>() / rs.len() as f64;
            Ok(MethodSummary {
                method: m,
                threshold,
                accuracy: c.accuracy(),
                mean_time,
                functions: rs.len(),
                false_positives: c.false_positives,
            })
        })
        .collect()
}

pub const SCORES_HEADER: &str = "function_id,method,score,wall_time_s,label,prediction";
pub const SUMMARY_HEADER: &str = "method,threshold,accuracy,mean_time_s";

pub fn scores_csv(records: &[ScoreRecord], summaries: &[MethodSummary]) -> String {
    let mut out = String::from(SCORES_HEADER);
    out.push('\n');
    for r in records {
        let t = summaries
            .iter()
            .find(|s| s.method == r.method)
            .map_or(f64::NAN, |s| s.threshold);
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.function_id,
            r.method,
            sig6(r.score),
            sig6(r.wall_time),
            r.label,
            classify(r.score, t)
        ));
    }
    out
}

pub fn summary_csv(summaries: &[MethodSummary]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for s in summaries {
        out.push_str(&format!(
            "{},{},{},{}\n",
            s.method,
            sig6(s.threshold),
            sig6(s.accuracy),
            sig6(s.mean_time)
        ));
    }
    out
}
