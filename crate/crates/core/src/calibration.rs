//! Cosine threshold calibration.
//!
//! Candidates are the midpoints between consecutive distinct similarities
//! plus one point just below the minimum and one just above the maximum, so
//! every distinct split of the sorted scores is represented exactly once.
//! A pair is predicted positive iff `similarity >= threshold`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Offset of the two outer candidates from the extreme scores.
pub const EDGE_DELTA: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    BestAccuracy,
    BestPrecision,
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Policy::BestAccuracy => "best_accuracy",
            Policy::BestPrecision => "best_precision",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub accuracy: f64,
    pub precision: f64,
    pub candidates: usize,
}

/// A per-task similarity cutoff and how it was chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdFilter {
    pub task: String,
    pub threshold: f64,
    pub policy: Policy,
    pub stats: CalibrationStats,
}

impl ThresholdFilter {
    /// A filter with a fixed threshold and no calibration history.
    pub fn fixed(task: impl Into<String>, threshold: f64) -> Self {
        Self {
            task: task.into(),
            threshold,
            policy: Policy::BestAccuracy,
            stats: CalibrationStats {
                accuracy: f64::NAN,
                precision: f64::NAN,
                candidates: 0,
            },
        }
    }

    pub fn apply(&self, similarity: f64) -> bool {
        similarity >= self.threshold
    }
}

/// Accuracy of `correct` hits out of `total`.
pub(crate) fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Sorted distinct similarities turned into candidate thresholds, descending.
pub fn candidate_thresholds(scored: &[(f64, u8)]) -> Vec<f64> {
    let mut sims: Vec<f64> = scored.iter().map(|s| s.0).collect();
    sims.sort_by(|a, b| b.total_cmp(a));
    sims.dedup();
    let mut out = Vec::with_capacity(sims.len() + 1);
    if let (Some(&max), Some(&min)) = (sims.first(), sims.last()) {
        out.push(max + EDGE_DELTA);
        out.extend(sims.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        out.push(min - EDGE_DELTA);
    }
    out
}

/// Picks the candidate maximizing the policy metric; ties go to the
/// largest threshold.
pub fn calibrate(task: impl Into<String>, scored: &[(f64, u8)], policy: Policy) -> Result<ThresholdFilter> {
    let mut positives = 0usize;
    for &(s, y) in scored {
        if y > 1 {
            return Err(Error::InvalidLabel(y));
        }
        if !s.is_finite() {
            return Err(Error::Format(format!("non-finite similarity {s}")));
        }
        positives += y as usize;
    }
    let negatives = scored.len() - positives;
    if positives == 0 {
        return Err(Error::MissingClass("positive"));
    }
    if negatives == 0 && policy == Policy::BestAccuracy {
        return Err(Error::MissingClass("negative"));
    }

    let mut sorted: Vec<(f64, u8)> = scored.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let candidates = candidate_thresholds(scored);
    let n = scored.len();

    let stats_at = |tp: usize, fp: usize| {
        let tn = negatives - fp;
        (ratio(tp + tn, n), ratio(tp, tp + fp))
    };

    // Without negatives every non-empty prediction set has precision 1, so
    // the precision policy admits everything.
    if negatives == 0 {
        let threshold = *candidates.last().expect("non-empty input");
        let (accuracy, precision) = stats_at(positives, 0);
        return Ok(ThresholdFilter {
            task: task.into(),
            threshold,
            policy,
            stats: CalibrationStats {
                accuracy,
                precision,
                candidates: candidates.len(),
            },
        });
    }

    // Sweep thresholds from high to low; `idx` counts scores >= threshold.
    let (mut tp, mut fp, mut idx) = (0usize, 0usize, 0usize);
    let mut best: Option<(f64, f64, f64, f64)> = None; // (metric, t, acc, prec)
    for &t in &candidates {
        while idx < n && sorted[idx].0 >= t {
            if sorted[idx].1 == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            idx += 1;
        }
        let (acc, prec) = stats_at(tp, fp);
        let metric = match policy {
            Policy::BestAccuracy => acc,
            Policy::BestPrecision => prec,
        };
        if best.is_none_or(|b| metric > b.0) {
            best = Some((metric, t, acc, prec));
        }
    }
    let (_, threshold, accuracy, precision) = best.expect("at least two candidates");
    Ok(ThresholdFilter {
        task: task.into(),
        threshold,
        policy,
        stats: CalibrationStats {
            accuracy,
            precision,
            candidates: candidates.len(),
        },
    })
}
