//! Classification, ROC and retrieval metrics.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::{ratio, ThresholdFilter};
use crate::error::{Error, Result};
use crate::retrieval::{DocId, QueryResult};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: ConfusionCounts,
}

impl From<ConfusionCounts> for ClassificationReport {
    fn from(c: ConfusionCounts) -> Self {
        Self {
            accuracy: c.accuracy(),
            precision: c.precision(),
            recall: c.recall(),
            f1: c.f1(),
            counts: c,
        }
    }
}

pub fn classify_metrics(scored: &[(f64, u8)], filter: &ThresholdFilter) -> Result<ClassificationReport> {
    let mut c = ConfusionCounts::default();
    for &(s, y) in scored {
        match (filter.apply(s), y) {
            (true, 1) => c.tp += 1,
            (true, 0) => c.fp += 1,
            (false, 0) => c.tn += 1,
            (false, 1) => c.fn_ += 1,
            (_, y) => return Err(Error::InvalidLabel(y)),
        }
    }
    Ok(c.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(fpr, tpr)` from (0, 0) to (1, 1).
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// One ROC point per distinct score, trapezoidal area.
pub fn roc_curve(scored: &[(f64, u8)]) -> Result<RocCurve> {
    let mut pos = 0usize;
    for &(s, y) in scored {
        if y > 1 {
            return Err(Error::InvalidLabel(y));
        }
        if !s.is_finite() {
            return Err(Error::Format(format!("non-finite score {s}")));
        }
        pos += y as usize;
    }
    let neg = scored.len() - pos;
    if pos == 0 {
        return Err(Error::MissingClass("positive"));
    }
    if neg == 0 {
        return Err(Error::MissingClass("negative"));
    }
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].0;
        let (tp0, fp0) = (tp, fp);
        while i < sorted.len() && sorted[i].0 == s {
            if sorted[i].1 == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        // trapezoid in count space, normalized once at the end
        auc += (fp - fp0) as f64 * (tp + tp0) as f64 / 2.0;
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(RocCurve {
        points,
        auc: auc / (pos as f64 * neg as f64),
    })
}

/// Fraction of queries with at least one gold id in their top `k` results.
pub fn accuracy_at_k(
    results: &BTreeMap<String, QueryResult>,
    gold: &BTreeMap<String, Vec<DocId>>,
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    let mut hits: BTreeMap<usize, usize> = ks.iter().map(|&k| (k, 0)).collect();
    for (qid, relevant) in gold {
        let r = results.get(qid).ok_or_else(|| Error::MissingQuery(qid.clone()))?;
        let first_hit = r.ranked.iter().position(|(id, _)| relevant.contains(id));
        if let Some(rank) = first_hit {
            for (&k, h) in hits.iter_mut() {
                if rank < k {
                    *h += 1;
                }
            }
        }
    }
    Ok(hits.into_iter().map(|(k, h)| (k, ratio(h, gold.len()))).collect())
}

/// One line of the metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub task: String,
    pub value: f64,
}

impl MetricRecord {
    pub fn new(metric: impl Into<String>, task: impl Into<String>, value: f64) -> Self {
        Self {
            metric: metric.into(),
            task: task.into(),
            value,
        }
    }
}

pub fn write_metrics(path: impl AsRef<Path>, records: &[MetricRecord]) -> Result<()> {
    crate::jsonl::write_jsonl(path.as_ref(), records)
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricRecord>> {
    crate::jsonl::read_jsonl(path.as_ref())
}

/// `fpr<TAB>tpr` per line.
pub fn write_roc(path: impl AsRef<Path>, roc: &RocCurve) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (fpr, tpr) in &roc.points {
        writeln!(out, "{fpr}\t{tpr}")?;
    }
    out.flush()?;
    Ok(())
}
