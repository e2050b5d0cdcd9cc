//! Classification and ranking metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Score groups in descending score order: `(positives, negatives)` per
/// distinct score value.
fn tie_groups<T: Scalar>(scores: &[T], labels: &[bool]) -> Result<Vec<(u64, u64)>> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Input("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("no NaN"));
    let mut groups: Vec<(u64, u64)> = Vec::new();
    let mut prev: Option<T> = None;
    for i in order {
        if prev != Some(scores[i]) {
            groups.push((0, 0));
            prev = Some(scores[i]);
        }
        let g = groups.last_mut().expect("pushed");
        if labels[i] {
            g.0 += 1;
        } else {
            g.1 += 1;
        }
    }
    Ok(groups)
}

fn class_counts(labels: &[bool]) -> (u64, u64) {
    let p = labels.iter().filter(|&&y| y).count() as u64;
    (p, labels.len() as u64 - p)
}

/// Mann-Whitney form of the area under the ROC curve, ties counted half.
pub fn roc_auc<T: Scalar>(scores: &[T], labels: &[bool]) -> Result<f64> {
    let groups = tie_groups(scores, labels)?;
    let (p, n) = class_counts(labels);
    if p == 0 || n == 0 {
        return Err(Error::UndefinedMetric(format!(
            "ROC-AUC needs both classes (got {p} positive, {n} negative)"
        )));
    }
    // Twice the number of concordant pairs, plus tied pairs.
    let mut twice = 0u128;
    let mut neg_below = n;
    for &(gp, gn) in &groups {
        neg_below -= gn;
        twice += 2 * gp as u128 * neg_below as u128 + gp as u128 * gn as u128;
    }
    Ok(twice as f64 / (2.0 * p as f64 * n as f64))
}

/// Step-wise area under the precision-recall curve (average precision):
/// `Σ_k (R_k - R_{k-1}) P_k` over distinct score thresholds, descending.
pub fn pr_auc<T: Scalar>(scores: &[T], labels: &[bool]) -> Result<f64> {
    let groups = tie_groups(scores, labels)?;
    let (p, _) = class_counts(labels);
    if p == 0 {
        return Err(Error::UndefinedMetric("PR-AUC needs at least one positive".into()));
    }
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut area = 0.0;
    for &(gp, gn) in &groups {
        tp += gp;
        fp += gn;
        if gp > 0 {
            area += (gp as f64 / p as f64) * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(area)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholded {
    pub confusion: Confusion,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    /// No item was predicted positive, so precision is reported as 0.
    pub precision_degenerate: bool,
    /// No positive labels, so recall is reported as 0.
    pub recall_degenerate: bool,
}

/// Confusion-matrix metrics with `score >= threshold` predicted positive.
pub fn thresholded<T: Scalar>(scores: &[T], labels: &[bool], threshold: T) -> Result<Thresholded> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::UndefinedMetric("no items".into()));
    }
    let mut c = Confusion::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(Thresholded {
        confusion: c,
        precision: ratio(c.tp, c.tp + c.fp),
        recall: ratio(c.tp, c.tp + c.fn_),
        f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        accuracy: ratio(c.tp + c.tn, c.total()),
        precision_degenerate: c.tp + c.fp == 0,
        recall_degenerate: c.tp + c.fn_ == 0,
    })
}

/// `(1/n) Σ R_i` over 1-based ranks.
pub fn mean_rank(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::UndefinedMetric("mean rank of no queries".into()));
    }
    if ranks.contains(&0) {
        return Err(Error::Contract("ranks are 1-based".into()));
    }
    Ok(ranks.iter().map(|&r| r as f64).sum::<f64>() / ranks.len() as f64)
}

/// Metrics for one set of probability scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub support: usize,
    pub positives: usize,
    /// `None` when only one class is present.
    pub roc_auc: Option<f64>,
    pub pr_auc: Option<f64>,
    #[serde(flatten)]
    pub thresholded: Thresholded,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub groups: BTreeMap<String, MetricsReport>,
}

impl MetricsReport {
    /// Report over probabilities `scores` (threshold 0.5), with an optional
    /// breakdown by group tag.
    pub fn compute(scores: &[f64], labels: &[bool], groups: Option<&[Option<String>]>) -> Result<Self> {
        let mut report = Self::flat(scores, labels)?;
        if let Some(tags) = groups {
            if tags.len() != scores.len() {
                return Err(Error::Contract("one group tag per item required".into()));
            }
            let mut by: BTreeMap<String, (Vec<f64>, Vec<bool>)> = BTreeMap::new();
            for ((tag, &s), &y) in tags.iter().zip(scores).zip(labels) {
                if let Some(t) = tag {
                    let e = by.entry(t.clone()).or_default();
                    e.0.push(s);
                    e.1.push(y);
                }
            }
            for (tag, (s, y)) in by {
                report.groups.insert(tag, Self::flat(&s, &y)?);
            }
        }
        Ok(report)
    }

    fn flat(scores: &[f64], labels: &[bool]) -> Result<Self> {
        let thresholded = thresholded(scores, labels, 0.5)?;
        let defined = |r: Result<f64>| match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::UndefinedMetric(_)) => Ok(None),
            Err(e) => Err(e),
        };
        Ok(MetricsReport {
            support: scores.len(),
            positives: labels.iter().filter(|&&y| y).count(),
            roc_auc: defined(roc_auc(scores, labels))?,
            pr_auc: defined(pr_auc(scores, labels))?,
            thresholded,
            groups: BTreeMap::new(),
        })
    }
}
