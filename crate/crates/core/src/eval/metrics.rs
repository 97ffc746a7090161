//! Ranking and threshold metrics for multi-label scores.
//!
//! Scores arrive as one `Vec<f64>` per sample. Rank order is always
//! descending score with ties broken by ascending class index, which keeps
//! every metric deterministic and lets the brute-force oracles in the
//! tests match exactly.

use serde::{Deserialize, Serialize};

use crate::data::labels::LabelMatrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    Micro,
    Macro,
}

/// One point of a precision-recall curve. The leading anchor point of a
/// curve has no threshold.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PrPoint {
    pub threshold: Option<f64>,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LrapOutcome {
    pub value: f64,
    /// Rows without any positive label, excluded from the average.
    pub excluded_rows: usize,
}

fn check_scores(op: &'static str, scores: &[Vec<f64>], labels: &LabelMatrix) -> Result<()> {
    if scores.len() != labels.num_samples() {
        return Err(Error::shape(
            op,
            format!("{} score rows for {} samples", scores.len(), labels.num_samples()),
        ));
    }
    for (i, row) in scores.iter().enumerate() {
        if row.len() != labels.num_classes() {
            return Err(Error::shape(
                op,
                format!("row {} has {} scores for {} classes", i, row.len(), labels.num_classes()),
            ));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite score in row {}", i)));
        }
    }
    Ok(())
}

/// Indices ordered by descending score, ties by ascending class index.
fn ranking(row: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| {
        row[b].partial_cmp(&row[a]).expect("finite scores").then(a.cmp(&b))
    });
    order
}

/// Label-ranking average precision.
///
/// Per sample, each positive class λ contributes the fraction of classes
/// ranked at or above λ that are themselves positive, using 1-based ranks;
/// contributions average within a sample and then across samples. Rows
/// without positives are excluded and counted.
pub fn lrap(scores: &[Vec<f64>], labels: &LabelMatrix) -> Result<LrapOutcome> {
    check_scores("lrap", scores, labels)?;
    let k = labels.num_classes();
    let mut total = 0.0;
    let mut included = 0usize;
    let mut excluded = 0usize;
    for (i, row) in scores.iter().enumerate() {
        let positives = labels.positives(i);
        if positives.is_empty() {
            excluded += 1;
            continue;
        }
        let order = ranking(row);
        let mut rank_of = vec![0usize; k];
        for (pos, &c) in order.iter().enumerate() {
            rank_of[c] = pos + 1;
        }
        let mut pos_ranks: Vec<usize> = positives.iter().map(|&c| rank_of[c]).collect();
        pos_ranks.sort_unstable();
        let mut sample_sum = 0.0;
        for (j, &r) in pos_ranks.iter().enumerate() {
            sample_sum += (j + 1) as f64 / r as f64;
        }
        total += sample_sum / positives.len() as f64;
        included += 1;
    }
    if included == 0 {
        return Err(Error::Data("lrap undefined: no row has a positive label".to_string()));
    }
    Ok(LrapOutcome { value: total / included as f64, excluded_rows: excluded })
}

/// Average precision of pooled `(score, is_positive)` pairs by exact
/// rectangle summation over descending unique thresholds (ties grouped,
/// no precision envelope). `None` when the pool holds no positive.
fn average_precision(pairs: &mut Vec<(f64, bool)>) -> Option<f64> {
    let total_pos = pairs.iter().filter(|(_, y)| *y).count();
    if total_pos == 0 {
        return None;
    }
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores"));
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < pairs.len() {
        let threshold = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == threshold {
            if pairs[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / total_pos as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}

fn micro_pairs(scores: &[Vec<f64>], labels: &LabelMatrix) -> Vec<(f64, bool)> {
    let mut pairs = Vec::with_capacity(scores.len() * labels.num_classes());
    for (i, row) in scores.iter().enumerate() {
        for (c, &s) in row.iter().enumerate() {
            pairs.push((s, labels.get(i, c)));
        }
    }
    pairs
}

/// Per-class average precision; `None` for classes without positives.
pub fn per_class_aupr(scores: &[Vec<f64>], labels: &LabelMatrix) -> Result<Vec<Option<f64>>> {
    check_scores("aupr", scores, labels)?;
    let mut out = Vec::with_capacity(labels.num_classes());
    for c in 0..labels.num_classes() {
        let mut pairs: Vec<(f64, bool)> = scores
            .iter()
            .enumerate()
            .map(|(i, row)| (row[c], labels.get(i, c)))
            .collect();
        out.push(average_precision(&mut pairs));
    }
    Ok(out)
}

/// Area under the precision-recall curve. Micro pools every
/// `(sample, class)` pair; macro averages per-class values over classes
/// that have at least one positive.
pub fn aupr(scores: &[Vec<f64>], labels: &LabelMatrix, averaging: Averaging) -> Result<f64> {
    check_scores("aupr", scores, labels)?;
    match averaging {
        Averaging::Micro => {
            let mut pairs = micro_pairs(scores, labels);
            average_precision(&mut pairs)
                .ok_or_else(|| Error::Data("aupr undefined: no positive labels".to_string()))
        }
        Averaging::Macro => {
            let per_class = per_class_aupr(scores, labels)?;
            let present: Vec<f64> = per_class.into_iter().flatten().collect();
            if present.is_empty() {
                return Err(Error::Data("aupr undefined: no class has positives".to_string()));
            }
            Ok(present.iter().sum::<f64>() / present.len() as f64)
        }
    }
}

/// Precision-recall curve for one class's scores, beginning with the
/// conventional anchor point (precision 1, recall 0).
pub fn pr_curve(scores: &[Vec<f64>], labels: &LabelMatrix, class: usize) -> Result<Vec<PrPoint>> {
    check_scores("pr_curve", scores, labels)?;
    if class >= labels.num_classes() {
        return Err(Error::shape("pr_curve", format!("class {} out of range", class)));
    }
    let mut pairs: Vec<(f64, bool)> = scores
        .iter()
        .enumerate()
        .map(|(i, row)| (row[class], labels.get(i, class)))
        .collect();
    let total_pos = pairs.iter().filter(|(_, y)| *y).count();
    let mut points = vec![PrPoint { threshold: None, precision: 1.0, recall: 0.0 }];
    if total_pos == 0 {
        return Ok(points);
    }
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores"));
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < pairs.len() {
        let threshold = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == threshold {
            if pairs[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(PrPoint {
            threshold: Some(threshold),
            precision: tp as f64 / (tp + fp) as f64,
            recall: tp as f64 / total_pos as f64,
        });
    }
    Ok(points)
}

/// Maximum recall over score thresholds at which micro precision stays at
/// or above `floor`, with the smallest qualifying threshold. Returns
/// `(0.0, None)` when no threshold qualifies.
pub fn recall_at_precision(
    scores: &[Vec<f64>],
    labels: &LabelMatrix,
    floor: f64,
) -> Result<(f64, Option<f64>)> {
    if !(floor > 0.0 && floor <= 1.0) {
        return Err(Error::config(format!("precision floor must be in (0, 1], got {}", floor)));
    }
    check_scores("recall_at_precision", scores, labels)?;
    let mut pairs = micro_pairs(scores, labels);
    let total_pos = pairs.iter().filter(|(_, y)| *y).count();
    if total_pos == 0 {
        return Err(Error::Data("recall_at_precision undefined: no positive labels".to_string()));
    }
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores"));
    let mut best = (0.0f64, None);
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < pairs.len() {
        let threshold = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == threshold {
            if pairs[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / total_pos as f64;
        if precision >= floor && recall >= best.0 {
            best = (recall, Some(threshold));
        }
    }
    Ok(best)
}

/// Index of the maximum score; ties resolve to the lowest class index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of samples whose argmax matches the single positive label.
pub fn top1_accuracy(scores: &[Vec<f64>], labels: &LabelMatrix) -> Result<f64> {
    check_scores("top1_accuracy", scores, labels)?;
    if labels.num_samples() == 0 {
        return Err(Error::Data("top1_accuracy undefined on an empty set".to_string()));
    }
    if !labels.is_single_label() {
        return Err(Error::contract(
            "top1_accuracy",
            "labels must have exactly one positive per row",
        ));
    }
    let mut hits = 0usize;
    for (i, row) in scores.iter().enumerate() {
        let truth = labels.positives(i)[0];
        if argmax(row) == truth {
            hits += 1;
        }
    }
    Ok(hits as f64 / scores.len() as f64)
}
