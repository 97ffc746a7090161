//! Evaluation reports: bundle the metrics over a scored split, serialize
//! them, and sweep token-drop robustness.

use serde::{Deserialize, Serialize};

use crate::data::labels::LabelMatrix;
use crate::data::manifest::TaskMode;
use crate::data::sample::{drop_modality_tokens, Modality, MultiModalSample};
use crate::error::{Error, Result};
use crate::rng;

use super::metrics::{
    self, Averaging, PrPoint,
};

pub const DEFAULT_PRECISION_FLOORS: [f64; 1] = [0.8];

/// Anything that maps a sample to per-class scores. Implemented by trained
/// models; tests substitute fixed tables.
pub trait Scorer {
    fn scores(&self, sample: &MultiModalSample) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecallAtPrecisionEntry {
    pub floor: f64,
    pub recall: f64,
    pub threshold: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub task_mode: TaskMode,
    pub num_samples: usize,
    pub num_classes: usize,
    pub lrap: f64,
    pub lrap_excluded_rows: usize,
    pub micro_aupr: f64,
    pub macro_aupr: f64,
    pub per_class_aupr: Vec<Option<f64>>,
    pub recall_at_precision: Vec<RecallAtPrecisionEntry>,
    /// Present only in single-label mode.
    pub top1_accuracy: Option<f64>,
    /// One curve per class, each starting at the (1, 0) anchor.
    pub pr_curves: Vec<Vec<PrPoint>>,
}

impl EvalReport {
    /// Every reported metric value lies in [0, 1].
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| -> Result<()> {
            if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                return Err(Error::numerical(
                    "eval_report",
                    format!("{} = {} outside [0, 1]", name, v),
                ));
            }
            Ok(())
        };
        unit("lrap", self.lrap)?;
        unit("micro_aupr", self.micro_aupr)?;
        unit("macro_aupr", self.macro_aupr)?;
        for (k, v) in self.per_class_aupr.iter().enumerate() {
            if let Some(v) = v {
                unit(&format!("per_class_aupr[{}]", k), *v)?;
            }
        }
        for entry in &self.recall_at_precision {
            unit(&format!("recall_at_precision[{}]", entry.floor), entry.recall)?;
        }
        if let Some(v) = self.top1_accuracy {
            unit("top1_accuracy", v)?;
        }
        for (k, curve) in self.pr_curves.iter().enumerate() {
            for p in curve {
                unit(&format!("pr_curves[{}].precision", k), p.precision)?;
                unit(&format!("pr_curves[{}].recall", k), p.recall)?;
            }
        }
        Ok(())
    }
}

/// Compute the full metric bundle for one scored split.
pub fn evaluate(
    scores: &[Vec<f64>],
    labels: &LabelMatrix,
    task_mode: TaskMode,
    precision_floors: &[f64],
) -> Result<EvalReport> {
    let lrap = metrics::lrap(scores, labels)?;
    let micro_aupr = metrics::aupr(scores, labels, Averaging::Micro)?;
    let macro_aupr = metrics::aupr(scores, labels, Averaging::Macro)?;
    let per_class_aupr = metrics::per_class_aupr(scores, labels)?;
    let mut recall_entries = Vec::with_capacity(precision_floors.len());
    for &floor in precision_floors {
        let (recall, threshold) = metrics::recall_at_precision(scores, labels, floor)?;
        recall_entries.push(RecallAtPrecisionEntry { floor, recall, threshold });
    }
    let top1_accuracy = match task_mode {
        TaskMode::SingleLabel => Some(metrics::top1_accuracy(scores, labels)?),
        TaskMode::MultiLabel => None,
    };
    let mut pr_curves = Vec::with_capacity(labels.num_classes());
    for c in 0..labels.num_classes() {
        pr_curves.push(metrics::pr_curve(scores, labels, c)?);
    }
    let report = EvalReport {
        task_mode,
        num_samples: labels.num_samples(),
        num_classes: labels.num_classes(),
        lrap: lrap.value,
        lrap_excluded_rows: lrap.excluded_rows,
        micro_aupr,
        macro_aupr,
        per_class_aupr,
        recall_at_precision: recall_entries,
        top1_accuracy,
        pr_curves,
    };
    report.validate()?;
    Ok(report)
}

/// Score every sample with `scorer` and evaluate against the labels the
/// samples carry.
pub fn evaluate_scorer<S: Scorer>(
    scorer: &S,
    samples: &[MultiModalSample],
    task_mode: TaskMode,
    precision_floors: &[f64],
) -> Result<EvalReport> {
    let labels = labels_of(samples)?;
    let mut scores = Vec::with_capacity(samples.len());
    for sample in samples {
        scores.push(scorer.scores(sample)?);
    }
    evaluate(&scores, &labels, task_mode, precision_floors)
}

fn labels_of(samples: &[MultiModalSample]) -> Result<LabelMatrix> {
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate an empty sample set".to_string()));
    }
    let k = samples[0].labels.len();
    let rows: Vec<Vec<u8>> = samples.iter().map(|s| s.labels.clone()).collect();
    LabelMatrix::from_rows(&rows, k)
}

/// CSV dump of the per-class precision-recall curves. Anchor points keep
/// an empty threshold field.
pub fn pr_curves_csv(report: &EvalReport) -> String {
    let mut out = String::from("class,threshold,precision,recall\n");
    for (class, curve) in report.pr_curves.iter().enumerate() {
        for p in curve {
            let t = p.threshold.map(|t| format!("{}", t)).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", class, t, p.precision, p.recall));
        }
    }
    out
}

/// One row of a robustness sweep: the full report after dropping
/// `fraction` of the tokens of `modality` from each sample.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub modality: Modality,
    pub fraction: f64,
    pub report: EvalReport,
}

/// Re-score the split under increasing token drop for one modality.
///
/// Each sample's drop pattern is seeded independently from `seed` so the
/// sweep is deterministic; samples that lack the modality pass through
/// unchanged.
pub fn robustness_eval<S: Scorer>(
    scorer: &S,
    samples: &[MultiModalSample],
    task_mode: TaskMode,
    precision_floors: &[f64],
    modality: Modality,
    fractions: &[f64],
    seed: u64,
) -> Result<Vec<RobustnessRow>> {
    let labels = labels_of(samples)?;
    let mut rows = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        let mut scores = Vec::with_capacity(samples.len());
        for (i, sample) in samples.iter().enumerate() {
            let dropped = if sample.tokens(modality).is_none() {
                sample.clone()
            } else {
                let sample_seed = rng::derive_seed(seed, "robustness_drop", i as u64);
                drop_modality_tokens(sample, modality, fraction, sample_seed)?
            };
            scores.push(scorer.scores(&dropped)?);
        }
        let report = evaluate(&scores, &labels, task_mode, precision_floors)?;
        rows.push(RobustnessRow { modality, fraction, report });
    }
    Ok(rows)
}

/// CSV dump of a robustness sweep, one line per (modality, fraction).
pub fn robustness_csv(rows: &[RobustnessRow]) -> String {
    let mut header = String::from("modality,fraction,lrap,micro_aupr,macro_aupr");
    if let Some(first) = rows.first() {
        for entry in &first.report.recall_at_precision {
            header.push_str(&format!(",recall_at_p{}", entry.floor));
        }
    }
    header.push('\n');
    let mut out = header;
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{}",
            row.modality, row.fraction, row.report.lrap, row.report.micro_aupr, row.report.macro_aupr
        ));
        for entry in &row.report.recall_at_precision {
            out.push_str(&format!(",{}", entry.recall));
        }
        out.push('\n');
    }
    out
}
