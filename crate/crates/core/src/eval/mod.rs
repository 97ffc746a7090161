//! Inference and evaluation: prototype scoring, ranking metrics, report
//! assembly, and robustness sweeps.

pub mod infer;
pub mod metrics;
pub mod report;

pub use infer::{class_cosines, infer_multilabel, infer_singlelabel, MultiLabelScore};
pub use metrics::{
    argmax, aupr, lrap, pr_curve, recall_at_precision, top1_accuracy, Averaging, LrapOutcome,
    PrPoint,
};
pub use report::{
    evaluate, evaluate_scorer, pr_curves_csv, robustness_csv, robustness_eval, EvalReport,
    RecallAtPrecisionEntry, RobustnessRow, Scorer, DEFAULT_PRECISION_FLOORS,
};
