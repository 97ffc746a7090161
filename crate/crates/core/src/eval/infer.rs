//! Prototype-based inference: turn an embedding and a prototype set into
//! per-class scores without touching the tape.

use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::prototypes::PrototypeSet;
use crate::scalar::Scalar;

/// How multi-label cosine similarities become scores in [0, 1].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiLabelScore {
    /// `(sim + 1) / 2` per class, independent across classes.
    #[default]
    NormalizedCosine,
    /// Softmax over `sim / tau`, coupling the classes.
    Softmax,
}

/// Cosine similarity between `z` and every prototype row, in class order.
pub fn class_cosines<F: Scalar>(z: &Tensor<F>, prototypes: &PrototypeSet<F>) -> Result<Vec<f64>> {
    let d = prototypes.dim();
    if z.shape() != [d] {
        return Err(Error::shape(
            "class_cosines",
            format!("embedding shape {:?} for prototype dim {}", z.shape(), d),
        ));
    }
    let zv: Vec<f64> = z.values().iter().map(|v| v.as_f64()).collect();
    let z_norm = zv.iter().map(|v| v * v).sum::<f64>().sqrt();
    if z_norm == 0.0 {
        return Err(Error::degenerate("class_cosines", "zero-norm embedding"));
    }
    let pv = prototypes.matrix.values();
    let mut sims = Vec::with_capacity(prototypes.num_classes());
    for k in 0..prototypes.num_classes() {
        let row = &pv[k * d..(k + 1) * d];
        let mut dot = 0.0;
        let mut norm_sq = 0.0;
        for (a, b) in zv.iter().zip(row) {
            let b = b.as_f64();
            dot += a * b;
            norm_sq += b * b;
        }
        if norm_sq == 0.0 {
            return Err(Error::degenerate("class_cosines", format!("prototype {} has zero norm", k)));
        }
        sims.push(dot / (z_norm * norm_sq.sqrt()));
    }
    Ok(sims)
}

fn softmax(values: &[f64]) -> Vec<f64> {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Per-class scores for multi-label inference.
pub fn infer_multilabel<F: Scalar>(
    z: &Tensor<F>,
    prototypes: &PrototypeSet<F>,
    score: MultiLabelScore,
    tau: f64,
) -> Result<Vec<f64>> {
    let sims = class_cosines(z, prototypes)?;
    match score {
        MultiLabelScore::NormalizedCosine => Ok(sims.iter().map(|s| (s + 1.0) / 2.0).collect()),
        MultiLabelScore::Softmax => {
            if tau <= 0.0 {
                return Err(Error::config(format!("tau must be positive, got {}", tau)));
            }
            Ok(softmax(&sims.iter().map(|s| s / tau).collect::<Vec<f64>>()))
        }
    }
}

/// Class probabilities for single-label inference: softmax over `sim / tau`.
pub fn infer_singlelabel<F: Scalar>(
    z: &Tensor<F>,
    prototypes: &PrototypeSet<F>,
    tau: f64,
) -> Result<Vec<f64>> {
    if tau <= 0.0 {
        return Err(Error::config(format!("tau must be positive, got {}", tau)));
    }
    let sims = class_cosines(z, prototypes)?;
    Ok(softmax(&sims.iter().map(|s| s / tau).collect::<Vec<f64>>()))
}
