//! A trained model packaged for inference: frozen weights, prototypes,
//! and the scoring rule the loss implies.

use serde::{Deserialize, Serialize};

use crate::data::manifest::TaskMode;
use crate::data::sample::{Modality, MultiModalSample};
use crate::diff::{Tape, Tensor};
use crate::encoders::{encode_modality, fuse, tensor_to, EncoderConfig, ParamSet};
use crate::error::{Error, Result};
use crate::eval::{infer_multilabel, infer_singlelabel, MultiLabelScore, Scorer};
use crate::prototypes::PrototypeSet;
use crate::scalar::Scalar;

use super::engine::Trainer;

/// How scores are produced from the fused embedding.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum ScoringRule {
    /// Cosine similarity against class prototypes.
    Prototype { score: MultiLabelScore, tau: f64 },
    /// Sigmoid of the linear classifier head.
    Classifier,
}

pub struct TrainedModel<F: Scalar> {
    pub enc_cfg: EncoderConfig,
    pub params: ParamSet<F>,
    pub prototypes: PrototypeSet<F>,
    pub scoring: ScoringRule,
    pub task_mode: TaskMode,
}

impl<F: Scalar> TrainedModel<F> {
    /// Package a trainer's current state. Uses the EMA weights when the
    /// config asks for them, otherwise the raw weights.
    pub fn from_trainer(trainer: &Trainer<F>) -> Result<Self> {
        let params = if trainer.cfg.eval_use_ema {
            trainer.ema.materialize(&trainer.params)?
        } else {
            trainer.params.clone()
        };
        let scoring = if trainer.cfg.loss.uses_classifier_head() {
            ScoringRule::Classifier
        } else {
            ScoringRule::Prototype {
                score: MultiLabelScore::default(),
                tau: trainer.cfg.mlc.tau,
            }
        };
        Ok(TrainedModel {
            enc_cfg: trainer.enc_cfg.clone(),
            params,
            prototypes: trainer.prototypes.clone(),
            scoring,
            task_mode: trainer.task_mode,
        })
    }

    /// Fused embedding for one sample.
    pub fn embed(&self, sample: &MultiModalSample) -> Result<Tensor<F>> {
        let mut tape = Tape::<F>::new();
        let bp = self.params.bind(&mut tape);
        let enc_v = match &sample.tokens_v {
            Some(tok) => {
                let var = tape.constant(tensor_to::<F>(tok));
                Some(encode_modality(&mut tape, &bp, &self.enc_cfg, var, Modality::V)?)
            }
            None => None,
        };
        let enc_t = match &sample.tokens_t {
            Some(tok) => {
                let var = tape.constant(tensor_to::<F>(tok));
                Some(encode_modality(&mut tape, &bp, &self.enc_cfg, var, Modality::T)?)
            }
            None => None,
        };
        let fused = fuse(&mut tape, &bp, &self.enc_cfg, enc_v.as_ref(), enc_t.as_ref())?;
        Ok(tape.value(fused.z_f).clone())
    }

    fn classifier_scores(&self, z: &Tensor<F>) -> Result<Vec<f64>> {
        let w = self
            .params
            .tensor("classifier.w")
            .ok_or_else(|| Error::contract("trained_model", "classifier head is missing"))?;
        let b = self
            .params
            .tensor("classifier.b")
            .ok_or_else(|| Error::contract("trained_model", "classifier head is missing"))?;
        let d = z.numel();
        let k = b.numel();
        if w.shape() != [d, k] {
            return Err(Error::Shape {
                op: "trained_model",
                details: format!("classifier.w is {:?}, expected [{}, {}]", w.shape(), d, k),
            });
        }
        let zv = z.values();
        let wv = w.values();
        let mut out = Vec::with_capacity(k);
        for c in 0..k {
            let mut s = b.values()[c].as_f64();
            for (i, &zi) in zv.iter().enumerate() {
                s += zi.as_f64() * wv[i * k + c].as_f64();
            }
            out.push(1.0 / (1.0 + (-s).exp()));
        }
        Ok(out)
    }
}

impl<F: Scalar> Scorer for TrainedModel<F> {
    fn scores(&self, sample: &MultiModalSample) -> Result<Vec<f64>> {
        let z = self.embed(sample)?;
        match self.scoring {
            ScoringRule::Prototype { score, tau } => match self.task_mode {
                TaskMode::MultiLabel => infer_multilabel(&z, &self.prototypes, score, tau),
                TaskMode::SingleLabel => infer_singlelabel(&z, &self.prototypes, tau),
            },
            ScoringRule::Classifier => self.classifier_scores(&z),
        }
    }
}
