//! The training engine: batch scheduling, the two-stage schedule with
//! alternating prototype refinement, and the baseline schedules.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::io::{write_atomic, Dataset};
use crate::data::manifest::TaskMode;
use crate::data::sample::{Modality, MultiModalSample};
use crate::data::taxonomy::ClassTaxonomy;
use crate::diff::{Tape, Tensor, Var};
use crate::encoders::{
    build_params, encode_modality, fuse, normal_tensor, project_head, tensor_to, EncoderConfig,
    ParamGroup, ParamSet,
};
use crate::error::{Error, Result};
use crate::losses::{bce_loss, asym_loss, focal_loss, mlc_loss, supcon_loss};
use crate::prototypes::{
    ema_update, estimate_prototypes, init_prototypes, superclass_prototypes, PrototypeSet,
};
use crate::rng;
use crate::scalar::Scalar;

use super::buffer::RefitBuffer;
use super::checkpoint::{config_hash, Checkpoint, StageTag};
use super::config::{LossKind, RefitSource, TrainConfig};
use super::optim::{AdamState, ParamEma};

/// One line of the training event log.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TrainEvent {
    StageStart { stage: StageTag, epochs: usize, steps_per_epoch: usize },
    Step {
        step: u64,
        stage: StageTag,
        epoch: usize,
        loss: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        loss_v: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        loss_t: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        loss_f: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        loss_h: Option<f64>,
    },
    EmaUpdate { step: u64 },
    PrototypeRefresh { step: u64, buffer_rows: usize, delta_norm: f64 },
    PrototypeRefreshSkipped { step: u64, reason: String },
    BatchSkipped { stage: StageTag, epoch: usize, reason: String },
    StageEnd { stage: StageTag, step: u64 },
}

/// Serialize events as JSON lines.
pub fn events_jsonl(events: &[TrainEvent]) -> Result<String> {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_events(events: &[TrainEvent], path: &Path) -> Result<()> {
    write_atomic(path, events_jsonl(events)?.as_bytes())
}

struct BatchOutcome {
    loss: f64,
    loss_v: Option<f64>,
    loss_t: Option<f64>,
    loss_f: Option<f64>,
    loss_h: Option<f64>,
}

pub struct Trainer<F: Scalar> {
    pub cfg: TrainConfig,
    pub enc_cfg: EncoderConfig,
    pub dim_v: usize,
    pub dim_t: usize,
    pub num_classes: usize,
    pub task_mode: TaskMode,
    pub taxonomy: ClassTaxonomy,
    pub params: ParamSet<F>,
    pub opt: AdamState<F>,
    pub ema: ParamEma<F>,
    pub prototypes: PrototypeSet<F>,
    pub buffer: RefitBuffer<F>,
    pub stage: StageTag,
    stage_steps: u64,
    pub events: Vec<TrainEvent>,
}

impl<F: Scalar> Trainer<F> {
    pub fn new(
        cfg: TrainConfig,
        enc_cfg: EncoderConfig,
        dim_v: usize,
        dim_t: usize,
        taxonomy: ClassTaxonomy,
        task_mode: TaskMode,
    ) -> Result<Self> {
        cfg.validate()?;
        enc_cfg.validate()?;
        let num_classes = taxonomy.num_classes();
        if num_classes == 0 {
            return Err(Error::config("taxonomy lists no classes"));
        }
        if cfg.hierarchy_weight > 0.0 && !taxonomy.has_hierarchy() {
            return Err(Error::Taxonomy(
                "hierarchy_weight is set but the dataset has no superclass map".to_string(),
            ));
        }
        if cfg.loss == LossKind::Supcon && task_mode != TaskMode::SingleLabel {
            return Err(Error::contract(
                "trainer",
                "supcon needs single-label data; it does not extend to the multi-label task",
            ));
        }
        let mut params = build_params::<F>(&enc_cfg, dim_v, dim_t)?;
        if cfg.loss.uses_classifier_head() {
            params.insert(
                "classifier.w",
                ParamGroup::Head,
                true,
                normal_tensor(vec![enc_cfg.proj_dim, num_classes], enc_cfg.seed, "classifier.w"),
            )?;
            params.insert(
                "classifier.b",
                ParamGroup::Head,
                true,
                Tensor::zeros(vec![num_classes]),
            )?;
        }
        let prototypes =
            init_prototypes::<F>(num_classes, enc_cfg.proj_dim, cfg.prototype_init, cfg.seed)?;
        let opt = AdamState::new(&params);
        let ema = ParamEma::new(&params);
        let buffer = RefitBuffer::new(cfg.prototype_buffer_size, enc_cfg.proj_dim, num_classes)?;
        let stage = if cfg.loss.is_baseline() { StageTag::Baseline } else { StageTag::Stage1 };
        Ok(Trainer {
            cfg,
            enc_cfg,
            dim_v,
            dim_t,
            num_classes,
            task_mode,
            taxonomy,
            params,
            opt,
            ema,
            prototypes,
            buffer,
            stage,
            stage_steps: 0,
            events: Vec::new(),
        })
    }

    pub fn for_dataset(cfg: TrainConfig, enc_cfg: EncoderConfig, dataset: &Dataset) -> Result<Self> {
        Trainer::new(
            cfg,
            enc_cfg,
            dataset.manifest.dim_v,
            dataset.manifest.dim_t,
            dataset.taxonomy.clone(),
            dataset.manifest.task_mode,
        )
    }

    pub fn step(&self) -> u64 {
        self.opt.t
    }

    pub fn stage_steps(&self) -> u64 {
        self.stage_steps
    }

    pub fn take_events(&mut self) -> Vec<TrainEvent> {
        std::mem::take(&mut self.events)
    }

    fn steps_per_epoch(&self, n: usize) -> u64 {
        (n as u64).div_ceil(self.cfg.batch_size as u64)
    }

    /// Shuffled sample order for one epoch, derived from the run seed.
    fn epoch_order(&self, n: usize, global_epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut stream = rng::stream(self.cfg.seed, "batch_order", global_epoch);
        order.shuffle(&mut stream);
        order
    }

    fn check_dims(&self, data: &[MultiModalSample]) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Data("training split is empty".to_string()));
        }
        for s in data {
            if s.labels.len() != self.num_classes {
                return Err(Error::Data(format!(
                    "sample {} carries {} labels but the taxonomy lists {} classes",
                    s.id,
                    s.labels.len(),
                    self.num_classes
                )));
            }
            if let Some(t) = &s.tokens_v {
                if t.ncols() != self.dim_v {
                    return Err(Error::Data(format!(
                        "sample {}: visual tokens have dim {} but the trainer expects {}",
                        s.id,
                        t.ncols(),
                        self.dim_v
                    )));
                }
            }
            if let Some(t) = &s.tokens_t {
                if t.ncols() != self.dim_t {
                    return Err(Error::Data(format!(
                        "sample {}: text tokens have dim {} but the trainer expects {}",
                        s.id,
                        t.ncols(),
                        self.dim_t
                    )));
                }
            }
        }
        Ok(())
    }

    /// Run the configured schedule to completion.
    pub fn train(&mut self, data: &[MultiModalSample]) -> Result<()> {
        self.train_steps(data, u64::MAX).map(|_| ())
    }

    /// Advance the schedule by at most `budget` optimizer steps. Returns
    /// the number of steps actually taken (less than the budget only when
    /// the schedule finished).
    pub fn train_steps(&mut self, data: &[MultiModalSample], budget: u64) -> Result<u64> {
        self.check_dims(data)?;
        let mut taken = 0u64;
        match self.stage {
            StageTag::Baseline => {
                let epochs = self.cfg.stage1_epochs + self.cfg.stage2_epochs;
                taken += self.run_epoch_loop(data, epochs, 0, budget)?;
            }
            StageTag::Stage1 | StageTag::Stage2 => {
                if self.stage == StageTag::Stage1 {
                    let done =
                        self.run_epoch_loop(data, self.cfg.stage1_epochs, 0, budget)?;
                    taken += done;
                    let total = self.steps_per_epoch(data.len()) * self.cfg.stage1_epochs as u64;
                    if self.stage_steps == total {
                        self.stage = StageTag::Stage2;
                        self.stage_steps = 0;
                    }
                }
                if self.stage == StageTag::Stage2 && taken < budget {
                    taken += self.run_epoch_loop(
                        data,
                        self.cfg.stage2_epochs,
                        self.cfg.stage1_epochs as u64,
                        budget - taken,
                    )?;
                }
            }
        }
        Ok(taken)
    }

    /// Epoch loop shared by every schedule. `epoch_offset` keeps the
    /// shuffle streams of the two stages distinct. Resumes mid-epoch from
    /// `stage_steps`.
    fn run_epoch_loop(
        &mut self,
        data: &[MultiModalSample],
        total_epochs: usize,
        epoch_offset: u64,
        budget: u64,
    ) -> Result<u64> {
        let spe = self.steps_per_epoch(data.len());
        let start_epoch = (self.stage_steps / spe) as usize;
        let mut skip_batches = self.stage_steps % spe;
        if start_epoch >= total_epochs {
            return Ok(0);
        }
        if self.stage_steps == 0 {
            self.events.push(TrainEvent::StageStart {
                stage: self.stage,
                epochs: total_epochs,
                steps_per_epoch: spe as usize,
            });
        }
        let mut taken = 0u64;
        for epoch in start_epoch..total_epochs {
            let order = self.epoch_order(data.len(), epoch_offset + epoch as u64);
            for chunk in order.chunks(self.cfg.batch_size) {
                if skip_batches > 0 {
                    skip_batches -= 1;
                    continue;
                }
                if taken >= budget {
                    return Ok(taken);
                }
                let batch: Vec<&MultiModalSample> = chunk.iter().map(|&i| &data[i]).collect();
                self.step_batch(&batch, epoch)?;
                self.stage_steps += 1;
                taken += 1;
            }
        }
        self.events.push(TrainEvent::StageEnd { stage: self.stage, step: self.opt.t });
        Ok(taken)
    }

    /// Forward, loss, backward, optimizer step, EMA, and (in stage 2)
    /// refit bookkeeping for one batch.
    fn step_batch(&mut self, batch: &[&MultiModalSample], epoch: usize) -> Result<()> {
        let outcome = match self.stage {
            StageTag::Stage1 => self.mlc_batch(batch, false)?,
            StageTag::Stage2 => self.mlc_batch(batch, true)?,
            StageTag::Baseline => match self.baseline_batch(batch)? {
                Some(outcome) => outcome,
                None => {
                    self.events.push(TrainEvent::BatchSkipped {
                        stage: self.stage,
                        epoch,
                        reason: "no anchor in the batch had a positive peer".to_string(),
                    });
                    return Ok(());
                }
            },
        };
        self.events.push(TrainEvent::Step {
            step: self.opt.t,
            stage: self.stage,
            epoch,
            loss: outcome.loss,
            loss_v: outcome.loss_v,
            loss_t: outcome.loss_t,
            loss_f: outcome.loss_f,
            loss_h: outcome.loss_h,
        });
        if self.opt.t % self.cfg.param_ema_interval == 0 {
            self.ema.update(&self.params, self.cfg.param_ema_decay);
            self.events.push(TrainEvent::EmaUpdate { step: self.opt.t });
        }
        if self.stage == StageTag::Stage2 && self.opt.t % self.cfg.prototype_refresh_interval == 0
        {
            self.refresh_prototypes()?;
        }
        Ok(())
    }

    /// Apply gradients from a finished tape to the parameters.
    fn apply_step(&mut self, tape: &mut Tape<F>, bound: &[Var], loss: Var) -> Result<()> {
        let grads = tape.backward(loss)?;
        let collected: Vec<Option<Tensor<F>>> =
            bound.iter().map(|&v| grads.wrt(v).cloned()).collect();
        self.opt.step(&mut self.params, &collected, &self.cfg)
    }

    /// Shared stage-1/stage-2 batch: per-sample multi-label contrastive
    /// terms on each representation against the frozen prototype constant.
    fn mlc_batch(&mut self, batch: &[&MultiModalSample], with_fusion: bool) -> Result<BatchOutcome> {
        let mut tape = Tape::<F>::new();
        let bp = self.params.bind(&mut tape);
        let bound = bp.vars().to_vec();
        let cp = tape.constant(self.prototypes.matrix.clone());
        let hier = if with_fusion && self.cfg.hierarchy_weight > 0.0 {
            let sc = superclass_prototypes(&self.prototypes, &self.taxonomy)?;
            Some(tape.constant(sc.matrix))
        } else {
            None
        };

        let mut terms_v = Vec::new();
        let mut terms_t = Vec::new();
        let mut terms_f = Vec::new();
        let mut terms_h = Vec::new();
        let mut pending_rows: Vec<(Vec<F>, Vec<u8>)> = Vec::new();
        for (i, sample) in batch.iter().enumerate() {
            let draw = (self.opt.t * self.cfg.batch_size as u64 + i as u64) * 4;
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
            let mut z_v = None;
            let mut z_t = None;
            if let Some(e) = &enc_v {
                let z = project_head(&mut tape, &bp, "head_v", e.cls)?;
                terms_v.push(mlc_loss(&mut tape, z, &sample.labels, cp, &self.cfg.mlc, draw)?);
                z_v = Some(z);
            }
            if let Some(e) = &enc_t {
                let z = project_head(&mut tape, &bp, "head_t", e.cls)?;
                terms_t.push(mlc_loss(&mut tape, z, &sample.labels, cp, &self.cfg.mlc, draw + 1)?);
                z_t = Some(z);
            }
            if with_fusion {
                let fused = fuse(&mut tape, &bp, &self.enc_cfg, enc_v.as_ref(), enc_t.as_ref())?;
                let z_f = fused.z_f;
                terms_f.push(mlc_loss(
                    &mut tape,
                    z_f,
                    &sample.labels,
                    cp,
                    &self.cfg.mlc,
                    draw + 2,
                )?);
                if let Some(sc) = hier {
                    let sc_labels = self.taxonomy.superclass_labels(&sample.labels)?;
                    // A sample touching every superclass leaves the term
                    // with no negative; it simply contributes nothing.
                    if sc_labels.iter().any(|&l| l == 0) {
                        terms_h.push(mlc_loss(
                            &mut tape,
                            z_f,
                            &sc_labels,
                            sc,
                            &self.cfg.mlc,
                            draw + 3,
                        )?);
                    }
                }
                // Detached snapshot for the refit buffer.
                let snap = |tape: &Tape<F>, v: Var| tape.value(v).values().to_vec();
                match self.cfg.refit_source {
                    RefitSource::ZF => {
                        pending_rows.push((snap(&tape, z_f), sample.labels.clone()))
                    }
                    RefitSource::ZV => {
                        if let Some(z) = z_v {
                            pending_rows.push((snap(&tape, z), sample.labels.clone()));
                        }
                    }
                    RefitSource::ZT => {
                        if let Some(z) = z_t {
                            pending_rows.push((snap(&tape, z), sample.labels.clone()));
                        }
                    }
                    RefitSource::Concat => {
                        for z in [z_v, z_t, Some(z_f)].into_iter().flatten() {
                            pending_rows.push((snap(&tape, z), sample.labels.clone()));
                        }
                    }
                }
            }
        }

        let mut total: Option<Var> = None;
        let mut add_term = |tape: &mut Tape<F>,
                            terms: &[Var],
                            weight: f64|
         -> Result<Option<f64>> {
            if terms.is_empty() || weight == 0.0 {
                return Ok(None);
            }
            let mean = tape.mean_scalars(terms)?;
            let value = mean_value(tape, mean);
            let scaled =
                if weight == 1.0 { mean } else { tape.mul_scalar(mean, F::cast(weight)) };
            total = Some(match total {
                Some(t) => tape.add(t, scaled)?,
                None => scaled,
            });
            Ok(Some(value))
        };
        let loss_v = add_term(&mut tape, &terms_v, self.cfg.loss_weight_v)?;
        let loss_t = add_term(&mut tape, &terms_t, self.cfg.loss_weight_t)?;
        let loss_f = if with_fusion {
            add_term(&mut tape, &terms_f, self.cfg.loss_weight_f)?
        } else {
            None
        };
        let loss_h = add_term(&mut tape, &terms_h, self.cfg.hierarchy_weight)?;
        let total = total.ok_or_else(|| {
            Error::Data("batch produced no loss terms (no modality present)".to_string())
        })?;
        let loss_value = mean_value(&tape, total);
        self.apply_step(&mut tape, &bound, total)?;
        for (e, l) in pending_rows {
            self.buffer.push(e, &l)?;
        }
        Ok(BatchOutcome { loss: loss_value, loss_v, loss_t, loss_f, loss_h })
    }

    /// Baseline batch. Returns `None` when a SupCon batch has no anchor
    /// with a positive peer and must be skipped.
    fn baseline_batch(&mut self, batch: &[&MultiModalSample]) -> Result<Option<BatchOutcome>> {
        let mut tape = Tape::<F>::new();
        let bp = self.params.bind(&mut tape);
        let bound = bp.vars().to_vec();

        let mut z_rows = Vec::with_capacity(batch.len());
        for sample in batch {
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
            z_rows.push(fused.z_f);
        }

        let total = match self.cfg.loss {
            LossKind::Supcon => {
                let mut classes = Vec::with_capacity(batch.len());
                for sample in batch {
                    let pos = sample.positives();
                    if pos.len() != 1 {
                        return Err(Error::contract(
                            "trainer",
                            format!(
                                "supcon needs single-label data but sample {} has {} positives",
                                sample.id,
                                pos.len()
                            ),
                        ));
                    }
                    classes.push(pos[0]);
                }
                let rows: Vec<Var> = z_rows
                    .iter()
                    .map(|&z| {
                        let d = tape.value(z).numel();
                        tape.reshape(z, vec![1, d])
                    })
                    .collect::<Result<_>>()?;
                let z = tape.concat(&rows, 0)?;
                match supcon_loss(&mut tape, z, &classes, self.cfg.mlc.tau) {
                    Ok(loss) => loss,
                    Err(Error::Contract { op: "supcon_loss", .. }) => return Ok(None),
                    Err(e) => return Err(e),
                }
            }
            LossKind::Bce | LossKind::Focal | LossKind::Asym => {
                let w = bp.get("classifier.w")?;
                let b = bp.get("classifier.b")?;
                let mut terms = Vec::with_capacity(batch.len());
                for (sample, &z) in batch.iter().zip(&z_rows) {
                    let d = tape.value(z).numel();
                    let zr = tape.reshape(z, vec![1, d])?;
                    let prod = tape.matmul(zr, w)?;
                    let flat = tape.reshape(prod, vec![self.num_classes])?;
                    let logits = tape.add(flat, b)?;
                    let term = match self.cfg.loss {
                        LossKind::Bce => bce_loss(&mut tape, logits, &sample.labels)?,
                        LossKind::Focal => {
                            let probs = tape.sigmoid(logits);
                            focal_loss(&mut tape, probs, &sample.labels, &self.cfg.focal)?
                        }
                        LossKind::Asym => {
                            let probs = tape.sigmoid(logits);
                            asym_loss(&mut tape, probs, &sample.labels, &self.cfg.asym)?
                        }
                        _ => unreachable!(),
                    };
                    terms.push(term);
                }
                tape.mean_scalars(&terms)?
            }
            LossKind::Mlc => {
                return Err(Error::contract("trainer", "mlc trains through the two stages"))
            }
        };
        let loss_value = mean_value(&tape, total);
        self.apply_step(&mut tape, &bound, total)?;
        Ok(Some(BatchOutcome {
            loss: loss_value,
            loss_v: None,
            loss_t: None,
            loss_f: Some(loss_value),
            loss_h: None,
        }))
    }

    /// Stage-2 prototype refresh: least-squares estimate over the buffer,
    /// folded in by EMA.
    fn refresh_prototypes(&mut self) -> Result<()> {
        if self.buffer.is_empty() {
            self.events.push(TrainEvent::PrototypeRefreshSkipped {
                step: self.opt.t,
                reason: "refit buffer is empty".to_string(),
            });
            return Ok(());
        }
        let (z, labels) = self.buffer.to_matrix()?;
        let cp_star = estimate_prototypes(&z, &labels, self.prototypes.ridge)?;
        let updated = ema_update(&self.prototypes, &cp_star, self.prototypes.beta)?;
        let delta_norm = self
            .prototypes
            .matrix
            .values()
            .iter()
            .zip(updated.matrix.values())
            .map(|(&a, &b)| (a - b).as_f64().powi(2))
            .sum::<f64>()
            .sqrt();
        self.prototypes = updated;
        self.events.push(TrainEvent::PrototypeRefresh {
            step: self.opt.t,
            buffer_rows: self.buffer.len(),
            delta_norm,
        });
        Ok(())
    }

    /// Refit prototypes once from the final embeddings of `data`, used to
    /// give SupCon baselines a prototype head for inference.
    pub fn refit_prototypes_from(&mut self, data: &[MultiModalSample]) -> Result<()> {
        self.check_dims(data)?;
        let mut rows = Vec::with_capacity(data.len());
        let mut entries = Vec::with_capacity(data.len() * self.num_classes);
        for sample in data {
            let z = self.embed_zf(sample)?;
            rows.extend_from_slice(z.values());
            entries.extend_from_slice(&sample.labels);
        }
        let z = Tensor::new(vec![data.len(), self.enc_cfg.proj_dim], rows)?;
        let labels = crate::data::labels::LabelMatrix::new(data.len(), self.num_classes, entries)?;
        let cp_star = estimate_prototypes(&z, &labels, self.prototypes.ridge)?;
        let delta_norm = self
            .prototypes
            .matrix
            .values()
            .iter()
            .zip(cp_star.values())
            .map(|(&a, &b)| (a - b).as_f64().powi(2))
            .sum::<f64>()
            .sqrt();
        self.prototypes = PrototypeSet {
            matrix: cp_star,
            init_mode: self.prototypes.init_mode,
            beta: self.prototypes.beta,
            ridge: self.prototypes.ridge,
        };
        self.events.push(TrainEvent::PrototypeRefresh {
            step: self.opt.t,
            buffer_rows: data.len(),
            delta_norm,
        });
        Ok(())
    }

    /// Fused embedding of one sample under the current (non-EMA) weights.
    fn embed_zf(&self, sample: &MultiModalSample) -> Result<Tensor<F>> {
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

    /// Snapshot the full training state.
    pub fn checkpoint(&self) -> Checkpoint<F> {
        Checkpoint {
            train_config: self.cfg.clone(),
            encoder_config: self.enc_cfg.clone(),
            dim_v: self.dim_v,
            dim_t: self.dim_t,
            num_classes: self.num_classes,
            task_mode: self.task_mode,
            stage: self.stage,
            step: self.opt.t,
            stage_steps: self.stage_steps,
            params: self.params.clone(),
            ema: self.ema.clone(),
            opt: self.opt.clone(),
            prototypes: self.prototypes.clone(),
            buffer: self.buffer.clone(),
        }
    }

    /// Resume from a checkpoint. The taxonomy comes from the dataset; the
    /// checkpoint must match it and the configs must hash identically.
    pub fn from_checkpoint(ckpt: Checkpoint<F>, taxonomy: ClassTaxonomy) -> Result<Self> {
        ckpt.train_config.validate()?;
        ckpt.encoder_config.validate()?;
        if taxonomy.num_classes() != ckpt.num_classes {
            return Err(Error::contract(
                "trainer",
                format!(
                    "checkpoint was trained with {} classes but the taxonomy lists {}",
                    ckpt.num_classes,
                    taxonomy.num_classes()
                ),
            ));
        }
        if ckpt.train_config.hierarchy_weight > 0.0 && !taxonomy.has_hierarchy() {
            return Err(Error::Taxonomy(
                "checkpoint uses a hierarchy but the dataset has no superclass map".to_string(),
            ));
        }
        Ok(Trainer {
            cfg: ckpt.train_config,
            enc_cfg: ckpt.encoder_config,
            dim_v: ckpt.dim_v,
            dim_t: ckpt.dim_t,
            num_classes: ckpt.num_classes,
            task_mode: ckpt.task_mode,
            taxonomy,
            params: ckpt.params,
            opt: ckpt.opt,
            ema: ckpt.ema,
            prototypes: ckpt.prototypes,
            buffer: ckpt.buffer,
            stage: ckpt.stage,
            stage_steps: ckpt.stage_steps,
            events: Vec::new(),
        })
    }

    /// Hash of this trainer's run configuration, for resume validation.
    pub fn config_hash(&self) -> String {
        config_hash(
            &self.cfg,
            &self.enc_cfg,
            self.dim_v,
            self.dim_t,
            self.num_classes,
            self.task_mode,
        )
    }
}

fn mean_value<F: Scalar>(tape: &Tape<F>, v: Var) -> f64 {
    tape.value(v).item().as_f64()
}
