//! `mlpc train`: run the configured schedule on a dataset directory and
//! write checkpoints, the event log, and final metrics.

use std::fs;
use std::path::Path;

use mlpc_core::data::{load_dataset, write_atomic, Dataset};
use mlpc_core::eval::evaluate_scorer;
use mlpc_core::trainer::{
    config_hash, load_checkpoint, save_checkpoint, write_events, LossKind, StageTag,
    TrainedModel, Trainer,
};
use mlpc_core::{Error, Result};

use crate::config::{resolve_out_dir, RunConfig};

pub fn run(config: &Path, data: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let out = resolve_out_dir(out);
    fs::create_dir_all(&out)?;
    let dataset = load_dataset(&data.join("manifest.json"))?;
    let mut trainer = build_trainer(&cfg, &dataset, resume)?;
    let train_split = dataset.split("train")?;

    // Mlc runs leave a checkpoint at the stage boundary so stage 2 can be
    // resumed or restarted in isolation.
    if trainer.stage == StageTag::Stage1 {
        let spe = (train_split.len() as u64).div_ceil(trainer.cfg.batch_size as u64);
        let stage1_total = spe * trainer.cfg.stage1_epochs as u64;
        let remaining = stage1_total.saturating_sub(trainer.stage_steps());
        trainer.train_steps(train_split, remaining)?;
        save_checkpoint(&trainer.checkpoint(), &out.join("ckpt_stage1.mlck"))?;
    }
    trainer.train(train_split)?;
    if trainer.cfg.loss == LossKind::Supcon {
        trainer.refit_prototypes_from(train_split)?;
    }

    save_checkpoint(&trainer.checkpoint(), &out.join("final.mlck"))?;
    write_events(&trainer.events, &out.join("events.jsonl"))?;

    let model = TrainedModel::from_trainer(&trainer)?;
    let eval_split = dataset.split(&cfg.eval.split)?;
    let report = evaluate_scorer(
        &model,
        eval_split,
        dataset.manifest.task_mode,
        &cfg.eval.precision_floors,
    )?;
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    write_atomic(&out.join("metrics.json"), text.as_bytes())?;
    cfg.write_resolved(&out)?;

    println!(
        "trained {} steps; split {}: lrap {:.4} micro_aupr {:.4}",
        trainer.step(),
        cfg.eval.split,
        report.lrap,
        report.micro_aupr
    );
    println!("outputs in {}", out.display());
    Ok(())
}

fn build_trainer(
    cfg: &RunConfig,
    dataset: &Dataset,
    resume: Option<&Path>,
) -> Result<Trainer<f64>> {
    match resume {
        Some(path) => {
            let ckpt = load_checkpoint::<f64>(path)?;
            let want = config_hash(
                &cfg.train,
                &cfg.encoder,
                dataset.manifest.dim_v,
                dataset.manifest.dim_t,
                dataset.taxonomy.num_classes(),
                dataset.manifest.task_mode,
            );
            let have = config_hash(
                &ckpt.train_config,
                &ckpt.encoder_config,
                ckpt.dim_v,
                ckpt.dim_t,
                ckpt.num_classes,
                ckpt.task_mode,
            );
            if want != have {
                return Err(Error::config(format!(
                    "resume refused: checkpoint {} was produced under a different config or dataset shape",
                    path.display()
                )));
            }
            Trainer::from_checkpoint(ckpt, dataset.taxonomy.clone())
        }
        None => Trainer::for_dataset(cfg.train.clone(), cfg.encoder.clone(), dataset),
    }
}
