//! `mlpc eval`: score a checkpoint on a dataset split and write metrics,
//! PR curves, and (optionally) the modality-drop robustness sweep.

use std::fs;
use std::path::Path;

use mlpc_core::data::{load_dataset, write_atomic, Dataset, Modality};
use mlpc_core::eval::{evaluate_scorer, pr_curves_csv, robustness_csv, robustness_eval};
use mlpc_core::trainer::{load_checkpoint, Checkpoint, TrainedModel, Trainer};
use mlpc_core::{Error, Result};

use crate::config::resolve_out_dir;

pub struct EvalArgs<'a> {
    pub ckpt: &'a Path,
    pub data: &'a Path,
    pub out: &'a Path,
    pub split: &'a str,
    pub drop_modality: Option<Modality>,
    pub fractions: Vec<f64>,
    pub precision_floors: Vec<f64>,
}

pub fn run(args: &EvalArgs) -> Result<()> {
    let out = resolve_out_dir(args.out);
    fs::create_dir_all(&out)?;
    let dataset = load_dataset(&args.data.join("manifest.json"))?;
    let ckpt = load_checkpoint::<f64>(args.ckpt)?;
    check_compatible(&ckpt, &dataset)?;

    let seed = ckpt.train_config.seed;
    let trainer = Trainer::from_checkpoint(ckpt, dataset.taxonomy.clone())?;
    let model = TrainedModel::from_trainer(&trainer)?;
    let samples = dataset.split(args.split)?;

    let report = evaluate_scorer(
        &model,
        samples,
        dataset.manifest.task_mode,
        &args.precision_floors,
    )?;
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    write_atomic(&out.join("metrics.json"), text.as_bytes())?;
    write_atomic(&out.join("pr_curves.csv"), pr_curves_csv(&report).as_bytes())?;

    if let Some(modality) = args.drop_modality {
        let rows = robustness_eval(
            &model,
            samples,
            dataset.manifest.task_mode,
            &args.precision_floors,
            modality,
            &args.fractions,
            seed,
        )?;
        write_atomic(&out.join("robustness.csv"), robustness_csv(&rows).as_bytes())?;
    }

    println!(
        "split {}: lrap {:.4} micro_aupr {:.4} macro_aupr {:.4}",
        args.split, report.lrap, report.micro_aupr, report.macro_aupr
    );
    println!("outputs in {}", out.display());
    Ok(())
}

fn check_compatible(ckpt: &Checkpoint<f64>, dataset: &Dataset) -> Result<()> {
    let m = &dataset.manifest;
    if ckpt.num_classes != dataset.taxonomy.num_classes()
        || ckpt.dim_v != m.dim_v
        || ckpt.dim_t != m.dim_t
        || ckpt.task_mode != m.task_mode
    {
        return Err(Error::Data(format!(
            "checkpoint expects {} classes, dims v={} t={}, {:?}; dataset has {} classes, dims v={} t={}, {:?}",
            ckpt.num_classes,
            ckpt.dim_v,
            ckpt.dim_t,
            ckpt.task_mode,
            dataset.taxonomy.num_classes(),
            m.dim_v,
            m.dim_t,
            m.task_mode
        )));
    }
    Ok(())
}

pub fn parse_modality(s: &str) -> Result<Modality> {
    match s {
        "v" => Ok(Modality::V),
        "t" => Ok(Modality::T),
        other => Err(Error::config(format!(
            "unknown modality {:?}; expected \"v\" or \"t\"",
            other
        ))),
    }
}

pub fn parse_fractions(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|part| {
            let f: f64 = part
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("bad fraction {:?}", part)))?;
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::config(format!(
                    "fractions must lie in [0, 1], got {}",
                    f
                )));
            }
            Ok(f)
        })
        .collect()
}
