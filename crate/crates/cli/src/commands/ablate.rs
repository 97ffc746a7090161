//! `mlpc ablate`: cross-product sweeps over loss, prototype init, and
//! fusion depth, with paired seeds per cell and a mean ± stdev summary.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use mlpc_core::data::{load_dataset, write_atomic, Dataset};
use mlpc_core::eval::evaluate_scorer;
use mlpc_core::prototypes::InitMode;
use mlpc_core::rng;
use mlpc_core::trainer::{LossKind, TrainedModel, Trainer};
use mlpc_core::{Error, Result};

use crate::config::{resolve_out_dir, RunConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
struct Cell {
    loss: LossKind,
    proto: InitMode,
    fusion_layers: usize,
}

#[derive(Debug)]
struct Grid {
    losses: Vec<LossKind>,
    protos: Vec<InitMode>,
    fusion_layers: Vec<usize>,
    seeds: u64,
}

impl Grid {
    fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &loss in &self.losses {
            for &proto in &self.protos {
                for &fusion_layers in &self.fusion_layers {
                    out.push(Cell { loss, proto, fusion_layers });
                }
            }
        }
        out
    }
}

/// Enum tag as it appears in configs (serde snake_case).
fn tag<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|j| j.as_str().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown".to_string())
}

fn parse_variant<T: serde::de::DeserializeOwned>(axis: &str, name: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(name.trim().to_string()))
        .map_err(|_| Error::config(format!("unknown {} value {:?}", axis, name)))
}

fn parse_grid(specs: &[String], cfg: &RunConfig) -> Result<Grid> {
    let mut grid = Grid {
        losses: vec![cfg.train.loss],
        protos: vec![cfg.train.prototype_init],
        fusion_layers: vec![cfg.encoder.layers_f],
        seeds: 1,
    };
    for spec in specs {
        let (axis, values) = spec
            .split_once('=')
            .ok_or_else(|| Error::config(format!("grid entry {:?} is not AXIS=V1,V2", spec)))?;
        match axis {
            "losses" => {
                grid.losses = values
                    .split(',')
                    .map(|v| parse_variant::<LossKind>("losses", v))
                    .collect::<Result<_>>()?
            }
            "protos" => {
                grid.protos = values
                    .split(',')
                    .map(|v| parse_variant::<InitMode>("protos", v))
                    .collect::<Result<_>>()?
            }
            "fusion_layers" => {
                grid.fusion_layers = values
                    .split(',')
                    .map(|v| {
                        v.trim().parse::<usize>().map_err(|_| {
                            Error::config(format!("bad fusion_layers value {:?}", v))
                        })
                    })
                    .collect::<Result<_>>()?
            }
            "seeds" => {
                grid.seeds = values
                    .trim()
                    .parse()
                    .map_err(|_| Error::config(format!("bad seeds value {:?}", values)))?
            }
            other => {
                return Err(Error::config(format!(
                    "unknown grid axis {:?}; expected losses, protos, fusion_layers, or seeds",
                    other
                )))
            }
        }
    }
    if grid.seeds < 1 {
        return Err(Error::config("seeds must be at least 1"));
    }
    if grid.losses.is_empty() || grid.protos.is_empty() || grid.fusion_layers.is_empty() {
        return Err(Error::config("grid axes may not be empty"));
    }
    Ok(grid)
}

struct RunMetrics {
    lrap: f64,
    micro_aupr: f64,
    recall_at_p: f64,
}

fn specialize(cfg: &RunConfig, cell: Cell, seed: u64) -> RunConfig {
    let mut c = cfg.clone();
    c.seed = Some(seed);
    c.resolve_seed();
    c.train.loss = cell.loss;
    c.train.prototype_init = cell.proto;
    c.encoder.layers_f = cell.fusion_layers;
    c
}

fn run_one(cfg: &RunConfig, dataset: &Dataset, dir: &Path) -> Result<RunMetrics> {
    fs::create_dir_all(dir)?;
    let mut trainer = Trainer::<f64>::for_dataset(cfg.train.clone(), cfg.encoder.clone(), dataset)?;
    let train_split = dataset.split("train")?;
    trainer.train(train_split)?;
    if cfg.train.loss == LossKind::Supcon {
        trainer.refit_prototypes_from(train_split)?;
    }
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
    write_atomic(&dir.join("metrics.json"), text.as_bytes())?;
    cfg.write_resolved(dir)?;
    Ok(RunMetrics {
        lrap: report.lrap,
        micro_aupr: report.micro_aupr,
        recall_at_p: report.recall_at_precision.first().map(|e| e.recall).unwrap_or(0.0),
    })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn cell_dir(out: &Path, cell: Cell) -> PathBuf {
    out.join("cells").join(format!(
        "{}_{}_f{}",
        tag(&cell.loss),
        tag(&cell.proto),
        cell.fusion_layers
    ))
}

pub fn run(config: &Path, data: &Path, grid_specs: &[String], out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let out = resolve_out_dir(out);
    fs::create_dir_all(&out)?;
    let dataset = load_dataset(&data.join("manifest.json"))?;
    let grid = parse_grid(grid_specs, &cfg)?;
    let cells = grid.cells();
    let seeds: Vec<u64> = (0..grid.seeds)
        .map(|i| rng::derive_seed(cfg.train.seed, "ablate_seed", i))
        .collect();

    let tasks: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|ci| (0..seeds.len()).map(move |si| (ci, si)))
        .collect();
    let outcomes: Vec<std::result::Result<RunMetrics, String>> = tasks
        .par_iter()
        .map(|&(ci, si)| {
            let run_cfg = specialize(&cfg, cells[ci], seeds[si]);
            let dir = cell_dir(&out, cells[ci]).join(format!("seed{}", si));
            run_one(&run_cfg, &dataset, &dir).map_err(|e| e.to_string())
        })
        .collect();

    let mut runs_csv = String::from(
        "loss,prototype_init,fusion_layers,seed_index,seed,lrap,micro_aupr,recall_at_p,status\n",
    );
    for (&(ci, si), outcome) in tasks.iter().zip(&outcomes) {
        let cell = cells[ci];
        match outcome {
            Ok(m) => runs_csv.push_str(&format!(
                "{},{},{},{},{},{},{},{},ok\n",
                tag(&cell.loss),
                tag(&cell.proto),
                cell.fusion_layers,
                si,
                seeds[si],
                m.lrap,
                m.micro_aupr,
                m.recall_at_p
            )),
            Err(e) => runs_csv.push_str(&format!(
                "{},{},{},{},{},,,,\"{}\"\n",
                tag(&cell.loss),
                tag(&cell.proto),
                cell.fusion_layers,
                si,
                seeds[si],
                e.replace('"', "'")
            )),
        }
    }
    write_atomic(&out.join("runs.csv"), runs_csv.as_bytes())?;

    let mut summary_csv = String::from(
        "loss,prototype_init,fusion_layers,seeds_ok,lrap_mean,lrap_std,micro_aupr_mean,micro_aupr_std,recall_at_p_mean,recall_at_p_std,status\n",
    );
    let mut report = String::new();
    report.push_str(&format!(
        "ablation over {} seed(s), eval split {:?}\n\n",
        grid.seeds, cfg.eval.split
    ));
    report.push_str(&format!(
        "{:<8} {:<12} {:>8}   {:<17} {:<17} {:<17}\n",
        "loss", "proto", "fusion", "LRAP", "micro-AUPR", "R@P"
    ));
    for (ci, &cell) in cells.iter().enumerate() {
        let mut lrap = Vec::new();
        let mut aupr = Vec::new();
        let mut rp = Vec::new();
        let mut first_err: Option<&String> = None;
        for (&(tci, _), outcome) in tasks.iter().zip(&outcomes) {
            if tci != ci {
                continue;
            }
            match outcome {
                Ok(m) => {
                    lrap.push(m.lrap);
                    aupr.push(m.micro_aupr);
                    rp.push(m.recall_at_p);
                }
                Err(e) => first_err = first_err.or(Some(e)),
            }
        }
        let (lm, ls) = mean_std(&lrap);
        let (am, asd) = mean_std(&aupr);
        let (rm, rs) = mean_std(&rp);
        let status = match first_err {
            None => "ok".to_string(),
            Some(e) => format!("\"{}\"", e.replace('"', "'")),
        };
        summary_csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            tag(&cell.loss),
            tag(&cell.proto),
            cell.fusion_layers,
            lrap.len(),
            lm,
            ls,
            am,
            asd,
            rm,
            rs,
            status
        ));
        let fmt = |m: f64, s: f64| {
            if m.is_nan() {
                "failed".to_string()
            } else {
                format!("{:.4} ± {:.4}", m, s)
            }
        };
        report.push_str(&format!(
            "{:<8} {:<12} {:>8}   {:<17} {:<17} {:<17}\n",
            tag(&cell.loss),
            tag(&cell.proto),
            cell.fusion_layers,
            fmt(lm, ls),
            fmt(am, asd),
            fmt(rm, rs)
        ));
    }
    let failures = outcomes.iter().filter(|o| o.is_err()).count();
    if failures > 0 {
        report.push_str(&format!("\n{} run(s) failed; see runs.csv\n", failures));
    }
    write_atomic(&out.join("ablation.csv"), summary_csv.as_bytes())?;
    write_atomic(&out.join("report.txt"), report.as_bytes())?;
    cfg.write_resolved(&out)?;
    print!("{}", report);
    println!("outputs in {}", out.display());
    Ok(())
}
