//! `mlpc synth`: materialize a synthetic dataset and print its shape.

use std::fs;
use std::path::Path;

use mlpc_core::data::{generate_synthetic, Dataset};
use mlpc_core::Result;

use crate::config::{resolve_out_dir, RunConfig};

pub fn run(config: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let out = resolve_out_dir(out);
    fs::create_dir_all(&out)?;
    let output = generate_synthetic(&cfg.synth, &out)?;
    cfg.write_resolved(&out)?;
    print_summary(&output.dataset)?;
    println!("dataset written to {}", out.display());
    Ok(())
}

fn print_summary(dataset: &Dataset) -> Result<()> {
    let k = dataset.taxonomy.num_classes();
    for (split, info) in &dataset.manifest.splits {
        println!("split {}: {} samples", split, info.count);
    }
    let labels = dataset.label_matrix("train")?;
    let names = dataset.taxonomy.class_names();
    let width = names.iter().map(|n| n.len()).max().unwrap_or(4).max(4);

    println!("label co-occurrence (train; diagonal = class counts):");
    let mut counts = vec![vec![0usize; k]; k];
    for i in 0..labels.num_samples() {
        let pos = labels.positives(i);
        for &a in &pos {
            for &b in &pos {
                counts[a][b] += 1;
            }
        }
    }
    print!("{:>width$}", "", width = width + 1);
    for name in names {
        print!(" {:>width$}", name, width = width);
    }
    println!();
    for (a, name) in names.iter().enumerate() {
        print!("{:>width$} ", name, width = width);
        for b in 0..k {
            print!(" {:>width$}", counts[a][b], width = width);
        }
        println!();
    }
    if dataset.taxonomy.has_hierarchy() {
        println!(
            "hierarchy: {} superclasses over {} classes",
            dataset.taxonomy.num_superclasses(),
            k
        );
    }
    Ok(())
}
