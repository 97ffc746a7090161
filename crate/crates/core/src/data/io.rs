//! On-disk dataset formats and the load/save round trip.
//!
//! A dataset directory holds `manifest.json` plus, per split:
//!
//! * `{split}_labels.csv` — one line per sample: `id,name,name,...`
//!   (no header; zero labels = bare id; class names may not contain commas)
//! * `{split}_tokens_v.jsonl` / `{split}_tokens_t.jsonl` — one JSON record
//!   per sample: `{"id": ..., "tokens": [[...]]}`
//! * or, in packed mode, `{split}_tokens_{m}.bin` (magic `MLPC`, u32
//!   version, then per record u32 T, u32 D, T*D little-endian f32) with a
//!   `{split}_tokens_{m}.idx.json` byte-offset index. Values are widened to
//!   f64 in memory, so a packed round trip is exact once values have passed
//!   through f32.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};

use super::labels::LabelMatrix;
use super::manifest::{DatasetManifest, TokenFormat};
use super::sample::{Modality, MultiModalSample};
use super::taxonomy::ClassTaxonomy;

pub const PACKED_MAGIC: &[u8; 4] = b"MLPC";
pub const PACKED_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub taxonomy: ClassTaxonomy,
    pub splits: BTreeMap<String, Vec<MultiModalSample>>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[MultiModalSample]> {
        self.splits
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Data(format!("dataset has no split {:?}", name)))
    }

    pub fn label_matrix(&self, split: &str) -> Result<LabelMatrix> {
        let samples = self.split(split)?;
        let k = self.taxonomy.num_classes();
        let mut entries = Vec::with_capacity(samples.len() * k);
        for s in samples {
            entries.extend_from_slice(&s.labels);
        }
        LabelMatrix::new(samples.len(), k, entries)
    }
}

/// Write a file atomically (temp in the same directory, then rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

// ── labels csv ───────────────────────────────────────────────────────

fn labels_csv(samples: &[MultiModalSample], taxonomy: &ClassTaxonomy) -> Result<String> {
    let mut out = String::new();
    for s in samples {
        if s.id.contains(',') || s.id.contains('\n') {
            return Err(Error::Data(format!("sample id {:?} contains a reserved character", s.id)));
        }
        out.push_str(&s.id);
        for j in s.positives() {
            out.push(',');
            out.push_str(&taxonomy.class_names()[j]);
        }
        out.push('\n');
    }
    Ok(out)
}

fn parse_labels_csv(
    path: &Path,
    taxonomy: &ClassTaxonomy,
) -> Result<Vec<(String, Vec<u8>)>> {
    let file = fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {}", path.display(), e)))?;
    let mut rows = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let id = fields.next().unwrap_or_default().to_string();
        if id.is_empty() {
            return Err(Error::Data(format!(
                "{}: line {} has an empty id",
                path.display(),
                lineno + 1
            )));
        }
        let mut labels = vec![0u8; taxonomy.num_classes()];
        for name in fields {
            let j = taxonomy.class_index(name).ok_or_else(|| {
                Error::Data(format!(
                    "{}: sample {:?} references unknown class {:?}",
                    path.display(),
                    id,
                    name
                ))
            })?;
            labels[j] = 1;
        }
        rows.push((id, labels));
    }
    Ok(rows)
}

// ── tokens jsonl ─────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct TokenRecord {
    id: String,
    tokens: Vec<Vec<f64>>,
}

fn tokens_jsonl(samples: &[MultiModalSample], modality: Modality) -> Result<String> {
    let mut out = String::new();
    for s in samples {
        let t = s.tokens(modality).ok_or_else(|| {
            Error::Data(format!(
                "sample {:?}: cannot save with modality {} absent",
                s.id, modality
            ))
        })?;
        if !t.all_finite() {
            return Err(Error::Data(format!("sample {:?} has non-finite token values", s.id)));
        }
        let rec = TokenRecord {
            id: s.id.clone(),
            tokens: (0..t.nrows()).map(|r| t.row(r).to_vec()).collect(),
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    Ok(out)
}

fn parse_tokens_jsonl(path: &Path, dim: usize) -> Result<BTreeMap<String, Tensor<f64>>> {
    let file = fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {}", path.display(), e)))?;
    let mut out = BTreeMap::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let rec: TokenRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!("{}: line {} is not a token record: {}", path.display(), lineno + 1, e))
        })?;
        let t = rec.tokens.len();
        if t == 0 {
            return Err(Error::Data(format!(
                "{}: sample {:?} has an empty token sequence",
                path.display(),
                rec.id
            )));
        }
        let mut values = Vec::with_capacity(t * dim);
        for row in &rec.tokens {
            if row.len() != dim {
                return Err(Error::Data(format!(
                    "{}: sample {:?} has a token of width {}, manifest says {}",
                    path.display(),
                    rec.id,
                    row.len(),
                    dim
                )));
            }
            values.extend_from_slice(row);
        }
        let tensor = Tensor::new(vec![t, dim], values)?;
        if out.insert(rec.id.clone(), tensor).is_some() {
            return Err(Error::Data(format!(
                "{}: duplicate id {:?}",
                path.display(),
                rec.id
            )));
        }
    }
    Ok(out)
}

// ── tokens packed ────────────────────────────────────────────────────

fn tokens_packed(
    samples: &[MultiModalSample],
    modality: Modality,
) -> Result<(Vec<u8>, BTreeMap<String, u64>)> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(PACKED_MAGIC);
    bytes.extend_from_slice(&PACKED_VERSION.to_le_bytes());
    let mut index = BTreeMap::new();
    for s in samples {
        let t = s.tokens(modality).ok_or_else(|| {
            Error::Data(format!(
                "sample {:?}: cannot save with modality {} absent",
                s.id, modality
            ))
        })?;
        index.insert(s.id.clone(), bytes.len() as u64);
        bytes.extend_from_slice(&(t.nrows() as u32).to_le_bytes());
        bytes.extend_from_slice(&(t.ncols() as u32).to_le_bytes());
        for &v in t.values() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok((bytes, index))
}

fn parse_tokens_packed(
    bin_path: &Path,
    idx_path: &Path,
    dim: usize,
) -> Result<BTreeMap<String, Tensor<f64>>> {
    let index: BTreeMap<String, u64> = serde_json::from_slice(&fs::read(idx_path).map_err(
        |e| Error::Data(format!("cannot open {}: {}", idx_path.display(), e)),
    )?)?;
    let mut file = fs::File::open(bin_path)
        .map_err(|e| Error::Data(format!("cannot open {}: {}", bin_path.display(), e)))?;
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != PACKED_MAGIC {
        return Err(Error::Data(format!("{}: bad magic bytes", bin_path.display())));
    }
    let mut ver = [0u8; 4];
    file.read_exact(&mut ver)?;
    let version = u32::from_le_bytes(ver);
    if version != PACKED_VERSION {
        return Err(Error::Data(format!(
            "{}: packed version {} unsupported",
            bin_path.display(),
            version
        )));
    }
    let mut out = BTreeMap::new();
    for (id, &offset) in &index {
        file.seek(SeekFrom::Start(offset))?;
        let mut hdr = [0u8; 8];
        file.read_exact(&mut hdr)?;
        let t = u32::from_le_bytes(hdr[0..4].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(hdr[4..8].try_into().unwrap()) as usize;
        if d != dim {
            return Err(Error::Data(format!(
                "{}: sample {:?} has token width {}, manifest says {}",
                bin_path.display(),
                id,
                d,
                dim
            )));
        }
        if t == 0 {
            return Err(Error::Data(format!(
                "{}: sample {:?} has an empty token sequence",
                bin_path.display(),
                id
            )));
        }
        let mut buf = vec![0u8; t * d * 4];
        file.read_exact(&mut buf)?;
        let values: Vec<f64> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        out.insert(id.clone(), Tensor::new(vec![t, d], values)?);
    }
    Ok(out)
}

// ── dataset-level save / load ────────────────────────────────────────

fn split_paths(dir: &Path, split: &str, format: TokenFormat) -> (PathBuf, PathBuf, PathBuf) {
    let labels = dir.join(format!("{}_labels.csv", split));
    let (v, t) = match format {
        TokenFormat::Jsonl => (
            dir.join(format!("{}_tokens_v.jsonl", split)),
            dir.join(format!("{}_tokens_t.jsonl", split)),
        ),
        TokenFormat::Packed => (
            dir.join(format!("{}_tokens_v.bin", split)),
            dir.join(format!("{}_tokens_t.bin", split)),
        ),
    };
    (labels, v, t)
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    dataset.manifest.validate()?;
    fs::create_dir_all(dir)?;
    for (split, info) in &dataset.manifest.splits {
        let samples = dataset.split(split)?;
        if samples.len() != info.count {
            return Err(Error::Data(format!(
                "split {:?} holds {} samples but manifest says {}",
                split,
                samples.len(),
                info.count
            )));
        }
        let (labels_path, v_path, t_path) = split_paths(dir, split, info.token_format);
        write_atomic(&labels_path, labels_csv(samples, &dataset.taxonomy)?.as_bytes())?;
        match info.token_format {
            TokenFormat::Jsonl => {
                write_atomic(&v_path, tokens_jsonl(samples, Modality::V)?.as_bytes())?;
                write_atomic(&t_path, tokens_jsonl(samples, Modality::T)?.as_bytes())?;
            }
            TokenFormat::Packed => {
                for (path, modality) in [(&v_path, Modality::V), (&t_path, Modality::T)] {
                    let (bytes, index) = tokens_packed(samples, modality)?;
                    write_atomic(path, &bytes)?;
                    let idx_path = path.with_extension("idx.json");
                    write_atomic(&idx_path, serde_json::to_string_pretty(&index)?.as_bytes())?;
                }
            }
        }
    }
    write_atomic(
        &dir.join("manifest.json"),
        serde_json::to_string_pretty(&dataset.manifest)?.as_bytes(),
    )?;
    Ok(())
}

pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let bytes = fs::read(manifest_path)
        .map_err(|e| Error::Data(format!("cannot open {}: {}", manifest_path.display(), e)))?;
    let manifest: DatasetManifest = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Data(format!("{}: {}", manifest_path.display(), e)))?;
    manifest.validate()?;
    let taxonomy = manifest.taxonomy()?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let mut splits = BTreeMap::new();
    for (split, info) in &manifest.splits {
        let (labels_path, v_path, t_path) = split_paths(dir, split, info.token_format);
        let labels = parse_labels_csv(&labels_path, &taxonomy)?;
        let (tokens_v, tokens_t) = match info.token_format {
            TokenFormat::Jsonl => (
                parse_tokens_jsonl(&v_path, manifest.dim_v)?,
                parse_tokens_jsonl(&t_path, manifest.dim_t)?,
            ),
            TokenFormat::Packed => (
                parse_tokens_packed(&v_path, &v_path.with_extension("idx.json"), manifest.dim_v)?,
                parse_tokens_packed(&t_path, &t_path.with_extension("idx.json"), manifest.dim_t)?,
            ),
        };

        let mut seen = BTreeMap::new();
        for (id, row) in labels {
            if seen.insert(id.clone(), row).is_some() {
                return Err(Error::Data(format!(
                    "{}: duplicate id {:?}",
                    labels_path.display(),
                    id
                )));
            }
        }
        if seen.len() != info.count {
            return Err(Error::Data(format!(
                "split {:?} has {} label rows but manifest says {}",
                split,
                seen.len(),
                info.count
            )));
        }
        for (file, map) in [(&v_path, &tokens_v), (&t_path, &tokens_t)] {
            for id in map.keys() {
                if !seen.contains_key(id) {
                    return Err(Error::Data(format!(
                        "{}: id {:?} has tokens but no label row",
                        file.display(),
                        id
                    )));
                }
            }
        }

        let mut samples = Vec::with_capacity(seen.len());
        for (id, label_row) in seen {
            let tv = tokens_v.get(&id).cloned().ok_or_else(|| {
                Error::Data(format!("{}: sample {:?} missing", v_path.display(), id))
            })?;
            let tt = tokens_t.get(&id).cloned().ok_or_else(|| {
                Error::Data(format!("{}: sample {:?} missing", t_path.display(), id))
            })?;
            samples.push(MultiModalSample::new(id, Some(tv), Some(tt), label_row)?);
        }
        // BTreeMap iteration already yields ascending id order.
        splits.insert(split.clone(), samples);
    }

    Ok(Dataset { manifest, taxonomy, splits })
}
