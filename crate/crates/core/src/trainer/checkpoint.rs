//! Binary checkpoint format.
//!
//! Layout: magic `MLCK`, little-endian u32 format version, little-endian
//! u64 header length, a JSON header (configs, hash, shapes, counters),
//! then little-endian float64 payloads followed by raw label bytes for
//! the refit buffer. Loading verifies magic, version, and the config
//! hash; writes are atomic.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::io::write_atomic;
use crate::data::manifest::TaskMode;
use crate::diff::Tensor;
use crate::encoders::{EncoderConfig, ParamGroup, ParamSet};
use crate::error::{Error, Result};
use crate::prototypes::{InitMode, PrototypeSet};
use crate::scalar::Scalar;

use super::buffer::RefitBuffer;
use super::config::TrainConfig;
use super::optim::{AdamState, ParamEma};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MLCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Which part of the schedule the checkpoint was taken in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    Stage1,
    Stage2,
    Baseline,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<F: Scalar> {
    pub train_config: TrainConfig,
    pub encoder_config: EncoderConfig,
    pub dim_v: usize,
    pub dim_t: usize,
    pub num_classes: usize,
    pub task_mode: TaskMode,
    pub stage: StageTag,
    /// Global optimizer steps taken (equals the Adam step counter).
    pub step: u64,
    /// Steps taken within the current stage.
    pub stage_steps: u64,
    pub params: ParamSet<F>,
    pub ema: ParamEma<F>,
    pub opt: AdamState<F>,
    pub prototypes: PrototypeSet<F>,
    pub buffer: RefitBuffer<F>,
}

#[derive(Serialize)]
struct HashInput<'a> {
    train_config: &'a TrainConfig,
    encoder_config: &'a EncoderConfig,
    dim_v: usize,
    dim_t: usize,
    num_classes: usize,
    task_mode: TaskMode,
}

/// Hex SHA-256 of the run configuration, stored in every checkpoint and
/// compared on load and on resume.
pub fn config_hash(
    train_config: &TrainConfig,
    encoder_config: &EncoderConfig,
    dim_v: usize,
    dim_t: usize,
    num_classes: usize,
    task_mode: TaskMode,
) -> String {
    let input = HashInput { train_config, encoder_config, dim_v, dim_t, num_classes, task_mode };
    let json = serde_json::to_vec(&input).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(&json);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{:02x}", byte));
    }
    out
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    group: ParamGroup,
    decay: bool,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ProtoHeader {
    num_classes: usize,
    dim: usize,
    init_mode: InitMode,
    beta: f64,
    ridge: f64,
}

#[derive(Serialize, Deserialize)]
struct BufferHeader {
    capacity: usize,
    dim: usize,
    num_classes: usize,
    rows: usize,
    next: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config_hash: String,
    train_config: TrainConfig,
    encoder_config: EncoderConfig,
    dim_v: usize,
    dim_t: usize,
    num_classes: usize,
    task_mode: TaskMode,
    stage: StageTag,
    step: u64,
    stage_steps: u64,
    ema_updates: u64,
    params: Vec<ParamEntry>,
    prototypes: ProtoHeader,
    buffer: BufferHeader,
    payload_floats: u64,
    payload_label_bytes: u64,
}

fn push_f64s<F: Scalar>(out: &mut Vec<u8>, values: &[F]) {
    for v in values {
        out.extend_from_slice(&v.as_f64().to_le_bytes());
    }
}

struct FloatReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> FloatReader<'a> {
    fn take<F: Scalar>(&mut self, n: usize) -> Result<Vec<F>> {
        let need = n * 8;
        if self.pos + need > self.bytes.len() {
            return Err(Error::Checkpoint("payload truncated".to_string()));
        }
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let start = self.pos + i * 8;
            let raw: [u8; 8] = self.bytes[start..start + 8].try_into().expect("8 bytes");
            out.push(F::cast(f64::from_le_bytes(raw)));
        }
        self.pos += need;
        Ok(out)
    }
}

pub fn checkpoint_bytes<F: Scalar>(ckpt: &Checkpoint<F>) -> Result<Vec<u8>> {
    if ckpt.opt.t != ckpt.step {
        return Err(Error::contract(
            "save_checkpoint",
            format!("optimizer counter {} does not match step {}", ckpt.opt.t, ckpt.step),
        ));
    }
    let params: Vec<ParamEntry> = ckpt
        .params
        .iter()
        .map(|(def, t)| ParamEntry {
            name: def.name.clone(),
            group: def.group,
            decay: def.decay,
            shape: t.shape().to_vec(),
        })
        .collect();
    let total_param_floats: usize = ckpt.params.iter().map(|(_, t)| t.numel()).sum();
    let proto_floats = ckpt.prototypes.matrix.numel();
    let buffer_floats = ckpt.buffer.len() * ckpt.buffer.dim();
    let payload_floats = (4 * total_param_floats + proto_floats + buffer_floats) as u64;
    let payload_label_bytes = (ckpt.buffer.len() * ckpt.buffer.num_classes()) as u64;

    let header = Header {
        version: CHECKPOINT_VERSION,
        config_hash: config_hash(
            &ckpt.train_config,
            &ckpt.encoder_config,
            ckpt.dim_v,
            ckpt.dim_t,
            ckpt.num_classes,
            ckpt.task_mode,
        ),
        train_config: ckpt.train_config.clone(),
        encoder_config: ckpt.encoder_config.clone(),
        dim_v: ckpt.dim_v,
        dim_t: ckpt.dim_t,
        num_classes: ckpt.num_classes,
        task_mode: ckpt.task_mode,
        stage: ckpt.stage,
        step: ckpt.step,
        stage_steps: ckpt.stage_steps,
        ema_updates: ckpt.ema.updates,
        params,
        prototypes: ProtoHeader {
            num_classes: ckpt.prototypes.num_classes(),
            dim: ckpt.prototypes.dim(),
            init_mode: ckpt.prototypes.init_mode,
            beta: ckpt.prototypes.beta.as_f64(),
            ridge: ckpt.prototypes.ridge.as_f64(),
        },
        buffer: BufferHeader {
            capacity: ckpt.buffer.capacity(),
            dim: ckpt.buffer.dim(),
            num_classes: ckpt.buffer.num_classes(),
            rows: ckpt.buffer.len(),
            next: ckpt.buffer.next_slot(),
        },
        payload_floats,
        payload_label_bytes,
    };
    let header_json = serde_json::to_vec(&header)?;

    let mut bytes = Vec::with_capacity(
        12 + header_json.len() + payload_floats as usize * 8 + payload_label_bytes as usize,
    );
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for (_, t) in ckpt.params.iter() {
        push_f64s(&mut bytes, t.values());
    }
    for shadow in &ckpt.ema.shadow {
        push_f64s(&mut bytes, shadow);
    }
    for m in &ckpt.opt.m {
        push_f64s(&mut bytes, m);
    }
    for v in &ckpt.opt.v {
        push_f64s(&mut bytes, v);
    }
    push_f64s(&mut bytes, ckpt.prototypes.matrix.values());
    for (e, _) in ckpt.buffer.rows() {
        push_f64s(&mut bytes, e);
    }
    for (_, l) in ckpt.buffer.rows() {
        bytes.extend_from_slice(l);
    }
    Ok(bytes)
}

pub fn save_checkpoint<F: Scalar>(ckpt: &Checkpoint<F>, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(ckpt)?;
    write_atomic(path, &bytes)
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<Checkpoint<F>> {
    let bytes = std::fs::read(path)?;
    checkpoint_from_bytes(&bytes)
}

pub fn checkpoint_from_bytes<F: Scalar>(bytes: &[u8]) -> Result<Checkpoint<F>> {
    if bytes.len() < 16 {
        return Err(Error::Checkpoint("file too short for a checkpoint".to_string()));
    }
    if &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic (not a checkpoint file)".to_string()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {} (this build reads {})",
            version, CHECKPOINT_VERSION
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if 16 + header_len > bytes.len() {
        return Err(Error::Checkpoint("header extends past end of file".to_string()));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|e| Error::Checkpoint(format!("malformed header: {}", e)))?;
    if header.version != version {
        return Err(Error::Checkpoint(format!(
            "header version {} disagrees with container version {}",
            header.version, version
        )));
    }
    let expected_hash = config_hash(
        &header.train_config,
        &header.encoder_config,
        header.dim_v,
        header.dim_t,
        header.num_classes,
        header.task_mode,
    );
    if expected_hash != header.config_hash {
        return Err(Error::Checkpoint(format!(
            "config hash mismatch: header says {} but the stored config hashes to {}",
            header.config_hash, expected_hash
        )));
    }

    let payload = &bytes[16 + header_len..];
    let expected_len = header.payload_floats as usize * 8 + header.payload_label_bytes as usize;
    if payload.len() != expected_len {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes but the header promises {}",
            payload.len(),
            expected_len
        )));
    }
    let mut reader = FloatReader { bytes: payload, pos: 0 };

    let mut params = ParamSet::new();
    for entry in &header.params {
        let numel: usize = entry.shape.iter().product();
        let values = reader.take::<F>(numel)?;
        params.insert(
            entry.name.clone(),
            entry.group,
            entry.decay,
            Tensor::new(entry.shape.clone(), values)?,
        )?;
    }
    let mut shadow = Vec::with_capacity(header.params.len());
    for entry in &header.params {
        shadow.push(reader.take::<F>(entry.shape.iter().product())?);
    }
    let mut m = Vec::with_capacity(header.params.len());
    for entry in &header.params {
        m.push(reader.take::<F>(entry.shape.iter().product())?);
    }
    let mut v = Vec::with_capacity(header.params.len());
    for entry in &header.params {
        v.push(reader.take::<F>(entry.shape.iter().product())?);
    }
    let proto_values = reader.take::<F>(header.prototypes.num_classes * header.prototypes.dim)?;
    let prototypes = PrototypeSet {
        matrix: Tensor::new(
            vec![header.prototypes.num_classes, header.prototypes.dim],
            proto_values,
        )?,
        init_mode: header.prototypes.init_mode,
        beta: F::cast(header.prototypes.beta),
        ridge: F::cast(header.prototypes.ridge),
    };
    let mut embeddings = Vec::with_capacity(header.buffer.rows);
    for _ in 0..header.buffer.rows {
        embeddings.push(reader.take::<F>(header.buffer.dim)?);
    }
    let label_bytes = &payload[reader.pos..];
    let mut rows = Vec::with_capacity(header.buffer.rows);
    for (i, e) in embeddings.into_iter().enumerate() {
        let start = i * header.buffer.num_classes;
        let labels = label_bytes[start..start + header.buffer.num_classes].to_vec();
        rows.push((e, labels));
    }
    let buffer = RefitBuffer::from_rows(
        header.buffer.capacity,
        header.buffer.dim,
        header.buffer.num_classes,
        rows,
        header.buffer.next,
    )?;

    Ok(Checkpoint {
        train_config: header.train_config,
        encoder_config: header.encoder_config,
        dim_v: header.dim_v,
        dim_t: header.dim_t,
        num_classes: header.num_classes,
        task_mode: header.task_mode,
        stage: header.stage,
        step: header.step,
        stage_steps: header.stage_steps,
        params,
        ema: ParamEma { shadow, updates: header.ema_updates },
        opt: AdamState { m, v, t: header.step },
        prototypes,
        buffer,
    })
}
