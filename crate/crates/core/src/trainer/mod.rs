//! Two-stage training with alternating prototype refinement, plus the
//! baseline schedules, AdamW, parameter EMA, and checkpointing.

mod buffer;
mod checkpoint;
mod config;
mod engine;
mod model;
mod optim;

pub use buffer::RefitBuffer;
pub use checkpoint::{
    checkpoint_bytes, checkpoint_from_bytes, config_hash, load_checkpoint, save_checkpoint,
    Checkpoint, StageTag, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{LossKind, RefitSource, TrainConfig};
pub use engine::{events_jsonl, write_events, TrainEvent, Trainer};
pub use model::{ScoringRule, TrainedModel};
pub use optim::{AdamState, ParamEma};
