//! The run configuration: one JSON document shared by every command, with
//! a single root seed fanned out to all consumers.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mlpc_core::data::{write_atomic, SynthConfig};
use mlpc_core::encoders::EncoderConfig;
use mlpc_core::trainer::TrainConfig;
use mlpc_core::{Error, Result};

fn default_floors() -> Vec<f64> {
    vec![0.8]
}

fn default_split() -> String {
    "test".to_string()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    /// Precision floors for the recall-at-precision entries.
    #[serde(default = "default_floors")]
    pub precision_floors: Vec<f64>,
    /// Split scored after training and by default in `eval`.
    #[serde(default = "default_split")]
    pub split: String,
}

impl Default for EvalOptions {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl EvalOptions {
    pub fn validate(&self) -> Result<()> {
        for &f in &self.precision_floors {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::config(format!(
                    "precision floor must lie in (0, 1], got {}",
                    f
                )));
            }
        }
        if self.split.is_empty() {
            return Err(Error::config("eval split name is empty"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed. When set it overrides the seeds embedded in the synth,
    /// encoder, and train sections, so one value pins the whole run.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {}", path.display(), e)))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {}", path.display(), e)))?;
        cfg.resolve_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fan the root seed out to every consumer. Purpose-tagged streams
    /// inside each consumer keep their draws independent.
    pub fn resolve_seed(&mut self) {
        if let Some(root) = self.seed {
            self.synth.seed = root;
            self.encoder.seed = root;
            self.train.seed = root;
            self.train.mlc.seed = root;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.encoder.validate()?;
        self.train.validate()?;
        self.eval.validate()
    }

    /// Write the fully-resolved config (defaults filled in) next to the
    /// command's outputs.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("config.resolved.json");
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}

/// Resolve an output directory: absolute paths pass through; relative
/// paths land under `MLPC_OUT_ROOT` when that is set.
pub fn resolve_out_dir(out: &Path) -> PathBuf {
    if out.is_absolute() {
        return out.to_path_buf();
    }
    match std::env::var_os("MLPC_OUT_ROOT") {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(out),
        _ => out.to_path_buf(),
    }
}
