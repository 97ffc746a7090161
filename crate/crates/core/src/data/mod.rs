//! Dataset representation, on-disk formats, and the synthetic generator.

pub mod io;
pub mod labels;
pub mod manifest;
pub mod sample;
pub mod synth;
pub mod taxonomy;

pub use io::{load_dataset, save_dataset, write_atomic, Dataset};
pub use labels::LabelMatrix;
pub use manifest::{DatasetManifest, SplitInfo, TaskMode, TokenFormat};
pub use sample::{drop_modality_tokens, Modality, MultiModalSample};
pub use synth::{generate_synthetic, nearest_signature_hit, SynthConfig, SynthOutput};
pub use taxonomy::ClassTaxonomy;
