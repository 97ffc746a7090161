//! Dataset manifest: the single JSON document describing a dataset directory.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::taxonomy::ClassTaxonomy;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    MultiLabel,
    SingleLabel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenFormat {
    Jsonl,
    Packed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitInfo {
    pub count: usize,
    pub token_format: TokenFormat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub task_mode: TaskMode,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub superclass_of: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_superclasses: Option<usize>,
    pub dim_v: usize,
    pub dim_t: usize,
    pub splits: BTreeMap<String, SplitInfo>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != MANIFEST_VERSION {
            return Err(Error::Data(format!(
                "manifest format_version {} unsupported (this build reads {})",
                self.format_version, MANIFEST_VERSION
            )));
        }
        if self.num_classes != self.class_names.len() {
            return Err(Error::Data(format!(
                "manifest num_classes {} but {} class names listed",
                self.num_classes,
                self.class_names.len()
            )));
        }
        if self.dim_v == 0 || self.dim_t == 0 {
            return Err(Error::Data("manifest modality dims must be positive".into()));
        }
        self.taxonomy()?;
        Ok(())
    }

    pub fn taxonomy(&self) -> Result<ClassTaxonomy> {
        match (&self.superclass_of, self.num_superclasses) {
            (Some(map), Some(n)) => {
                ClassTaxonomy::with_hierarchy(self.class_names.clone(), map.clone(), n)
            }
            (None, None) => ClassTaxonomy::new(self.class_names.clone()),
            _ => Err(Error::Data(
                "manifest must set superclass_of and num_superclasses together".into(),
            )),
        }
    }
}
