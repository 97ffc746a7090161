//! Class names and the optional 2-level superclass hierarchy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTaxonomy {
    class_names: Vec<String>,
    /// `superclass_of[k]` = superclass index of class k, when a hierarchy exists.
    superclass_of: Option<Vec<usize>>,
    num_superclasses: usize,
}

impl ClassTaxonomy {
    pub fn new(class_names: Vec<String>) -> Result<Self> {
        validate_names(&class_names)?;
        Ok(ClassTaxonomy { class_names, superclass_of: None, num_superclasses: 0 })
    }

    pub fn with_hierarchy(
        class_names: Vec<String>,
        superclass_of: Vec<usize>,
        num_superclasses: usize,
    ) -> Result<Self> {
        validate_names(&class_names)?;
        if superclass_of.len() != class_names.len() {
            return Err(Error::Taxonomy(format!(
                "superclass map covers {} classes but there are {}",
                superclass_of.len(),
                class_names.len()
            )));
        }
        if num_superclasses == 0 {
            return Err(Error::Taxonomy("hierarchy declared with zero superclasses".into()));
        }
        let mut child_count = vec![0usize; num_superclasses];
        for (k, &s) in superclass_of.iter().enumerate() {
            if s >= num_superclasses {
                return Err(Error::Taxonomy(format!(
                    "class {} maps to superclass {} but only {} exist",
                    k, s, num_superclasses
                )));
            }
            child_count[s] += 1;
        }
        if let Some(empty) = child_count.iter().position(|&c| c == 0) {
            return Err(Error::Taxonomy(format!("superclass {} has no children", empty)));
        }
        Ok(ClassTaxonomy { class_names, superclass_of: Some(superclass_of), num_superclasses })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|n| n == name)
    }

    pub fn has_hierarchy(&self) -> bool {
        self.superclass_of.is_some()
    }

    pub fn superclass_of(&self) -> Option<&[usize]> {
        self.superclass_of.as_deref()
    }

    pub fn num_superclasses(&self) -> usize {
        self.num_superclasses
    }

    /// Child class indices of superclass `s`, in ascending order.
    pub fn children(&self, s: usize) -> Vec<usize> {
        match &self.superclass_of {
            Some(map) => map
                .iter()
                .enumerate()
                .filter(|(_, &sc)| sc == s)
                .map(|(k, _)| k)
                .collect(),
            None => Vec::new(),
        }
    }

    /// Project a class label row onto superclass labels (1 if any child is
    /// positive).
    pub fn superclass_labels(&self, labels: &[u8]) -> Result<Vec<u8>> {
        let map = self
            .superclass_of
            .as_ref()
            .ok_or_else(|| Error::Taxonomy("no hierarchy defined".into()))?;
        if labels.len() != self.class_names.len() {
            return Err(Error::Taxonomy(format!(
                "label row has {} entries for {} classes",
                labels.len(),
                self.class_names.len()
            )));
        }
        let mut out = vec![0u8; self.num_superclasses];
        for (k, &y) in labels.iter().enumerate() {
            if y == 1 {
                out[map[k]] = 1;
            }
        }
        Ok(out)
    }
}

fn validate_names(names: &[String]) -> Result<()> {
    if names.is_empty() {
        return Err(Error::Taxonomy("no classes".into()));
    }
    for (i, n) in names.iter().enumerate() {
        if n.is_empty() {
            return Err(Error::Taxonomy(format!("class {} has an empty name", i)));
        }
        if n.contains(',') || n.contains('\n') {
            return Err(Error::Taxonomy(format!(
                "class name {:?} contains a comma or newline, which the label format reserves",
                n
            )));
        }
    }
    for i in 0..names.len() {
        for j in i + 1..names.len() {
            if names[i] == names[j] {
                return Err(Error::Taxonomy(format!("duplicate class name {:?}", names[i])));
            }
        }
    }
    Ok(())
}
