use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Split;
use crate::error::{Error, Result};

/// Disjoint train/val/test class lists, persisted as JSON.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub source: String,
    pub seed: u64,
}

impl SplitManifest {
    pub fn classes(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Train, val and test classes concatenated.
    pub fn ordered_classes(&self) -> Vec<String> {
        self.train
            .iter()
            .chain(&self.val)
            .chain(&self.test)
            .cloned()
            .collect()
    }

    /// Checks pairwise disjointness and the absence of duplicates.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for split in Split::ALL {
            for class in self.classes(split) {
                if !seen.insert(class.as_str()) {
                    return Err(Error::Config(format!(
                        "class `{class}` appears more than once in the split manifest"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::ingestion(path, format!("cannot read manifest: {e}")))?;
        let manifest: Self = serde_json::from_str(&text)
            .map_err(|e| Error::ingestion(path, format!("malformed manifest: {e}")))?;
        manifest.validate()?;
        Ok(manifest)
    }
}
