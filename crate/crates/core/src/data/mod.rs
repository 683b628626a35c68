//! Datasets, class splits and episodic sampling.

mod episode;
mod loader;
mod manifest;
pub mod toy;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub use episode::{sample_episode, Episode, EpisodeSpec};
pub use loader::{build_cifar_fs_splits, build_splits, load_dataset, save_dataset};
pub use manifest::SplitManifest;
pub use toy::{generate_toy_dataset, ShapeKind, TextureKind, ToyConfig, ToyDataset};

/// Integer class identifier, an index into [`Dataset::class_names`].
pub type ClassId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: Image,
    pub label: ClassId,
    pub image_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Images of one split, indexed by class.
#[derive(Debug, Clone, Default)]
pub struct SplitData {
    images: Vec<LabeledImage>,
    by_class: BTreeMap<ClassId, Vec<usize>>,
}

impl SplitData {
    pub fn new(images: Vec<LabeledImage>) -> Self {
        let mut by_class: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
        for (i, img) in images.iter().enumerate() {
            by_class.entry(img.label).or_default().push(i);
        }
        Self { images, by_class }
    }

    pub fn images(&self) -> &[LabeledImage] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.by_class.keys().copied()
    }

    /// Indices (into [`SplitData::images`]) of every image of `class`.
    pub fn class_indices(&self, class: ClassId) -> &[usize] {
        self.by_class.get(&class).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// An immutable, fully decoded dataset with train/val/test class splits.
#[derive(Debug, Clone)]
pub struct Dataset {
    manifest: SplitManifest,
    class_names: Vec<String>,
    splits: [SplitData; 3],
}

impl Dataset {
    /// Class ids are assigned in manifest order: train, then val, then test.
    pub fn new(manifest: SplitManifest, splits: [Vec<LabeledImage>; 3]) -> Result<Self> {
        manifest.validate()?;
        let class_names = manifest.ordered_classes();
        let [tr, va, te] = splits;
        let dataset = Self {
            manifest,
            class_names,
            splits: [SplitData::new(tr), SplitData::new(va), SplitData::new(te)],
        };
        for split in Split::ALL {
            let allowed = dataset.manifest_class_ids(split);
            for img in dataset.split(split).images() {
                if !allowed.contains(&img.label) {
                    return Err(Error::Input(format!(
                        "image {} has label {} outside the {split} classes",
                        img.image_id, img.label
                    )));
                }
                img.image.ensure_finite()?;
            }
        }
        Ok(dataset)
    }

    pub fn manifest(&self) -> &SplitManifest {
        &self.manifest
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn split(&self, split: Split) -> &SplitData {
        &self.splits[split.index()]
    }

    /// Class ids the manifest assigns to `split`.
    pub fn manifest_class_ids(&self, split: Split) -> Vec<ClassId> {
        let offset = match split {
            Split::Train => 0,
            Split::Val => self.manifest.train.len(),
            Split::Test => self.manifest.train.len() + self.manifest.val.len(),
        };
        (offset..offset + self.manifest.classes(split).len()).collect()
    }

    /// Returns a copy with every image of `split` passed through `f`.
    pub fn map_split(
        &self,
        split: Split,
        f: impl Fn(&LabeledImage) -> Result<Image> + Sync,
    ) -> Result<Self> {
        let mut out = self.clone();
        let mapped = self
            .split(split)
            .images()
            .iter()
            .map(|img| {
                Ok(LabeledImage {
                    image: f(img)?,
                    label: img.label,
                    image_id: img.image_id.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.splits[split.index()] = SplitData::new(mapped);
        Ok(out)
    }
}
