use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use super::{Dataset, LabeledImage, Split, SplitManifest};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::rng_for;

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn sorted_dirs(path: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(path)
        .map_err(|e| Error::ingestion(path, format!("cannot list directory: {e}")))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            dirs.push(entry.path());
        }
    }
    dirs.sort();
    Ok(dirs)
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// `class name -> class directories` over every `<root>/<split>/<class>`.
fn scan_classes(root: &Path) -> Result<BTreeMap<String, Vec<PathBuf>>> {
    if !root.is_dir() {
        return Err(Error::ingestion(root, "dataset root does not exist"));
    }
    let mut classes: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
    for split_dir in sorted_dirs(root)? {
        for class_dir in sorted_dirs(&split_dir)? {
            classes.entry(file_name(&class_dir)).or_default().push(class_dir);
        }
    }
    Ok(classes)
}

/// Seeded random partition of the classes found under `root` into
/// `counts = (train, val, test)`; the three sizes must cover every class.
pub fn build_splits(
    root: &Path,
    counts: (usize, usize, usize),
    seed: u64,
    source: &str,
) -> Result<SplitManifest> {
    let classes = scan_classes(root)?;
    let total = counts.0 + counts.1 + counts.2;
    if classes.len() != total {
        return Err(Error::ingestion(
            root,
            format!(
                "expected {total} class directories under <root>/<split>/, found {}",
                classes.len()
            ),
        ));
    }
    let mut names: Vec<String> = classes.into_keys().collect();
    names.shuffle(&mut rng_for(seed, &[0x5EED]));
    let test = names.split_off(counts.0 + counts.1);
    let val = names.split_off(counts.0);
    let manifest = SplitManifest {
        train: names,
        val,
        test,
        source: source.to_string(),
        seed,
    };
    manifest.validate()?;
    Ok(manifest)
}

/// CIFAR-FS: 64/16/20 random class split of CIFAR-100, persisted next to the
/// data as `cifar_fs_seed<seed>.json`.
pub fn build_cifar_fs_splits(cifar100_root: &Path, seed: u64) -> Result<SplitManifest> {
    let manifest = build_splits(cifar100_root, (64, 16, 20), seed, "cifar100")?;
    manifest.save(&cifar100_root.join(format!("cifar_fs_seed{seed}.json")))?;
    Ok(manifest)
}

fn list_images(class_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(class_dir)
        .map_err(|e| Error::ingestion(class_dir, format!("cannot list directory: {e}")))?
    {
        let path = entry?.path();
        let ext = path
            .extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default();
        if path.is_file() && IMAGE_EXTENSIONS.contains(&ext.as_str()) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Decodes every image of every manifest class found under `root`.
pub fn load_dataset(root: &Path, manifest: &SplitManifest) -> Result<Dataset> {
    manifest.validate()?;
    let on_disk = scan_classes(root)?;
    let ordered = manifest.ordered_classes();
    let missing: Vec<&str> = ordered
        .iter()
        .filter(|c| !on_disk.contains_key(*c))
        .map(|c| c.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if !missing.is_empty() {
        return Err(Error::ingestion(
            root,
            format!("classes absent from disk: {}", missing.join(", ")),
        ));
    }
    let mut label = 0;
    let mut splits: [Vec<LabeledImage>; 3] = Default::default();
    for split in Split::ALL {
        for class in manifest.classes(split) {
            for dir in &on_disk[class] {
                for path in list_images(dir)? {
                    let rel = path.strip_prefix(root).unwrap_or(&path);
                    splits[split as usize].push(LabeledImage {
                        image: Image::load(&path)?,
                        label,
                        image_id: rel.to_string_lossy().replace('\\', "/"),
                    });
                }
            }
            label += 1;
        }
    }
    Dataset::new(manifest.clone(), splits)
}

/// Writes `<root>/<split>/<class>/<n>.png` plus `manifest.json`.
pub fn save_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    for split in Split::ALL {
        for class in dataset.manifest().classes(split) {
            fs::create_dir_all(root.join(split.name()).join(class))?;
        }
        let mut counters = vec![0usize; dataset.n_classes()];
        for img in dataset.split(split).images() {
            let class = &dataset.class_names()[img.label];
            let n = counters[img.label];
            counters[img.label] += 1;
            img.image
                .save_png(&root.join(split.name()).join(class).join(format!("{n:05}.png")))?;
        }
    }
    dataset.manifest().save(&root.join("manifest.json"))
}
