use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Algorithm, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::{Architecture, BackboneConfig, Network, NetworkRole, Real};
use crate::transforms::ChannelStats;

const MAGIC: &[u8; 4] = b"SFSL";
const FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: u32,
    pub architecture: Architecture,
    pub input_size: usize,
    pub feature_dim: usize,
    pub n_base_classes: usize,
    pub algorithm: Algorithm,
    pub config_hash: String,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    pub seed: u64,
    pub init_seed: u64,
    pub dtype: String,
    pub rgb_stats: ChannelStats,
    pub shape_stats: Option<ChannelStats>,
    /// Blob file name to SHA-256.
    pub files: BTreeMap<String, String>,
}

impl CheckpointManifest {
    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            architecture: self.architecture,
            input_size: self.input_size,
            feature_dim: self.feature_dim,
            init_seed: self.init_seed,
        }
    }

    /// Checks that a checkpoint can serve `config`.
    pub fn check_compatible(&self, config: &TrainConfig) -> Result<()> {
        if self.architecture != config.architecture {
            return Err(Error::load(
                "architecture",
                format!("checkpoint {:?}, config {:?}", self.architecture, config.architecture),
            ));
        }
        if self.feature_dim != config.feature_dim {
            return Err(Error::load(
                "feature_dim",
                format!("checkpoint {}, config {}", self.feature_dim, config.feature_dim),
            ));
        }
        if self.input_size != config.augment.crop_size {
            return Err(Error::load(
                "input_size",
                format!("checkpoint {}, config {}", self.input_size, config.augment.crop_size),
            ));
        }
        Ok(())
    }
}

/// Trained networks, optimizer state and everything needed to resume.
#[derive(Debug, Clone)]
pub struct CheckpointBundle {
    pub manifest: CheckpointManifest,
    pub rin: Network<f32>,
    pub sin: Option<Network<f32>>,
    pub teacher: Option<Network<f32>>,
    /// Flattened momentum buffers, RIN tensors first.
    pub optimizer: Option<Vec<f32>>,
}

fn encode<F: Real>(values: &[F]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + values.len() * F::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT.to_le_bytes());
    out.extend_from_slice(&(F::BYTES as u32).to_le_bytes());
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for &v in values {
        v.write_le(&mut out);
    }
    out
}

fn decode<F: Real>(name: &str, bytes: &[u8]) -> Result<Vec<F>> {
    let fail = |why: String| Error::load(name, why);
    if bytes.len() < 20 || &bytes[..4] != MAGIC {
        return Err(fail("not a parameter blob".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    if word(4) != FORMAT {
        return Err(fail(format!("unsupported format {}", word(4))));
    }
    if word(8) as usize != F::BYTES {
        return Err(fail(format!("element width {} != {}", word(8), F::BYTES)));
    }
    let count = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() != count * F::BYTES {
        return Err(fail(format!(
            "truncated: {} bytes for {count} values",
            body.len()
        )));
    }
    Ok(body.chunks_exact(F::BYTES).map(F::read_le).collect())
}

fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn save_checkpoint(bundle: &CheckpointBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blobs: Vec<(&str, Vec<u8>)> = vec![("rin.bin", encode(&bundle.rin.flat_state()))];
    if let Some(sin) = &bundle.sin {
        blobs.push(("sin.bin", encode(&sin.flat_state())));
    }
    if let Some(t) = &bundle.teacher {
        blobs.push(("teacher.bin", encode(&t.flat_state())));
    }
    if let Some(opt) = &bundle.optimizer {
        blobs.push(("optimizer.bin", encode(opt)));
    }
    let mut manifest = bundle.manifest.clone();
    manifest.files.clear();
    for (name, bytes) in &blobs {
        fs::write(dir.join(name), bytes)?;
        manifest.files.insert((*name).to_string(), sha256_hex(bytes));
    }
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn read_blob(dir: &Path, manifest: &CheckpointManifest, name: &str) -> Result<Option<Vec<f32>>> {
    let Some(expected) = manifest.files.get(name) else {
        return Ok(None);
    };
    let bytes = fs::read(dir.join(name)).map_err(|e| Error::load(name, e.to_string()))?;
    if &sha256_hex(&bytes) != expected {
        return Err(Error::load(name, "checksum mismatch"));
    }
    decode(name, &bytes).map(Some)
}

fn restore(
    dir: &Path,
    manifest: &CheckpointManifest,
    name: &str,
    role: NetworkRole,
) -> Result<Option<Network<f32>>> {
    let Some(values) = read_blob(dir, manifest, name)? else {
        return Ok(None);
    };
    let mut net = Network::new(&manifest.backbone(), manifest.n_base_classes, role)
        .map_err(|e| Error::load("architecture", e.to_string()))?;
    net.load_flat_state(&values)
        .map_err(|e| Error::load(name, e.to_string()))?;
    Ok(Some(net))
}

pub fn load_checkpoint(dir: &Path) -> Result<CheckpointBundle> {
    let text = fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| Error::load("manifest.json", e.to_string()))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::load("manifest.json", e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(Error::load("format", format!("unsupported format {}", manifest.format)));
    }
    if manifest.dtype != f32::DTYPE {
        return Err(Error::load("dtype", format!("{} is not f32", manifest.dtype)));
    }
    manifest
        .backbone()
        .validate()
        .map_err(|e| Error::load("architecture", e.to_string()))?;
    let rin = restore(dir, &manifest, "rin.bin", NetworkRole::Rin)?
        .ok_or_else(|| Error::load("rin.bin", "missing from manifest"))?;
    let sin = restore(dir, &manifest, "sin.bin", NetworkRole::Sin)?;
    let teacher = restore(dir, &manifest, "teacher.bin", NetworkRole::Teacher)?;
    if manifest.algorithm.is_dual() && sin.is_none() {
        return Err(Error::load("sin.bin", "dual checkpoint without SIN"));
    }
    let optimizer = read_blob(dir, &manifest, "optimizer.bin")?;
    Ok(CheckpointBundle {
        manifest,
        rin,
        sin,
        teacher,
        optimizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle() -> CheckpointBundle {
        let cfg = TrainConfig::default();
        let backbone = BackboneConfig {
            init_seed: 4,
            ..cfg.backbone(4)
        };
        let rin = Network::new(&backbone, 3, NetworkRole::Rin).unwrap();
        let sin = Network::new(&backbone, 3, NetworkRole::Sin).unwrap();
        let n = rin.param_count() + sin.param_count();
        CheckpointBundle {
            manifest: CheckpointManifest {
                format: FORMAT,
                architecture: backbone.architecture,
                input_size: backbone.input_size,
                feature_dim: backbone.feature_dim,
                n_base_classes: 3,
                algorithm: Algorithm::Lsfsl,
                config_hash: cfg.hash(),
                epoch: 1,
                step: 8,
                seed: 4,
                init_seed: 4,
                dtype: "f32".into(),
                rgb_stats: ChannelStats::IDENTITY,
                shape_stats: Some(ChannelStats::IDENTITY),
                files: BTreeMap::new(),
            },
            teacher: Some(rin.clone()),
            rin,
            sin: Some(sin),
            optimizer: Some((0..n).map(|i| i as f32 * 1e-3).collect()),
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let b = bundle();
        save_checkpoint(&b, dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.rin.flat_state(), b.rin.flat_state());
        assert_eq!(back.sin.unwrap().flat_state(), b.sin.unwrap().flat_state());
        assert_eq!(back.teacher.unwrap().flat_state(), b.teacher.unwrap().flat_state());
        assert_eq!(back.optimizer, b.optimizer);
        assert_eq!(back.manifest.epoch, 1);
        assert_eq!(back.manifest.files.len(), 4);
    }

    #[test]
    fn corruption_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&bundle(), dir.path()).unwrap();
        let path = dir.path().join("sin.bin");
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(&path, bytes).unwrap();
        match load_checkpoint(dir.path()) {
            Err(Error::Load { field, .. }) => assert_eq!(field, "sin.bin"),
            other => panic!("expected load error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_mismatch_names_the_field() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&bundle(), dir.path()).unwrap();
        let path = dir.path().join("manifest.json");
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, text.replace("\"feature_dim\": 64", "\"feature_dim\": 32")).unwrap();
        match load_checkpoint(dir.path()) {
            Err(Error::Load { field, .. }) => assert_eq!(field, "rin.bin"),
            other => panic!("expected load error, got {other:?}"),
        }
        let b = bundle();
        let wrong = TrainConfig {
            feature_dim: 32,
            ..TrainConfig::default()
        };
        match b.manifest.check_compatible(&wrong) {
            Err(Error::Load { field, .. }) => assert_eq!(field, "feature_dim"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_blob_is_rejected() {
        assert!(decode::<f32>("x", &encode(&[1.0f32, 2.0])[..22]).is_err());
        assert!(decode::<f32>("x", b"nope").is_err());
        assert_eq!(decode::<f32>("x", &encode(&[1.0f32, 2.0])).unwrap(), vec![1.0, 2.0]);
    }
}
