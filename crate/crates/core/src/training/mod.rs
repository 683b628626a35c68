//! Pretraining regimes: joint RIN/SIN training, sequential distillation,
//! online self-distillation with an EMA teacher, and the single-network
//! cross-entropy baseline used as a reference.

mod checkpoint;
mod pipeline;
mod sgd;
mod trainer;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::nn::{Architecture, BackboneConfig};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointBundle, CheckpointManifest};
pub use pipeline::{eval_tensor, BaseLabels, BatchPipeline, PreparedBatch};
pub use sgd::Sgd;
pub use trainer::{
    backward_dual, distill_sequential, dual_gradients, pretrain, pretrain_baseline, pretrain_lsfsl,
    pretrain_online_distill, resume, RunOptions, StepRecord, TrainOutcome,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// RIN and SIN trained jointly with both alignments.
    Lsfsl,
    /// A fresh RIN distilled from a frozen trained RIN.
    Distill,
    /// Joint training plus an EMA teacher of RIN.
    Online,
    /// A lone RIN trained with cross-entropy only.
    Baseline,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Lsfsl => "lsfsl",
            Algorithm::Distill => "distill",
            Algorithm::Online => "online",
            Algorithm::Baseline => "baseline",
        }
    }

    /// Whether a SIN is trained alongside RIN.
    pub fn is_dual(self) -> bool {
        matches!(self, Algorithm::Lsfsl | Algorithm::Online)
    }
}

/// How the online teacher starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TeacherInit {
    #[default]
    CopyOfRin,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Side of the random training crop; also the network input size.
    pub crop_size: usize,
    pub flip: bool,
    /// Brightness/contrast/saturation strength for the RGB branch.
    pub jitter: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_size: 32,
            flip: true,
            jitter: 0.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub architecture: Architecture,
    pub feature_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub loss_weights: LossWeights,
    pub ema_momentum: f64,
    pub teacher_init: TeacherInit,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    /// The desk-scale recipe.
    fn default() -> Self {
        Self {
            architecture: Architecture::Conv4Toy,
            feature_dim: 64,
            epochs: 20,
            batch_size: 64,
            lr: 0.05,
            lr_decay_epochs: vec![15],
            lr_decay_factor: 0.1,
            weight_decay: 5e-4,
            momentum: 0.9,
            loss_weights: LossWeights::default(),
            ema_momentum: 0.999,
            teacher_init: TeacherInit::CopyOfRin,
            algorithm: Algorithm::Lsfsl,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    /// 65 epochs, decay by 0.1 at 60, ResNet-12 at 84 px.
    pub fn paper_recipe() -> Self {
        Self {
            architecture: Architecture::Resnet12,
            feature_dim: 640,
            epochs: 65,
            lr: 0.05,
            lr_decay_epochs: vec![60],
            augment: AugmentConfig {
                crop_size: 84,
                ..AugmentConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::Config(format!("{field}: {why}")));
        if self.epochs == 0 {
            return bad("epochs", "must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr", format!("{} must be finite and >= 0", self.lr));
        }
        if !self.lr_decay_epochs.windows(2).all(|w| w[0] < w[1]) {
            return bad("lr_decay_epochs", "must be strictly increasing".into());
        }
        if let Some(&last) = self.lr_decay_epochs.last() {
            if last >= self.epochs {
                return bad("lr_decay_epochs", format!("{last} is not below epochs = {}", self.epochs));
            }
        }
        if !(self.lr_decay_factor.is_finite() && self.lr_decay_factor > 0.0) {
            return bad("lr_decay_factor", "must be finite and > 0".into());
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be finite and >= 0".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", format!("{} outside [0, 1)", self.momentum));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return bad("ema_momentum", format!("{} outside [0, 1]", self.ema_momentum));
        }
        if !(self.augment.jitter.is_finite() && self.augment.jitter >= 0.0) {
            return bad("augment.jitter", "must be finite and >= 0".into());
        }
        self.loss_weights.validate()?;
        self.backbone(0).validate()
    }

    pub fn backbone(&self, init_seed: u64) -> BackboneConfig {
        BackboneConfig {
            architecture: self.architecture,
            input_size: self.augment.crop_size,
            feature_dim: self.feature_dim,
            init_seed,
        }
    }

    /// Step schedule: `lr * factor^(number of decay epochs <= epoch)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr * self.lr_decay_factor.powi(drops as i32)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        format!("{:x}", Sha256::digest(&bytes))
    }
}
