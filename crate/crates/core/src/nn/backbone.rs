use ndarray::{Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

use super::layers::{Activation, BatchNorm2d, Conv2d, Layer, MaxPool2, ResidualBlock};
use super::Real;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Four conv-BN-ReLU-maxpool blocks of `feature_dim` filters.
    Conv4Toy,
    /// Four residual stages of widths 64/160/320/640.
    Resnet12,
}

impl Architecture {
    pub const RESNET12_WIDTHS: [usize; 4] = [64, 160, 320, 640];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub architecture: Architecture,
    pub input_size: usize,
    pub feature_dim: usize,
    #[serde(default)]
    pub init_seed: u64,
}

impl BackboneConfig {
    pub fn conv4_toy(input_size: usize, feature_dim: usize) -> Self {
        Self {
            architecture: Architecture::Conv4Toy,
            input_size,
            feature_dim,
            init_seed: 0,
        }
    }

    pub fn resnet12(input_size: usize) -> Self {
        Self {
            architecture: Architecture::Resnet12,
            input_size,
            feature_dim: 640,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be > 0".into()));
        }
        if self.input_size < 16 {
            return Err(Error::Config(format!(
                "input_size {} too small for four 2x poolings (need >= 16)",
                self.input_size
            )));
        }
        if self.architecture == Architecture::Resnet12 && self.feature_dim != 640 {
            return Err(Error::Config(format!(
                "resnet12 produces 640-d features, not {}",
                self.feature_dim
            )));
        }
        Ok(())
    }
}

/// Feature extractor: the layer stack followed by global average pooling.
#[derive(Debug, Clone)]
pub struct Backbone<F> {
    pub layers: Vec<Layer<F>>,
    feature_dim: usize,
    pooled_dims: Option<(usize, usize, usize, usize)>,
}

impl<F: Real> Backbone<F> {
    pub fn new(config: &BackboneConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let layers = match config.architecture {
            Architecture::Conv4Toy => {
                let width = config.feature_dim;
                let mut layers = Vec::with_capacity(16);
                let mut inputs = 3;
                for _ in 0..4 {
                    layers.push(Layer::Conv(Conv2d::new(inputs, width, 3, rng)));
                    layers.push(Layer::BatchNorm(BatchNorm2d::new(width)));
                    layers.push(Layer::Act(Activation::relu()));
                    layers.push(Layer::MaxPool(MaxPool2::default()));
                    inputs = width;
                }
                layers
            }
            Architecture::Resnet12 => {
                let mut inputs = 3;
                Architecture::RESNET12_WIDTHS
                    .iter()
                    .map(|&w| {
                        let block = ResidualBlock::new(inputs, w, rng);
                        inputs = w;
                        Layer::Residual(Box::new(block))
                    })
                    .collect()
            }
        };
        Ok(Self {
            layers,
            feature_dim: config.feature_dim,
            pooled_dims: None,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn global_pool(x: &Array4<F>) -> Array2<F> {
        let (c, n, h, w) = x.dim();
        let scale = F::c(1.0 / (h * w) as f64);
        let mut z = Array2::<F>::zeros((n, c));
        for ci in 0..c {
            for ni in 0..n {
                z[[ni, ci]] = x.index_axis(Axis(0), ci).index_axis(Axis(0), ni).sum() * scale;
            }
        }
        z
    }

    /// `(C, N, H, W)` input to `(N, feature_dim)` features.
    pub fn forward_eval(&self, x: &Array4<F>) -> Array2<F> {
        let h = self
            .layers
            .iter()
            .fold(x.clone(), |h, l| l.forward_eval(&h));
        Self::global_pool(&h)
    }

    pub fn forward_train(&mut self, x: &Array4<F>) -> Array2<F> {
        let h = self
            .layers
            .iter_mut()
            .fold(x.clone(), |h, l| l.forward_train(&h));
        self.pooled_dims = Some(h.dim());
        Self::global_pool(&h)
    }

    pub fn backward(&mut self, dz: &Array2<F>) {
        let dims = self
            .pooled_dims
            .take()
            .expect("backbone backward without forward");
        let (_, _, h, w) = dims;
        let scale = F::c(1.0 / (h * w) as f64);
        let dh = Array4::from_shape_fn(dims, |(ci, ni, _, _)| dz[[ni, ci]] * scale);
        // the input gradient is not needed
        let _ = self
            .layers
            .iter_mut()
            .rev()
            .fold(dh, |g, l| l.backward(&g));
    }
}
