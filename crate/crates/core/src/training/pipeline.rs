use ndarray::{Array3, Array4};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::TrainConfig;
use crate::data::{ClassId, SplitData};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::stack_images;
use crate::rng::rng_for;
use crate::transforms::{
    normalize, paired_augment, sobel_shape_image, AugmentationParams, ChannelStats, ColorJitter,
    ShapeImage,
};

const ORDER_STREAM: u64 = 0x0dde;
const SAMPLE_STREAM: u64 = 0x5a4e;

/// Dense `0..n` labels for the classes of a training split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BaseLabels {
    classes: Vec<ClassId>,
}

impl BaseLabels {
    pub fn from_split(split: &SplitData) -> Self {
        let mut classes: Vec<ClassId> = split.classes().collect();
        classes.sort_unstable();
        Self { classes }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn base(&self, class: ClassId) -> Option<usize> {
        self.classes.binary_search(&class).ok()
    }
}

/// Center crop plus normalization: the evaluation-time view of an image.
pub fn eval_tensor(image: &Image, stats: &ChannelStats, crop: usize) -> Result<Array3<f32>> {
    normalize(&image.center_crop(crop)?, stats)
}

/// One mini-batch, ready for the networks.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub rgb: Array4<f32>,
    pub shape: Option<Array4<f32>>,
    pub labels: Vec<usize>,
    /// Positions in the training split.
    pub indices: Vec<usize>,
}

/// Augmented, normalized mini-batches of a training split. Every random draw
/// derives from `(seed, epoch, batch, sample)`, so batches are independent
/// of thread scheduling and can be regenerated on resume.
#[derive(Debug)]
pub struct BatchPipeline<'a> {
    split: &'a SplitData,
    labels: Vec<usize>,
    shapes: Option<Vec<ShapeImage>>,
    pub rgb_stats: ChannelStats,
    pub shape_stats: Option<ChannelStats>,
    pub n_classes: usize,
    config: TrainConfig,
}

impl<'a> BatchPipeline<'a> {
    pub fn new(split: &'a SplitData, config: &TrainConfig, with_shapes: bool) -> Result<Self> {
        if split.is_empty() {
            return Err(Error::Input("training split is empty".into()));
        }
        let base = BaseLabels::from_split(split);
        let labels = split
            .images()
            .iter()
            .map(|img| base.base(img.label).expect("label from this split"))
            .collect();
        let rgb_stats = ChannelStats::compute(split.images().iter().map(|i| &i.image))?;
        let (shapes, shape_stats) = if with_shapes {
            // computed once per image; crops and flips are applied per batch
            let shapes = split
                .images()
                .par_iter()
                .map(|img| sobel_shape_image(&img.image))
                .collect::<Result<Vec<_>>>()?;
            let stats = ChannelStats::compute(shapes.iter().map(|s| s.image()))?;
            (Some(shapes), Some(stats))
        } else {
            (None, None)
        };
        Ok(Self {
            split,
            labels,
            shapes,
            rgb_stats,
            shape_stats,
            n_classes: base.len(),
            config: config.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Full batches plus a trailing partial one, unless that would hold a
    /// single sample (batch statistics need two).
    pub fn n_batches(&self) -> usize {
        let bs = self.config.batch_size;
        let n = self.len();
        if n % bs == 1 && n > 1 {
            n / bs
        } else {
            n.div_ceil(bs)
        }
    }

    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng_for(self.config.seed, &[ORDER_STREAM, epoch as u64]));
        order
    }

    pub fn batch(&self, epoch: usize, batch: usize, order: &[usize]) -> Result<PreparedBatch> {
        let bs = self.config.batch_size;
        let start = batch * bs;
        let end = if batch + 1 == self.n_batches() {
            order.len()
        } else {
            (start + bs).min(order.len())
        };
        let indices = order[start..end].to_vec();
        let aug = self.config.augment;
        let samples = indices
            .par_iter()
            .enumerate()
            .map(|(i, &idx)| {
                let img = &self.split.images()[idx].image;
                let mut rng = rng_for(
                    self.config.seed,
                    &[SAMPLE_STREAM, epoch as u64, batch as u64, i as u64],
                );
                let mut params = AugmentationParams::sample(
                    &mut rng,
                    img.height(),
                    img.width(),
                    aug.crop_size,
                    ColorJitter::uniform(aug.jitter),
                )?;
                params.flip &= aug.flip;
                match &self.shapes {
                    Some(shapes) => {
                        let (rgb, shape) = paired_augment(img, &shapes[idx], &params)?;
                        let s = normalize(shape.image(), self.shape_stats.as_ref().expect("with shapes"))?;
                        Ok((normalize(&rgb, &self.rgb_stats)?, Some(s)))
                    }
                    None => {
                        let blank = ShapeImage::from_gray(&ndarray::Array2::zeros((img.height(), img.width())));
                        let (rgb, _) = paired_augment(img, &blank, &params)?;
                        Ok((normalize(&rgb, &self.rgb_stats)?, None))
                    }
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let rgb: Vec<Array3<f32>> = samples.iter().map(|s| s.0.clone()).collect();
        let shape = if self.shapes.is_some() {
            let s: Vec<Array3<f32>> = samples.into_iter().map(|s| s.1.expect("shape")).collect();
            Some(stack_images(&s))
        } else {
            None
        };
        Ok(PreparedBatch {
            rgb: stack_images(&rgb),
            shape,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            indices,
        })
    }

    pub fn image_ids(&self, indices: &[usize]) -> Vec<String> {
        indices
            .iter()
            .map(|&i| self.split.images()[i].image_id.clone())
            .collect()
    }
}
