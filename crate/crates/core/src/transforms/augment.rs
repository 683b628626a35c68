use ndarray::Axis;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{rng_for, Rng};
use crate::transforms::sobel::ShapeImage;

/// Color-jitter strengths. A strength `s` draws a multiplicative factor
/// uniformly from `[max(0, 1 - s), 1 + s]`; zero leaves the image untouched.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ColorJitter {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
}

impl ColorJitter {
    pub const NONE: ColorJitter = ColorJitter {
        brightness: 0.0,
        contrast: 0.0,
        saturation: 0.0,
    };

    pub fn uniform(strength: f32) -> Self {
        Self {
            brightness: strength,
            contrast: strength,
            saturation: strength,
        }
    }

    fn is_identity(&self) -> bool {
        self.brightness == 0.0 && self.contrast == 0.0 && self.saturation == 0.0
    }
}

/// One draw of the geometric + photometric augmentation. The same value
/// drives the RGB and shape branches so that crop and flip correspond.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationParams {
    pub crop_origin: (usize, usize),
    pub crop_size: usize,
    pub flip: bool,
    pub jitter: ColorJitter,
    /// Seeds the jitter factor draws.
    pub jitter_seed: u64,
}

impl AugmentationParams {
    pub fn identity(height: usize, width: usize) -> Self {
        assert_eq!(height, width, "identity params need a square image");
        Self {
            crop_origin: (0, 0),
            crop_size: height,
            flip: false,
            jitter: ColorJitter::NONE,
            jitter_seed: 0,
        }
    }

    /// Random crop of `crop_size` within an `height × width` image, a fair
    /// coin for the flip and the given jitter strengths.
    pub fn sample(
        rng: &mut Rng,
        height: usize,
        width: usize,
        crop_size: usize,
        jitter: ColorJitter,
    ) -> Result<Self> {
        if crop_size > height || crop_size > width {
            return Err(Error::Parameter(format!(
                "crop size {crop_size} exceeds {height}x{width} image"
            )));
        }
        Ok(Self {
            crop_origin: (
                rng.random_range(0..=height - crop_size),
                rng.random_range(0..=width - crop_size),
            ),
            crop_size,
            flip: rng.random_bool(0.5),
            jitter,
            jitter_seed: rng.random(),
        })
    }

    fn validate(&self, height: usize, width: usize) -> Result<()> {
        let (r, c) = self.crop_origin;
        if self.crop_size == 0 || r + self.crop_size > height || c + self.crop_size > width {
            return Err(Error::Parameter(format!(
                "crop {} at ({r}, {c}) exceeds {height}x{width} image",
                self.crop_size
            )));
        }
        let j = self.jitter;
        if [j.brightness, j.contrast, j.saturation]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::Parameter("jitter strengths must be finite and >= 0".into()));
        }
        Ok(())
    }

    fn geometric(&self, image: &Image) -> Result<Image> {
        let (r, c) = self.crop_origin;
        let cropped = image.crop(r, c, self.crop_size, self.crop_size)?;
        Ok(if self.flip {
            cropped.flip_horizontal()
        } else {
            cropped
        })
    }
}

fn gray(px: [f32; 3]) -> f32 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

fn factor(rng: &mut Rng, strength: f32) -> f32 {
    if strength == 0.0 {
        1.0
    } else {
        rng.random_range((1.0 - strength).max(0.0)..=1.0 + strength)
    }
}

/// Brightness, contrast, then saturation, each followed by clamping.
fn color_jitter(mut image: Image, jitter: ColorJitter, seed: u64) -> Image {
    if jitter.is_identity() {
        return image;
    }
    let mut rng = rng_for(seed, &[]);
    let fb = factor(&mut rng, jitter.brightness);
    let fc = factor(&mut rng, jitter.contrast);
    let fs = factor(&mut rng, jitter.saturation);
    let data = image.array_mut();
    if fb != 1.0 {
        data.mapv_inplace(|v| (v * fb).clamp(0.0, 1.0));
    }
    if fc != 1.0 {
        let n = (data.len() / 3) as f32;
        let mean = data
            .lanes(Axis(2))
            .into_iter()
            .map(|px| gray([px[0], px[1], px[2]]))
            .sum::<f32>()
            / n;
        data.mapv_inplace(|v| ((v - mean) * fc + mean).clamp(0.0, 1.0));
    }
    if fs != 1.0 {
        for mut px in data.lanes_mut(Axis(2)) {
            let g = gray([px[0], px[1], px[2]]);
            px.mapv_inplace(|v| ((v - g) * fs + g).clamp(0.0, 1.0));
        }
    }
    image
}

/// Applies the same crop window and flip to an RGB image and its shape image;
/// color jitter touches the RGB branch only.
pub fn paired_augment(
    rgb: &Image,
    shape: &ShapeImage,
    params: &AugmentationParams,
) -> Result<(Image, ShapeImage)> {
    if rgb.height() != shape.height() || rgb.width() != shape.width() {
        return Err(Error::Parameter(format!(
            "rgb {}x{} and shape {}x{} differ in size",
            rgb.height(),
            rgb.width(),
            shape.height(),
            shape.width()
        )));
    }
    params.validate(rgb.height(), rgb.width())?;
    let rgb_out = color_jitter(params.geometric(rgb)?, params.jitter, params.jitter_seed);
    let shape_out = shape.clone().map_image(|img| params.geometric(&img))?;
    Ok((rgb_out, shape_out))
}
