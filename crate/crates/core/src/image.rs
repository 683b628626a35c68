use std::path::Path;

use ndarray::{s, Array3, ArrayView3};

use crate::error::{Error, Result};

/// An RGB image stored height × width × 3 with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array3<f32>,
}

impl Image {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if c != 3 {
            return Err(Error::Input(format!("expected 3 channels, got {c}")));
        }
        if h == 0 || w == 0 {
            return Err(Error::Input("empty image".into()));
        }
        Ok(Self { data })
    }

    /// Builds an image without checks; callers guarantee three channels.
    pub(crate) fn from_array(data: Array3<f32>) -> Self {
        debug_assert_eq!(data.dim().2, 3);
        Self { data }
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self::from_array(Array3::from_elem((height, width, 3), value))
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn view(&self) -> ArrayView3<'_, f32> {
        self.data.view()
    }

    pub fn array(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn array_mut(&mut self) -> &mut Array3<f32> {
        &mut self.data
    }

    pub fn into_array(self) -> Array3<f32> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn ensure_finite(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Input("image contains non-finite pixels".into()))
        }
    }

    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<Self> {
        if row + height > self.height() || col + width > self.width() || height == 0 || width == 0
        {
            return Err(Error::Parameter(format!(
                "crop {height}x{width} at ({row}, {col}) exceeds {}x{} image",
                self.height(),
                self.width()
            )));
        }
        Ok(Self::from_array(
            self.data
                .slice(s![row..row + height, col..col + width, ..])
                .to_owned(),
        ))
    }

    /// Centered square crop of side `size`, or the image itself when it is
    /// already that size.
    pub fn center_crop(&self, size: usize) -> Result<Self> {
        if self.height() == size && self.width() == size {
            return Ok(self.clone());
        }
        if self.height() < size || self.width() < size {
            return Err(Error::Parameter(format!(
                "cannot center-crop {}x{} image to {size}",
                self.height(),
                self.width()
            )));
        }
        self.crop(
            (self.height() - size) / 2,
            (self.width() - size) / 2,
            size,
            size,
        )
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_array(self.data.slice(s![.., ..;-1, ..]).to_owned())
    }

    pub fn clamp_unit(mut self) -> Self {
        self.data.mapv_inplace(|v| v.clamp(0.0, 1.0));
        self
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let mut data = Array3::<f32>::zeros((h as usize, w as usize, 3));
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                data[[y as usize, x as usize, c]] = f32::from(p[c]) / 255.0;
            }
        }
        Self::from_array(data)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width() as u32, self.height() as u32, |x, y| {
            let px = |c| (self.data[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::ingestion(path, format!("cannot decode image: {e}")))?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path)?;
        Ok(())
    }
}
