use ndarray::{Array2, Array3, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::image::Image;

/// Horizontal-gradient Sobel kernel, indexed `[row][col]`.
pub const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
/// Vertical-gradient Sobel kernel, indexed `[row][col]`.
pub const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Edge-magnitude image replicated over three identical channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeImage(Image);

impl ShapeImage {
    /// Replicates a single-channel map in [0, 1].
    pub fn from_gray(gray: &Array2<f32>) -> Self {
        let (h, w) = gray.dim();
        let data = Array3::from_shape_fn((h, w, 3), |(y, x, _)| gray[[y, x]]);
        ShapeImage(Image::from_array(data))
    }

    /// Wraps an image whose channels are already identical.
    pub fn try_from_image(image: Image) -> Result<Self> {
        let v = image.view();
        let equal = v
            .lanes(Axis(2))
            .into_iter()
            .all(|px| px[0] == px[1] && px[1] == px[2]);
        if !equal {
            return Err(Error::Input("shape image channels differ".into()));
        }
        Ok(ShapeImage(image))
    }

    pub fn image(&self) -> &Image {
        &self.0
    }

    pub fn into_image(self) -> Image {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub(crate) fn map_image(self, f: impl FnOnce(Image) -> Result<Image>) -> Result<Self> {
        f(self.0).map(ShapeImage)
    }
}

/// ITU-R 601 luma.
pub fn luminance(image: &Image) -> Array2<f64> {
    let v = image.view();
    let (h, w, _) = v.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        0.299 * f64::from(v[[y, x, 0]]) + 0.587 * f64::from(v[[y, x, 1]]) + 0.114 * f64::from(v[[y, x, 2]])
    })
}

/// Bilinear resampling with half-pixel centers and edge clamping.
///
/// For an exact 2× reduction every output pixel is the mean of a 2×2 block.
pub fn resize_bilinear(src: ArrayView2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (in_h, in_w) = src.dim();
    let coords = |out: usize, inn: usize| -> Vec<(usize, usize, f64)> {
        let scale = inn as f64 / out as f64;
        (0..out)
            .map(|d| {
                let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (inn - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(inn - 1);
                (lo, hi, s - lo as f64)
            })
            .collect()
    };
    let ys = coords(out_h, in_h);
    let xs = coords(out_w, in_w);
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
        let bottom = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Reflect-101 index: `-1 -> 1`, `n -> n - 2`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Gradient magnitude `sqrt(gx^2 + gy^2)` of a single-channel map using the
/// separable form of the 3×3 Sobel kernels and reflect-101 borders.
pub fn sobel_magnitude(gray: ArrayView2<f64>) -> Array2<f64> {
    let (h, w) = gray.dim();
    // smooth [1 2 1] and derivative [-1 0 1] passes along each axis
    let along_x = |f: &dyn Fn(f64, f64, f64) -> f64| {
        Array2::from_shape_fn((h, w), |(y, x)| {
            let l = gray[[y, reflect(x as isize - 1, w)]];
            let r = gray[[y, reflect(x as isize + 1, w)]];
            f(l, gray[[y, x]], r)
        })
    };
    let deriv_x = along_x(&|l, _, r| r - l);
    let smooth_x = along_x(&|l, c, r| l + 2.0 * c + r);
    let along_y = |src: &Array2<f64>, f: &dyn Fn(f64, f64, f64) -> f64| {
        Array2::from_shape_fn((h, w), |(y, x)| {
            let u = src[[reflect(y as isize - 1, h), x]];
            let d = src[[reflect(y as isize + 1, h), x]];
            f(u, src[[y, x]], d)
        })
    };
    let gx = along_y(&deriv_x, &|u, c, d| u + 2.0 * c + d);
    let gy = along_y(&smooth_x, &|u, _, d| d - u);
    ndarray::Zip::from(&gx)
        .and(&gy)
        .map_collect(|&a, &b| (a * a + b * b).sqrt())
}

/// Shape image used as SIN input: 2× bilinear upsampling, luma, Sobel
/// magnitude, per-image max normalization, 2× downsampling back to the input
/// resolution, replicated to three channels.
pub fn sobel_shape_image(image: &Image) -> Result<ShapeImage> {
    image.ensure_finite()?;
    let (h, w) = (image.height(), image.width());
    if h < 8 || w < 8 {
        return Err(Error::Input(format!("image {h}x{w} is smaller than 8x8")));
    }
    let gray = luminance(image);
    let up = resize_bilinear(gray.view(), 2 * h, 2 * w);
    let mut mag = sobel_magnitude(up.view());
    let max = mag.iter().cloned().fold(0.0_f64, f64::max);
    if max > 0.0 {
        mag.mapv_inplace(|v| v / max);
    }
    let down = resize_bilinear(mag.view(), h, w);
    Ok(ShapeImage::from_gray(&down.mapv(|v| v.clamp(0.0, 1.0) as f32)))
}
