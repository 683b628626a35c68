use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelStats {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl ChannelStats {
    pub const IDENTITY: ChannelStats = ChannelStats {
        mean: [0.0; 3],
        std: [1.0; 3],
    };

    /// Population moments over every pixel of every image.
    pub fn compute<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<Self> {
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut n = 0usize;
        for img in images {
            for px in img.view().lanes(Axis(2)) {
                for c in 0..3 {
                    let v = f64::from(px[c]);
                    sum[c] += v;
                    sq[c] += v * v;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Input("cannot compute statistics of zero images".into()));
        }
        let mut mean = [0.0f32; 3];
        let mut std = [0.0f32; 3];
        for c in 0..3 {
            let m = sum[c] / n as f64;
            mean[c] = m as f32;
            // floor keeps degenerate (constant) channels invertible
            std[c] = ((sq[c] / n as f64 - m * m).max(0.0).sqrt() as f32).max(1e-3);
        }
        Ok(Self { mean, std })
    }

    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Parameter("channel std must be finite and > 0".into()));
        }
        Ok(())
    }
}

/// `(image - mean) / std` channel-wise, returned as an H×W×3 tensor.
pub fn normalize(image: &Image, stats: &ChannelStats) -> Result<Array3<f32>> {
    stats.validate()?;
    let mut out = image.array().clone();
    for (c, mut channel) in out.axis_iter_mut(Axis(2)).enumerate() {
        let (m, s) = (stats.mean[c], stats.std[c]);
        channel.mapv_inplace(|v| (v - m) / s);
    }
    Ok(out)
}

pub fn denormalize(tensor: &Array3<f32>, stats: &ChannelStats) -> Result<Image> {
    stats.validate()?;
    let mut out = tensor.clone();
    for (c, mut channel) in out.axis_iter_mut(Axis(2)).enumerate() {
        let (m, s) = (stats.mean[c], stats.std[c]);
        channel.mapv_inplace(|v| v * s + m);
    }
    Image::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn identity_stats_do_nothing() {
        let img = Image::filled(4, 4, 0.3);
        assert_eq!(normalize(&img, &ChannelStats::IDENTITY).unwrap(), *img.array());
    }

    #[test]
    fn normalize_round_trips() {
        let mut rng = crate::rng::rng_for(0, &[]);
        let img = Image::new(Array3::from_shape_fn((5, 6, 3), |_| rng.random::<f32>())).unwrap();
        let stats = ChannelStats {
            mean: [0.4, 0.5, 0.6],
            std: [0.2, 0.25, 0.3],
        };
        let back = denormalize(&normalize(&img, &stats).unwrap(), &stats).unwrap();
        for (a, b) in img.view().iter().zip(back.view().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_std_is_rejected() {
        let stats = ChannelStats {
            mean: [0.0; 3],
            std: [1.0, 0.0, 1.0],
        };
        assert!(normalize(&Image::filled(2, 2, 0.0), &stats).is_err());
    }
}
