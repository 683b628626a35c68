use ndarray::{Array2, Axis};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::image::Image;

/// Signed frequency of bin `k` after centering (fftshift) an `n`-point DFT.
fn centered_offset(k: usize, n: usize) -> f64 {
    ((k + n / 2) % n) as f64 - (n / 2) as f64
}

/// Largest distance from DC on the centered spectrum of an `h × w` image;
/// any radius at least this large passes every frequency.
pub fn max_frequency_radius(height: usize, width: usize) -> f64 {
    let dh = (height / 2) as f64;
    let dw = (width / 2) as f64;
    (dh * dh + dw * dw).sqrt()
}

fn fft_2d(data: &mut Array2<Complex<f64>>, planner: &mut FftPlanner<f64>, inverse: bool) {
    let (h, w) = data.dim();
    let row_fft = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    let col_fft = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };
    let mut buf = vec![Complex::default(); w.max(h)];
    for mut row in data.axis_iter_mut(Axis(0)) {
        buf[..w].iter_mut().zip(row.iter()).for_each(|(b, v)| *b = *v);
        row_fft.process(&mut buf[..w]);
        row.iter_mut().zip(&buf[..w]).for_each(|(v, b)| *v = *b);
    }
    for mut col in data.axis_iter_mut(Axis(1)) {
        buf[..h].iter_mut().zip(col.iter()).for_each(|(b, v)| *b = *v);
        col_fft.process(&mut buf[..h]);
        col.iter_mut().zip(&buf[..h]).for_each(|(v, b)| *v = *b);
    }
}

/// Radial low-pass filter. Per channel: DFT, zero every bin whose distance
/// from DC on the centered spectrum exceeds `radius` (in bins), inverse DFT,
/// real part, clamp to [0, 1].
pub fn fourier_low_pass(image: &Image, radius: f64) -> Result<Image> {
    if !(radius >= 0.0) {
        return Err(Error::Parameter(format!("radius {radius} must be >= 0")));
    }
    image.ensure_finite()?;
    let (h, w) = (image.height(), image.width());
    if radius >= max_frequency_radius(h, w) {
        return Ok(image.clone());
    }
    let keep = Array2::from_shape_fn((h, w), |(u, v)| {
        let du = centered_offset(u, h);
        let dv = centered_offset(v, w);
        (du * du + dv * dv).sqrt() <= radius
    });
    let mut planner = FftPlanner::new();
    let mut out = image.clone();
    let norm = (h * w) as f64;
    for mut channel in out.array_mut().axis_iter_mut(Axis(2)) {
        let mut spec = channel.mapv(|v| Complex::new(f64::from(v), 0.0));
        fft_2d(&mut spec, &mut planner, false);
        ndarray::Zip::from(&mut spec).and(&keep).for_each(|s, &k| {
            if !k {
                *s = Complex::default();
            }
        });
        fft_2d(&mut spec, &mut planner, true);
        ndarray::Zip::from(&mut channel)
            .and(&spec)
            .for_each(|c, s| *c = ((s.re / norm) as f32).clamp(0.0, 1.0));
    }
    Ok(out)
}
