//! Minimal raster line charts. Figures carry no text: the axes span the data
//! range and the exact values live in the CSV written alongside.

use std::path::Path;

use image::{Rgb, RgbImage};

const WIDTH: u32 = 640;
const HEIGHT: u32 = 420;
const MARGIN: f64 = 40.0;

const COLORS: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [23, 190, 207],
];

pub struct Series {
    pub points: Vec<(f64, f64)>,
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64, y: f64) -> (f64, f64) {
        let w = f64::from(WIDTH) - 2.0 * MARGIN;
        let h = f64::from(HEIGHT) - 2.0 * MARGIN;
        let fx = if self.x1 > self.x0 { (x - self.x0) / (self.x1 - self.x0) } else { 0.5 };
        let fy = (y - self.y0) / (self.y1 - self.y0);
        (MARGIN + fx * w, f64::from(HEIGHT) - MARGIN - fy * h)
    }
}

fn put(img: &mut RgbImage, x: f64, y: f64, c: Rgb<u8>) {
    let (x, y) = (x.round(), y.round());
    if x >= 0.0 && y >= 0.0 && x < f64::from(WIDTH) && y < f64::from(HEIGHT) {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn segment(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), c: Rgb<u8>, thick: i32) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let (x, y) = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
        for dx in -thick..=thick {
            for dy in -thick..=thick {
                put(img, x + f64::from(dx), y + f64::from(dy), c);
            }
        }
    }
}

/// Line chart with ten horizontal grid lines. `y_range` defaults to
/// [0, 1], the accuracy axis.
pub fn line_chart(series: &[Series], y_range: Option<(f64, f64)>, path: &Path) -> anyhow::Result<()> {
    let (y0, y1) = y_range.unwrap_or((0.0, 1.0));
    let y1 = if y1 > y0 { y1 } else { y0 + 1.0 };
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    let frame = Frame {
        x0: if x0.is_finite() { x0 } else { 0.0 },
        x1: if x1.is_finite() { x1 } else { 1.0 },
        y0,
        y1,
    };
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    for k in 0..=10 {
        let y = y0 + (y1 - y0) * f64::from(k) / 10.0;
        let grid = if k % 5 == 0 { Rgb([170, 170, 170]) } else { Rgb([225, 225, 225]) };
        segment(&mut img, frame.px(frame.x0, y), frame.px(frame.x1, y), grid, 0);
    }
    let axis = Rgb([0, 0, 0]);
    segment(&mut img, frame.px(frame.x0, y0), frame.px(frame.x1, y0), axis, 0);
    segment(&mut img, frame.px(frame.x0, y0), frame.px(frame.x0, y1), axis, 0);
    for (i, s) in series.iter().enumerate() {
        let c = Rgb(COLORS[i % COLORS.len()]);
        for w in s.points.windows(2) {
            segment(&mut img, frame.px(w[0].0, w[0].1), frame.px(w[1].0, w[1].1), c, 1);
        }
        for &(x, y) in &s.points {
            let (px, py) = frame.px(x, y);
            segment(&mut img, (px - 3.0, py), (px + 3.0, py), c, 2);
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_a_png_with_series_colors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.png");
        let s = Series { points: vec![(0.0, 0.2), (1.0, 0.8)] };
        line_chart(&[s], None, &path).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (WIDTH, HEIGHT));
        assert!(img.pixels().any(|p| p.0 == COLORS[0]));
    }
}
