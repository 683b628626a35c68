//! Synthetic shape/texture dataset.
//!
//! Every class owns one shape generator and one "home" texture. Training
//! images of a class carry the home texture with probability
//! `cue_correlation` (otherwise a uniformly drawn texture); evaluation
//! classes get a balanced cycle through a random permutation of all textures,
//! so texture says nothing about class there. Shapes are always
//! class-consistent, with random position, scale and a small rotation.

use std::f32::consts::PI;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ClassId, Dataset, LabeledImage, Split, SplitManifest};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{rng_for, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Ellipse,
    Triangle,
    Square,
    Diamond,
    Pentagon,
    Hexagon,
    Octagon,
    Star5,
    Star4,
    Cross,
    Ring,
    Crescent,
    Heart,
    Arrow,
    LShape,
    TShape,
    HalfDisk,
    Trapezoid,
    Hourglass,
}

fn regular_polygon(n: usize, radius: f32, phase: f32) -> Vec<(f32, f32)> {
    (0..n)
        .map(|i| {
            let a = phase + 2.0 * PI * i as f32 / n as f32;
            (radius * a.cos(), radius * a.sin())
        })
        .collect()
}

fn star(points: usize, outer: f32, inner: f32) -> Vec<(f32, f32)> {
    (0..2 * points)
        .map(|i| {
            let r = if i % 2 == 0 { outer } else { inner };
            let a = -PI / 2.0 + PI * i as f32 / points as f32;
            (r * a.cos(), r * a.sin())
        })
        .collect()
}

/// Even-odd crossing test.
fn in_polygon(poly: &[(f32, f32)], x: f32, y: f32) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 20] = [
        ShapeKind::Circle,
        ShapeKind::Ellipse,
        ShapeKind::Triangle,
        ShapeKind::Square,
        ShapeKind::Diamond,
        ShapeKind::Pentagon,
        ShapeKind::Hexagon,
        ShapeKind::Octagon,
        ShapeKind::Star5,
        ShapeKind::Star4,
        ShapeKind::Cross,
        ShapeKind::Ring,
        ShapeKind::Crescent,
        ShapeKind::Heart,
        ShapeKind::Arrow,
        ShapeKind::LShape,
        ShapeKind::TShape,
        ShapeKind::HalfDisk,
        ShapeKind::Trapezoid,
        ShapeKind::Hourglass,
    ];

    pub fn name(self) -> String {
        serde_json::to_value(self)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default()
    }

    /// Membership test in shape coordinates (`[-1, 1]²`, y pointing down).
    pub fn contains(self, x: f32, y: f32) -> bool {
        let r2 = x * x + y * y;
        match self {
            ShapeKind::Circle => r2 <= 0.9 * 0.9,
            ShapeKind::Ellipse => (x / 1.0).powi(2) + (y / 0.5).powi(2) <= 1.0,
            ShapeKind::Triangle => in_polygon(&regular_polygon(3, 1.0, -PI / 2.0), x, y + 0.15),
            ShapeKind::Square => x.abs() <= 0.75 && y.abs() <= 0.75,
            ShapeKind::Diamond => x.abs() + y.abs() <= 1.0,
            ShapeKind::Pentagon => in_polygon(&regular_polygon(5, 0.95, -PI / 2.0), x, y),
            ShapeKind::Hexagon => in_polygon(&regular_polygon(6, 0.95, 0.0), x, y),
            ShapeKind::Octagon => in_polygon(&regular_polygon(8, 0.9, PI / 8.0), x, y),
            ShapeKind::Star5 => in_polygon(&star(5, 1.0, 0.42), x, y),
            ShapeKind::Star4 => in_polygon(&star(4, 1.0, 0.32), x, y),
            ShapeKind::Cross => {
                (x.abs() <= 0.28 && y.abs() <= 0.95) || (y.abs() <= 0.28 && x.abs() <= 0.95)
            }
            ShapeKind::Ring => (0.5 * 0.5..=0.95 * 0.95).contains(&r2),
            ShapeKind::Crescent => {
                r2 <= 0.95 * 0.95 && (x - 0.45).powi(2) + (y + 0.1).powi(2) > 0.75 * 0.75
            }
            ShapeKind::Heart => {
                let (hx, hy) = (x * 1.15, -(y * 1.15) + 0.15);
                (hx * hx + hy * hy - 1.0).powi(3) - hx * hx * hy.powi(3) <= 0.0
            }
            ShapeKind::Arrow => in_polygon(
                &[
                    (-0.95, -0.25),
                    (0.15, -0.25),
                    (0.15, -0.7),
                    (0.95, 0.0),
                    (0.15, 0.7),
                    (0.15, 0.25),
                    (-0.95, 0.25),
                ],
                x,
                y,
            ),
            ShapeKind::LShape => in_polygon(
                &[(-0.7, -0.9), (-0.2, -0.9), (-0.2, 0.4), (0.75, 0.4), (0.75, 0.9), (-0.7, 0.9)],
                x,
                y,
            ),
            ShapeKind::TShape => in_polygon(
                &[
                    (-0.9, -0.85),
                    (0.9, -0.85),
                    (0.9, -0.35),
                    (0.25, -0.35),
                    (0.25, 0.9),
                    (-0.25, 0.9),
                    (-0.25, -0.35),
                    (-0.9, -0.35),
                ],
                x,
                y,
            ),
            ShapeKind::HalfDisk => y >= -0.2 && x * x + (y + 0.2).powi(2) <= 0.95 * 0.95,
            ShapeKind::Trapezoid => {
                in_polygon(&[(-0.45, -0.6), (0.45, -0.6), (0.95, 0.6), (-0.95, 0.6)], x, y)
            }
            ShapeKind::Hourglass => in_polygon(
                &[(-0.8, -0.9), (0.8, -0.9), (0.12, 0.0), (0.8, 0.9), (-0.8, 0.9), (-0.12, 0.0)],
                x,
                y,
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Pattern {
    Stripes { angle: f32, period: f32 },
    Checker { period: f32 },
    Noise { cell: f32 },
    Dots { period: f32 },
}

/// Two-tone procedural texture: a base color modulated towards an accent
/// color by a pattern.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextureKind {
    pub base: [f32; 3],
    pub accent: [f32; 3],
    pub pattern: Pattern,
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn luma(c: [f32; 3]) -> f32 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// Moves `c` to luminance `target`: scaling down, or blending towards white.
fn with_luma(c: [f32; 3], target: f32) -> [f32; 3] {
    let l = luma(c);
    if l >= target {
        c.map(|v| v * target / l)
    } else {
        let t = (target - l) / (1.0 - l);
        c.map(|v| v + t * (1.0 - v))
    }
}

fn smoothstep(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

impl TextureKind {
    /// `n` textures with evenly spread hues and cycling pattern families.
    /// The two tones differ mostly in hue (luminance 0.58 vs 0.50), so the
    /// pattern is carried by color and only faintly by luminance edges.
    pub fn catalogue(n: usize) -> Vec<TextureKind> {
        (0..n)
            .map(|i| {
                let hue = i as f32 / n as f32;
                let pattern = match i % 4 {
                    0 => Pattern::Stripes {
                        angle: (i as f32 * 0.7).rem_euclid(PI),
                        period: 5.0 + (i % 3) as f32,
                    },
                    1 => Pattern::Checker {
                        period: 4.0 + (i % 3) as f32,
                    },
                    2 => Pattern::Noise {
                        cell: 5.0 + (i % 4) as f32,
                    },
                    _ => Pattern::Dots {
                        period: 5.0 + (i % 2) as f32,
                    },
                };
                TextureKind {
                    base: with_luma(hsv(hue, 0.25, 0.9), 0.58),
                    accent: with_luma(hsv(hue + 0.5, 0.25, 0.9), 0.50),
                    pattern,
                }
            })
            .collect()
    }

    /// Texture field over an `size × size` canvas with a random phase.
    fn render(&self, size: usize, rng: &mut Rng) -> Array3<f32> {
        let (du, dv): (f32, f32) = (rng.random_range(0.0..32.0), rng.random_range(0.0..32.0));
        let mix: Array2<f32> = match self.pattern {
            Pattern::Stripes { angle, period } => {
                let (c, s) = (angle.cos(), angle.sin());
                Array2::from_shape_fn((size, size), |(y, x)| {
                    let t = (x as f32 + du) * c + (y as f32 + dv) * s;
                    0.5 + 0.5 * (2.0 * PI * t / period).sin()
                })
            }
            Pattern::Checker { period } => Array2::from_shape_fn((size, size), |(y, x)| {
                let cx = ((x as f32 + du) / period).floor() as i64;
                let cy = ((y as f32 + dv) / period).floor() as i64;
                ((cx + cy).rem_euclid(2)) as f32
            }),
            Pattern::Dots { period } => Array2::from_shape_fn((size, size), |(y, x)| {
                let fx = ((x as f32 + du) / period).fract() - 0.5;
                let fy = ((y as f32 + dv) / period).fract() - 0.5;
                let d = (fx * fx + fy * fy).sqrt();
                (1.0 - ((d - 0.25) * 8.0).clamp(0.0, 1.0)).clamp(0.0, 1.0)
            }),
            Pattern::Noise { cell } => {
                let n = (size as f32 / cell).ceil() as usize + 2;
                let lattice = Array2::from_shape_fn((n, n), |_| rng.random::<f32>());
                Array2::from_shape_fn((size, size), |(y, x)| {
                    let (gx, gy) = (x as f32 / cell, y as f32 / cell);
                    let (ix, iy) = (gx as usize, gy as usize);
                    let (tx, ty) = (smoothstep(gx.fract()), smoothstep(gy.fract()));
                    let top = lattice[[iy, ix]] * (1.0 - tx) + lattice[[iy, ix + 1]] * tx;
                    let bot = lattice[[iy + 1, ix]] * (1.0 - tx) + lattice[[iy + 1, ix + 1]] * tx;
                    top * (1.0 - ty) + bot * ty
                })
            }
        };
        Array3::from_shape_fn((size, size, 3), |(y, x, c)| {
            let m = mix[[y, x]];
            self.base[c] * (1.0 - m) + self.accent[c] * m
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub n_classes: usize,
    pub images_per_class: usize,
    pub image_size: usize,
    pub shape_set: Vec<ShapeKind>,
    pub texture_set: Vec<TextureKind>,
    /// Train-time probability that an image carries its class's home texture.
    pub cue_correlation: f32,
    /// Number of classes in (train, val, test).
    pub split_sizes: [usize; 3],
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n_classes: 20,
            images_per_class: 40,
            image_size: 36,
            shape_set: ShapeKind::ALL.to_vec(),
            texture_set: TextureKind::catalogue(20),
            cue_correlation: 1.0,
            split_sizes: [12, 3, 5],
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let cap = self.shape_set.len().min(self.texture_set.len());
        if self.n_classes > cap {
            return Err(Error::Config(format!(
                "n_classes {} exceeds min(|shape_set|, |texture_set|) = {cap}",
                self.n_classes
            )));
        }
        if self.split_sizes.iter().sum::<usize>() != self.n_classes {
            return Err(Error::Config(format!(
                "split_sizes {:?} must sum to n_classes {}",
                self.split_sizes, self.n_classes
            )));
        }
        if !(0.0..=1.0).contains(&self.cue_correlation) {
            return Err(Error::Config(format!(
                "cue_correlation {} outside [0, 1]",
                self.cue_correlation
            )));
        }
        if self.image_size < 8 {
            return Err(Error::Config("image_size must be >= 8".into()));
        }
        if self.images_per_class == 0 {
            return Err(Error::Config("images_per_class must be >= 1".into()));
        }
        Ok(())
    }
}

/// Generation metadata for one image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyRecord {
    pub image_id: String,
    pub split: Split,
    pub class: ClassId,
    pub shape: usize,
    pub texture: usize,
}

#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub dataset: Dataset,
    pub records: Vec<ToyRecord>,
    pub config: ToyConfig,
}

/// Renders `shape` over a texture; the shape interior is the texture
/// darkened, edges anti-aliased by 4×4 supersampling.
fn render_image(shape: ShapeKind, texture: &TextureKind, size: usize, rng: &mut Rng) -> Image {
    let bg = texture.render(size, rng);
    let cx: f32 = rng.random_range(-0.12..0.12);
    let cy: f32 = rng.random_range(-0.12..0.12);
    let scale: f32 = rng.random_range(0.5..0.75);
    let theta: f32 = rng.random_range(-0.35..0.35);
    let (cos, sin) = (theta.cos(), theta.sin());
    const SS: usize = 4;
    let mut data = bg.clone();
    for y in 0..size {
        for x in 0..size {
            let mut hits = 0;
            for sy in 0..SS {
                for sx in 0..SS {
                    let px = (x as f32 + (sx as f32 + 0.5) / SS as f32) / size as f32 * 2.0 - 1.0;
                    let py = (y as f32 + (sy as f32 + 0.5) / SS as f32) / size as f32 * 2.0 - 1.0;
                    let (dx, dy) = (px - cx, py - cy);
                    let qx = (cos * dx + sin * dy) / scale;
                    let qy = (-sin * dx + cos * dy) / scale;
                    if shape.contains(qx, qy) {
                        hits += 1;
                    }
                }
            }
            let alpha = hits as f32 / (SS * SS) as f32;
            for c in 0..3 {
                let b = bg[[y, x, c]];
                data[[y, x, c]] = (alpha * 0.35 * b + (1.0 - alpha) * b).clamp(0.0, 1.0);
            }
        }
    }
    Image::from_array(data)
}

/// Generates the synthetic dataset; class `g` (generator index) pairs
/// `shape_set[g]` with home texture `texture_set[g]`.
pub fn generate_toy_dataset(config: &ToyConfig, seed: u64) -> Result<ToyDataset> {
    config.validate()?;
    let names: Vec<String> = (0..config.n_classes)
        .map(|g| format!("{g:02}_{}", config.shape_set[g].name()))
        .collect();
    let mut order: Vec<usize> = (0..config.n_classes).collect();
    order.shuffle(&mut rng_for(seed, &[0x5EED]));
    let [n_train, n_val, _] = config.split_sizes;
    let manifest = SplitManifest {
        train: order[..n_train].iter().map(|&g| names[g].clone()).collect(),
        val: order[n_train..n_train + n_val]
            .iter()
            .map(|&g| names[g].clone())
            .collect(),
        test: order[n_train + n_val..]
            .iter()
            .map(|&g| names[g].clone())
            .collect(),
        source: "toy".into(),
        seed,
    };
    let n_tex = config.texture_set.len();

    // Class ids follow manifest order, which is exactly `order`.
    let jobs: Vec<(ClassId, usize, Split)> = order
        .iter()
        .enumerate()
        .map(|(class, &g)| {
            let split = if class < n_train {
                Split::Train
            } else if class < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (class, g, split)
        })
        .collect();

    let per_class: Vec<Vec<(LabeledImage, ToyRecord)>> = jobs
        .par_iter()
        .map(|&(class, g, split)| {
            let mut assign = rng_for(seed, &[1, g as u64]);
            let textures: Vec<usize> = if split == Split::Train {
                (0..config.images_per_class)
                    .map(|_| {
                        if assign.random::<f32>() < config.cue_correlation {
                            g
                        } else {
                            assign.random_range(0..n_tex)
                        }
                    })
                    .collect()
            } else {
                let mut perm: Vec<usize> = (0..n_tex).collect();
                perm.shuffle(&mut assign);
                (0..config.images_per_class).map(|i| perm[i % n_tex]).collect()
            };
            textures
                .into_iter()
                .enumerate()
                .map(|(i, texture)| {
                    let mut rng = rng_for(seed, &[2, g as u64, i as u64]);
                    let image = render_image(
                        config.shape_set[g],
                        &config.texture_set[texture],
                        config.image_size,
                        &mut rng,
                    );
                    let image_id = format!("{}/{}/{i:04}", split.name(), names[g]);
                    (
                        LabeledImage {
                            image,
                            label: class,
                            image_id: image_id.clone(),
                        },
                        ToyRecord {
                            image_id,
                            split,
                            class,
                            shape: g,
                            texture,
                        },
                    )
                })
                .collect()
        })
        .collect();

    let mut splits: [Vec<LabeledImage>; 3] = Default::default();
    let mut records = Vec::with_capacity(config.n_classes * config.images_per_class);
    for items in per_class {
        for (img, rec) in items {
            splits[rec.split as usize].push(img);
            records.push(rec);
        }
    }
    Ok(ToyDataset {
        dataset: Dataset::new(manifest, splits)?,
        records,
        config: config.clone(),
    })
}
