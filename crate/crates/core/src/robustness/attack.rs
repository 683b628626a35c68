use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{rng_for, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// L-infinity budget in pixel units.
    pub epsilon: f32,
    pub n_iters: usize,
    /// Initial fraction of pixels covered by a square.
    pub p_init: f64,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            n_iters: 500,
            p_init: 0.8,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Parameter(format!("epsilon {} outside [0, 1]", self.epsilon)));
        }
        if !(self.p_init > 0.0 && self.p_init <= 1.0) {
            return Err(Error::Parameter(format!("p_init {} outside (0, 1]", self.p_init)));
        }
        Ok(())
    }
}

/// `score[label] - max_{j != label} score[j]`; negative means misclassified.
pub fn margin(scores: ndarray::ArrayView1<f64>, label: usize) -> f64 {
    let other = scores
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != label)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    scores[label] - other
}

/// Square-size fraction at iteration `it` of `n_iters`: halves at the
/// standard milestones, rescaled from a 10k-iteration budget.
pub fn p_schedule(p_init: f64, it: usize, n_iters: usize) -> f64 {
    let t = if n_iters == 0 {
        0
    } else {
        (it as f64 / n_iters as f64 * 10_000.0) as usize
    };
    let halvings = match t {
        0..=10 => 0,
        11..=50 => 1,
        51..=200 => 2,
        201..=500 => 3,
        501..=1000 => 4,
        1001..=2000 => 5,
        2001..=4000 => 6,
        4001..=6000 => 7,
        6001..=8000 => 8,
        _ => 9,
    };
    p_init / f64::from(1u32 << halvings)
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub adversarial: Vec<Image>,
    /// Margin of each original input.
    pub initial_margins: Vec<f64>,
    /// Margin of each returned image.
    pub final_margins: Vec<f64>,
    /// Black-box evaluations spent per image.
    pub queries: Vec<usize>,
}

struct Track {
    orig: Image,
    best: Image,
    margin: f64,
    rng: Rng,
    queries: usize,
}

fn project(orig: &Image, candidate: &mut Image, eps: f32) {
    ndarray::Zip::from(candidate.array_mut())
        .and(orig.array())
        .for_each(|c, &o| *c = project_value(*c, o, eps));
}

/// Clamps to the eps-ball around `o` and to [0, 1]. `o ± eps` is rounded in
/// f32, so the result is stepped back toward `o` one ulp at a time until the
/// f32 distance itself is within budget.
fn project_value(c: f32, o: f32, eps: f32) -> f32 {
    let mut v = c.clamp(o - eps, o + eps).clamp(0.0, 1.0);
    while (v - o).abs() > eps {
        // v and o are in [0, 1], so bit order is value order
        v = if v > o { f32::from_bits(v.to_bits() - 1) } else { f32::from_bits(v.to_bits() + 1) };
    }
    v
}

/// Untargeted L-infinity square attack (random search). Each proposal is
/// kept only if it strictly lowers the margin; an image stops once it is
/// misclassified. `predict` returns one score row per input image and is
/// the only access to the model.
pub fn square_attack(
    predict: &(dyn Fn(&[&Image]) -> Result<Array2<f64>> + Sync),
    images: &[Image],
    labels: &[usize],
    config: &AttackConfig,
) -> Result<AttackResult> {
    config.validate()?;
    if images.len() != labels.len() {
        return Err(Error::Input(format!("{} images, {} labels", images.len(), labels.len())));
    }
    if images.is_empty() {
        return Ok(AttackResult {
            adversarial: vec![],
            initial_margins: vec![],
            final_margins: vec![],
            queries: vec![],
        });
    }
    let refs: Vec<&Image> = images.iter().collect();
    let scores = predict(&refs)?;
    let initial: Vec<f64> = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| margin(scores.row(i), l))
        .collect();
    let eps = config.epsilon;
    if eps == 0.0 || config.n_iters == 0 {
        return Ok(AttackResult {
            adversarial: images.to_vec(),
            final_margins: initial.clone(),
            initial_margins: initial,
            queries: vec![1; images.len()],
        });
    }

    let mut tracks: Vec<Track> = images
        .iter()
        .zip(&initial)
        .enumerate()
        .map(|(i, (img, &m))| Track {
            orig: img.clone(),
            best: img.clone(),
            margin: m,
            rng: rng_for(config.seed, &[i as u64]),
            queries: 1,
        })
        .collect();

    // vertical stripes: one random sign per (column, channel)
    let proposals: Vec<(usize, Image)> = tracks
        .iter_mut()
        .enumerate()
        .filter(|(_, t)| t.margin >= 0.0)
        .map(|(i, t)| {
            let w = t.orig.width();
            let signs: Vec<[f32; 3]> = (0..w)
                .map(|_| std::array::from_fn(|_| if t.rng.random_bool(0.5) { eps } else { -eps }))
                .collect();
            let mut cand = t.orig.clone();
            for ((_, x, c), v) in cand.array_mut().indexed_iter_mut() {
                *v += signs[x][c];
            }
            project(&t.orig, &mut cand, eps);
            (i, cand)
        })
        .collect();
    evaluate_and_accept(predict, &mut tracks, labels, proposals)?;

    for it in 0..config.n_iters {
        let p = p_schedule(config.p_init, it, config.n_iters);
        let proposals: Vec<(usize, Image)> = tracks
            .iter_mut()
            .enumerate()
            .filter(|(_, t)| t.margin >= 0.0)
            .map(|(i, t)| (i, propose(t, p, eps)))
            .collect();
        if proposals.is_empty() {
            break;
        }
        evaluate_and_accept(predict, &mut tracks, labels, proposals)?;
    }

    Ok(AttackResult {
        final_margins: tracks.iter().map(|t| t.margin).collect(),
        queries: tracks.iter().map(|t| t.queries).collect(),
        adversarial: tracks.into_iter().map(|t| t.best).collect(),
        initial_margins: initial,
    })
}

/// Re-draws one square of side `sqrt(p * h * w)` with a fresh per-channel
/// sign, insisting that the square actually changes.
fn propose(t: &mut Track, p: f64, eps: f32) -> Image {
    let (h, w) = (t.orig.height(), t.orig.width());
    let side = ((p * (h * w) as f64).sqrt().round() as usize).clamp(1, h.min(w).saturating_sub(1).max(1));
    let r0 = t.rng.random_range(0..=h - side);
    let c0 = t.rng.random_range(0..=w - side);
    let mut cand = t.best.clone();
    for _attempt in 0..100 {
        let signs: [f32; 3] = std::array::from_fn(|_| if t.rng.random_bool(0.5) { eps } else { -eps });
        let mut changed = false;
        for r in r0..r0 + side {
            for c in c0..c0 + side {
                for ch in 0..3 {
                    let o = t.orig.array()[[r, c, ch]];
                    let v = project_value(o + signs[ch], o, eps);
                    if (v - t.best.array()[[r, c, ch]]).abs() > 1e-7 {
                        changed = true;
                    }
                    cand.array_mut()[[r, c, ch]] = v;
                }
            }
        }
        if changed {
            break;
        }
    }
    cand
}

fn evaluate_and_accept(
    predict: &(dyn Fn(&[&Image]) -> Result<Array2<f64>> + Sync),
    tracks: &mut [Track],
    labels: &[usize],
    proposals: Vec<(usize, Image)>,
) -> Result<()> {
    if proposals.is_empty() {
        return Ok(());
    }
    let refs: Vec<&Image> = proposals.iter().map(|(_, img)| img).collect();
    let scores = predict(&refs)?;
    if scores.nrows() != proposals.len() {
        return Err(Error::State("predict returned the wrong number of rows".into()));
    }
    for (row, (i, cand)) in proposals.into_iter().enumerate() {
        let t = &mut tracks[i];
        t.queries += 1;
        let m = margin(scores.row(row), labels[i]);
        if m < t.margin {
            t.margin = m;
            t.best = cand;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};

    #[test]
    fn projection_is_within_budget_in_f32() {
        let mut rng = rng_for(5, &[]);
        for eps in [1.0 / 255.0, 8.0 / 255.0, 0.1] {
            for _ in 0..10_000 {
                let o: f32 = rng.random();
                for c in [o + eps, o - eps, o + 2.0 * eps, o - 2.0 * eps, rng.random()] {
                    let v = project_value(c, o, eps);
                    assert!((v - o).abs() <= eps && (0.0..=1.0).contains(&v), "{o} {c} -> {v}");
                }
            }
        }
    }

    #[test]
    fn schedule_halves_at_milestones() {
        assert_eq!(p_schedule(0.8, 0, 10_000), 0.8);
        assert_eq!(p_schedule(0.8, 11, 10_000), 0.4);
        assert_eq!(p_schedule(0.8, 300, 10_000), 0.1);
        assert_eq!(p_schedule(0.8, 9_999, 10_000), 0.8 / 512.0);
        // 500 iterations: milestone 10 of 10k maps to iteration 0.5
        assert_eq!(p_schedule(0.8, 1, 500), 0.8 / 2.0);
    }

    #[test]
    fn margin_sign() {
        assert_eq!(margin(array![2.0, 1.0, -1.0].view(), 0), 1.0);
        assert_eq!(margin(array![2.0, 1.0, -1.0].view(), 2), -3.0);
    }

    fn linear_box(w: Array3<f32>) -> impl Fn(&[&Image]) -> Result<Array2<f64>> + Sync {
        move |imgs: &[&Image]| {
            Ok(Array2::from_shape_fn((imgs.len(), 2), |(i, c)| {
                let s: f32 = (imgs[i].array() * &w).sum();
                if c == 0 {
                    f64::from(s)
                } else {
                    0.0
                }
            }))
        }
    }

    #[test]
    fn zero_budget_and_zero_iterations_return_inputs() {
        let img = Image::filled(4, 4, 0.5);
        let f = linear_box(Array3::from_elem((4, 4, 3), 1.0));
        for cfg in [
            AttackConfig { epsilon: 0.0, ..AttackConfig::default() },
            AttackConfig { n_iters: 0, ..AttackConfig::default() },
        ] {
            let res = square_attack(&f, std::slice::from_ref(&img), &[0], &cfg).unwrap();
            assert_eq!(res.adversarial[0], img);
        }
    }

    #[test]
    fn stays_in_budget_and_never_increases_margin() {
        let mut rng = rng_for(1, &[]);
        let imgs: Vec<Image> = (0..4)
            .map(|_| Image::new(Array3::from_shape_fn((6, 6, 3), |_| rng.random::<f32>())).unwrap())
            .collect();
        let w = Array3::from_shape_fn((6, 6, 3), |_| rng.random_range(-1.0f32..1.0));
        let f = linear_box(w);
        let cfg = AttackConfig { epsilon: 0.05, n_iters: 50, ..AttackConfig::default() };
        let res = square_attack(&f, &imgs, &[0, 1, 0, 1], &cfg).unwrap();
        for (i, (a, o)) in res.adversarial.iter().zip(&imgs).enumerate() {
            let dev = (a.array() - o.array()).iter().fold(0f32, |m, v| m.max(v.abs()));
            assert!(dev <= 0.05 + 1e-7);
            assert!(a.in_unit_range());
            assert!(res.final_margins[i] <= res.initial_margins[i]);
        }
    }
}
