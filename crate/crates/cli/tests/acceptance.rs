//! Acceptance suite. Each test checks one criterion and prints a single
//! `criterion N: PASS|FAIL ...` line before asserting. Trained toy models are
//! shared between criteria through process-wide caches.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Array3, Array4, Axis};
use rand::Rng;
use shapefsl::data::{generate_toy_dataset, Dataset, EpisodeSpec, Split, ToyConfig};
use shapefsl::losses::{joint_objective, term_grads, LossWeights, Objective, StepOutputs, Term};
use shapefsl::metatest::{
    evaluate_episodes, fit_linear_head, prototype_classify, task_episode, EpisodeHead, EvalConfig,
    EvalReport, Evaluator,
};
use shapefsl::nn::{init_dual, BackboneConfig, Network};
use shapefsl::robustness::{
    attack_sweep, margin, run_tint_scenarios, square_attack, tint_pretraining_split, AttackConfig,
    PretrainSource, TintScenario, TintSuite,
};
use shapefsl::rng::rng_for;
use shapefsl::training::{
    backward_dual, pretrain, resume, Algorithm, CheckpointBundle, RunOptions, TrainConfig,
};
use shapefsl::transforms::{
    apply_class_tint, fourier_low_pass, max_frequency_radius, sobel_shape_image, TintPalette,
};
use shapefsl::Image;
use shapefsl_cli::{
    cmd_ablate, cmd_distill, cmd_evaluate, cmd_make_toy_data, cmd_pretrain, cmd_robustness,
    run_ablation, AblationTerms, RunConfig,
};

const SEEDS: [u64; 3] = [0, 1, 2];
const N_TASKS: usize = 200;

fn verdict(n: usize, pass: bool, summary: &str) {
    println!("criterion {n}: {} {summary}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} failed: {summary}");
}

// ---------------------------------------------------------------------------
// shared toy models

type Models = HashMap<(String, u64), Arc<CheckpointBundle>>;

fn model_cache() -> &'static Mutex<Models> {
    static CACHE: OnceLock<Mutex<Models>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Trains (once per process) the model named `key` for `seed`. The lock is
/// released while training so different keys can train concurrently.
fn cached(key: &str, seed: u64, train: impl FnOnce() -> CheckpointBundle) -> Arc<CheckpointBundle> {
    static IN_FLIGHT: OnceLock<Mutex<HashMap<(String, u64), Arc<OnceLock<Arc<CheckpointBundle>>>>>> = OnceLock::new();
    let k = (key.to_string(), seed);
    if let Some(b) = model_cache().lock().unwrap().get(&k) {
        return b.clone();
    }
    let cell = IN_FLIGHT
        .get_or_init(|| Mutex::new(HashMap::new()))
        .lock()
        .unwrap()
        .entry(k.clone())
        .or_default()
        .clone();
    let b = cell.get_or_init(|| Arc::new(train())).clone();
    model_cache().lock().unwrap().insert(k, b.clone());
    b
}

/// Serializes the criteria so each one's wall-clock budget measures its own
/// work rather than CPU contention with the others.
fn heavy() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn toy(rho: f32, seed: u64) -> Dataset {
    generate_toy_dataset(&ToyConfig { cue_correlation: rho, ..ToyConfig::default() }, seed)
        .unwrap()
        .dataset
}

fn train(dataset: &Dataset, config: &TrainConfig) -> CheckpointBundle {
    let t = Instant::now();
    let b = pretrain(dataset, config, None, &RunOptions::default()).unwrap().bundle;
    eprintln!("  trained {} seed {} in {:.0?}", config.algorithm.name(), config.seed, t.elapsed());
    b
}

fn recipe(algorithm: Algorithm, seed: u64) -> TrainConfig {
    TrainConfig { algorithm, seed, ..TrainConfig::default() }
}

/// Desk-scale toy models on the fully cue-correlated set.
fn bias_model(algorithm: Algorithm, seed: u64) -> Arc<CheckpointBundle> {
    cached(&format!("bias_{}", algorithm.name()), seed, || train(&toy(1.0, seed), &recipe(algorithm, seed)))
}

fn clean_accuracy(bundle: &CheckpointBundle, dataset: &Dataset, seed: u64) -> EvalReport {
    let ev = Evaluator::from_bundle(bundle, EvalConfig::default());
    evaluate_episodes(&ev, dataset, Split::Test, &EpisodeSpec::new(5, 1, 15, 0), N_TASKS, seed).unwrap()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn random_batch(n: usize, size: usize, rng: &mut impl Rng) -> Array4<f64> {
    Array4::from_shape_fn((n, size, size, 3), |_| rng.random_range(-1.0..1.0))
}

// ---------------------------------------------------------------------------
// 1. stop-gradient routing

#[test]
fn criterion_01_stop_gradient_routing() {
    let _serial = heavy();
    let t = Instant::now();
    let cfg = BackboneConfig::conv4_toy(32, 64);
    let mut rng = rng_for(11, &[]);
    let mut violations = Vec::new();
    let mut checks = 0;
    for batch in 0..20u64 {
        let mut dual = init_dual::<f32>(&cfg, 10, batch).unwrap();
        let n = 8;
        let rgb = random_batch(n, 32, &mut rng).mapv(|v| v as f32);
        let shape = random_batch(n, 32, &mut rng).mapv(|v| v as f32);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..10)).collect();
        // (term, RIN receives gradient, SIN receives gradient)
        let cases = [
            (Term::FaRin, true, false),
            (Term::FaSin, false, true),
            (Term::DaRin, true, false),
            (Term::DaSin, false, true),
        ];
        for (term, rin_live, sin_live) in cases {
            // backward consumes the forward caches, so each term gets a fresh pass
            let (z_r, l_r) = dual.rin.forward_train(rgb.view()).unwrap();
            let (z_s, l_s) = dual.sin.forward_train(shape.view()).unwrap();
            let out = StepOutputs {
                z_rin: &z_r,
                logits_rin: &l_r,
                z_sin: &z_s,
                logits_sin: &l_s,
                teacher_logits: None,
                labels: &labels,
            };
            // isolated term
            let g = term_grads(term, &out).unwrap();
            dual.rin.zero_grad();
            dual.sin.zero_grad();
            backward_dual(&mut dual.rin, &mut dual.sin, &g, n);
            // same term through the joint objective with only its weight on
            let w = LossWeights {
                gamma_r: f64::from(u8::from(term == Term::FaRin)),
                gamma_s: f64::from(u8::from(term == Term::FaSin)),
                lambda_r: f64::from(u8::from(term == Term::DaRin)),
                lambda_s: f64::from(u8::from(term == Term::DaSin)),
                ..LossWeights::default()
            };
            let (_, mut joint) = joint_objective(&out, &w, Objective::Joint).unwrap();
            // drop the CE parts, which always flow, and compare the routing
            let ce_r = term_grads(Term::CeRin, &out).unwrap().logits_rin.unwrap();
            let ce_s = term_grads(Term::CeSin, &out).unwrap().logits_sin.unwrap();
            joint.logits_rin = joint.logits_rin.map(|l| l - &ce_r);
            joint.logits_sin = joint.logits_sin.map(|l| l - &ce_s);
            let live = |g: &Option<Array2<f32>>| g.as_ref().is_some_and(|g| g.iter().any(|v| *v != 0.0));
            let routed_rin = live(&joint.feat_rin) || live(&joint.logits_rin);
            let routed_sin = live(&joint.feat_sin) || live(&joint.logits_sin);
            let nz = |net: &Network<f32>| net.flat_grad().iter().filter(|v| **v != 0.0).count();
            let (rin_nz, sin_nz) = (nz(&dual.rin), nz(&dual.sin));
            checks += 1;
            let ok = (rin_nz > 0) == rin_live
                && (sin_nz > 0) == sin_live
                && routed_rin == rin_live
                && routed_sin == sin_live;
            if !ok {
                violations.push(format!("batch {batch} {term:?}: rin {rin_nz} sin {sin_nz} nonzero"));
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        1,
        violations.is_empty() && secs < 60.0,
        &format!("{checks} isolated-term backprops, {} leaks into the stopped network ({secs:.1}s) {violations:?}", violations.len()),
    );
}

// ---------------------------------------------------------------------------
// 2. gradient check of the full objective

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn ce(logits: &Array2<f64>, labels: &[usize]) -> f64 {
    logits
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(r, &y)| -softmax(&r.to_vec())[y].ln())
        .sum::<f64>()
        / labels.len() as f64
}

fn mse(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).mapv(|v| v * v).sum() / a.len() as f64
}

fn kl(p_logits: &Array2<f64>, q_logits: &Array2<f64>) -> f64 {
    p_logits
        .rows()
        .into_iter()
        .zip(q_logits.rows())
        .map(|(a, b)| {
            let (p, q) = (softmax(&a.to_vec()), softmax(&b.to_vec()));
            p.iter().zip(&q).map(|(p, q)| p * (p.ln() - q.ln())).sum::<f64>()
        })
        .sum::<f64>()
        / p_logits.nrows() as f64
}

#[test]
fn criterion_02_gradient_check() {
    let _serial = heavy();
    let t = Instant::now();
    let cfg = BackboneConfig::conv4_toy(16, 3);
    let mut dual = init_dual::<f64>(&cfg, 3, 5).unwrap();
    let params = dual.rin.param_count() + dual.sin.param_count();
    let mut rng = rng_for(21, &[]);
    let n = 6;
    let rgb = random_batch(n, 16, &mut rng);
    let shape = random_batch(n, 16, &mut rng);
    let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let w = LossWeights { gamma_r: 0.7, gamma_s: 1.3, lambda_r: 0.9, lambda_s: 1.1, ..LossWeights::default() };

    dual.rin.zero_grad();
    dual.sin.zero_grad();
    shapefsl::training::dual_gradients(&mut dual.rin, &mut dual.sin, None, rgb.view(), shape.view(), &labels, &w).unwrap();
    let (z_r0, l_r0) = dual.rin.forward_train(rgb.view()).unwrap();
    let (z_s0, l_s0) = dual.sin.forward_train(shape.view()).unwrap();

    // With stop-gradients each network descends its own share of the total,
    // the other network's outputs held fixed.
    let rin_loss = |net: &mut Network<f64>| {
        let (z, l) = net.forward_train(rgb.view()).unwrap();
        ce(&l, &labels) + w.gamma_r * mse(&z, &z_s0) + w.lambda_r * kl(&l, &l_s0)
    };
    let sin_loss = |net: &mut Network<f64>| {
        let (z, l) = net.forward_train(shape.view()).unwrap();
        ce(&l, &labels) + w.gamma_s * mse(&z, &z_r0) + w.lambda_s * kl(&l_r0, &l)
    };

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut sampled = 0;
    for k in 0..50 {
        let on_rin = k % 2 == 0;
        let net = if on_rin { &mut dual.rin } else { &mut dual.sin };
        let analytic_all = net.flat_grad();
        let n_params = net.param_count();
        let idx = rng.random_range(0..n_params);
        let analytic = analytic_all[idx];
        let mut state = net.flat_state();
        let base = state.clone();
        // params come first in the flat state
        state[idx] = base[idx] + h;
        net.load_flat_state(&state).unwrap();
        let plus = if on_rin { rin_loss(net) } else { sin_loss(net) };
        state[idx] = base[idx] - h;
        net.load_flat_state(&state).unwrap();
        let minus = if on_rin { rin_loss(net) } else { sin_loss(net) };
        net.load_flat_state(&base).unwrap();
        let numeric = (plus - minus) / (2.0 * h);
        let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
        sampled += 1;
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        2,
        params <= 1000 && worst < 1e-3 && secs < 120.0,
        &format!("{sampled} parameters of a {params}-parameter dual net, max relative error {worst:.2e} ({secs:.1}s)"),
    );
}

// ---------------------------------------------------------------------------
// 3. transform oracles

fn random_image(h: usize, w: usize, rng: &mut impl Rng) -> Image {
    Image::new(Array3::from_shape_fn((h, w, 3), |_| rng.random::<f32>())).unwrap()
}

/// Dense 3×3 Sobel on the reflect-101 padded 2× upsampled luma, normalized
/// by its max and averaged back over 2×2 blocks.
fn sobel_oracle(img: &Image) -> Array2<f64> {
    let (h, w) = (img.height(), img.width());
    let a = img.array();
    let luma = Array2::from_shape_fn((h, w), |(y, x)| {
        0.299 * f64::from(a[[y, x, 0]]) + 0.587 * f64::from(a[[y, x, 1]]) + 0.114 * f64::from(a[[y, x, 2]])
    });
    let sample = |s: f64, n: usize| {
        let s = s.clamp(0.0, (n - 1) as f64);
        let lo = s.floor() as usize;
        (lo, (lo + 1).min(n - 1), s - lo as f64)
    };
    let (uh, uw) = (2 * h, 2 * w);
    let up = Array2::from_shape_fn((uh, uw), |(y, x)| {
        let (y0, y1, fy) = sample((y as f64 + 0.5) / 2.0 - 0.5, h);
        let (x0, x1, fx) = sample((x as f64 + 0.5) / 2.0 - 0.5, w);
        (luma[[y0, x0]] * (1.0 - fx) + luma[[y0, x1]] * fx) * (1.0 - fy)
            + (luma[[y1, x0]] * (1.0 - fx) + luma[[y1, x1]] * fx) * fy
    });
    let refl = |i: isize, n: usize| -> usize {
        if i < 0 {
            (-i) as usize
        } else if i as usize >= n {
            2 * n - 2 - i as usize
        } else {
            i as usize
        }
    };
    let kx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    let ky = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
    let mut mag = Array2::from_shape_fn((uh, uw), |(y, x)| {
        let (mut gx, mut gy) = (0.0, 0.0);
        for (dy, (rx, ry)) in kx.iter().zip(&ky).enumerate() {
            for dx in 0..3 {
                let v = up[[refl(y as isize + dy as isize - 1, uh), refl(x as isize + dx as isize - 1, uw)]];
                gx += rx[dx] * v;
                gy += ry[dx] * v;
            }
        }
        (gx * gx + gy * gy).sqrt()
    });
    let max = mag.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        mag.mapv_inplace(|v| v / max);
    }
    Array2::from_shape_fn((h, w), |(y, x)| {
        (mag[[2 * y, 2 * x]] + mag[[2 * y + 1, 2 * x]] + mag[[2 * y, 2 * x + 1]] + mag[[2 * y + 1, 2 * x + 1]]) / 4.0
    })
}

/// Direct O(N^4) DFT low-pass of one channel.
fn dft_low_pass(ch: &Array2<f64>, radius: f64) -> Array2<f64> {
    use std::f64::consts::PI;
    let (h, w) = ch.dim();
    let freq = |k: usize, n: usize| if k <= (n - 1) / 2 { k as f64 } else { k as f64 - n as f64 };
    let signed = |k: usize, n: usize| {
        // even n: bin n/2 sits at -n/2 on the centered spectrum
        if n % 2 == 0 && k == n / 2 { -((n / 2) as f64) } else { freq(k, n) }
    };
    let mut re = Array2::<f64>::zeros((h, w));
    let mut im = Array2::<f64>::zeros((h, w));
    for u in 0..h {
        for v in 0..w {
            let (fu, fv) = (signed(u, h), signed(v, w));
            if (fu * fu + fv * fv).sqrt() > radius {
                continue;
            }
            let (mut sr, mut si) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let a = -2.0 * PI * (u as f64 * y as f64 / h as f64 + v as f64 * x as f64 / w as f64);
                    sr += ch[[y, x]] * a.cos();
                    si += ch[[y, x]] * a.sin();
                }
            }
            re[[u, v]] = sr;
            im[[u, v]] = si;
        }
    }
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut s = 0.0;
        for u in 0..h {
            for v in 0..w {
                let a = 2.0 * PI * (u as f64 * y as f64 / h as f64 + v as f64 * x as f64 / w as f64);
                s += re[[u, v]] * a.cos() - im[[u, v]] * a.sin();
            }
        }
        (s / (h * w) as f64).clamp(0.0, 1.0)
    })
}

#[test]
fn criterion_03_transform_oracles() {
    let _serial = heavy();
    let t = Instant::now();
    let mut rng = rng_for(31, &[]);
    let mut failures = Vec::new();
    let mut sobel_err: f64 = 0.0;
    let mut dft_err: f64 = 0.0;
    for _ in 0..10 {
        let img = random_image(8, 8, &mut rng);
        let got = sobel_shape_image(&img).unwrap();
        let want = sobel_oracle(&img);
        for ((y, x, _), v) in got.image().array().indexed_iter() {
            sobel_err = sobel_err.max((f64::from(*v) - want[[y, x]]).abs());
        }
        for radius in [0.5, 1.0, 2.0, 2.9, 4.0] {
            let got = fourier_low_pass(&img, radius).unwrap();
            for c in 0..3 {
                let ch = img.array().index_axis(Axis(2), c).mapv(f64::from);
                let want = dft_low_pass(&ch, radius);
                for ((y, x), w) in want.indexed_iter() {
                    dft_err = dft_err.max((f64::from(got.array()[[y, x, c]]) - w).abs());
                }
            }
        }
        // identity at the maximal radius
        if fourier_low_pass(&img, max_frequency_radius(8, 8)).unwrap() != img {
            failures.push("radius=max is not the identity".to_string());
        }
        // DC only at radius 0: every pixel equals the channel mean
        let dc = fourier_low_pass(&img, 0.0).unwrap();
        for c in 0..3 {
            let m = img.array().index_axis(Axis(2), c).mapv(f64::from).mean().unwrap();
            if dc.array().index_axis(Axis(2), c).iter().any(|v| (f64::from(*v) - m).abs() > 1e-6) {
                failures.push(format!("radius=0 channel {c} not constant at its mean"));
            }
        }
        // tint: clamp(x + s * offset)
        let palette = TintPalette::hue_corners(6, 0.4);
        for class in 0..6 {
            let tinted = apply_class_tint(&img, class, &palette).unwrap();
            let off = palette.offsets[class];
            for ((y, x, c), v) in tinted.array().indexed_iter() {
                let want = (img.array()[[y, x, c]] + 0.4 * off[c]).clamp(0.0, 1.0);
                if *v != want {
                    failures.push(format!("tint class {class} pixel ({y},{x},{c}): {v} vs {want}"));
                }
            }
        }
    }
    if sobel_err > 1e-6 {
        failures.push(format!("sobel error {sobel_err:.2e}"));
    }
    if dft_err > 1e-5 {
        failures.push(format!("fourier error {dft_err:.2e}"));
    }
    let secs = t.elapsed().as_secs_f64();
    failures.truncate(5);
    verdict(
        3,
        failures.is_empty() && secs < 60.0,
        &format!("sobel max err {sobel_err:.1e}, low-pass max err {dft_err:.1e}, identity/DC/tint exact ({secs:.1}s) {failures:?}"),
    );
}

// ---------------------------------------------------------------------------
// 4. classifier oracles

/// Newton's method on `0.5 ||W||^2 + C * sum CE` (bias unpenalized).
fn newton_logistic(x: &Array2<f64>, y: &[usize], k: usize, c: f64) -> (DMatrix<f64>, DVector<f64>) {
    let (n, d) = x.dim();
    let p = k * (d + 1);
    let mut theta = DVector::<f64>::zeros(p);
    let xt = |i: usize, j: usize| if j < d { x[[i, j]] } else { 1.0 };
    let objective = |theta: &DVector<f64>| {
        let mut f = 0.0;
        for a in 0..k {
            for j in 0..d {
                f += 0.5 * theta[a * (d + 1) + j].powi(2);
            }
        }
        for i in 0..n {
            let z: Vec<f64> = (0..k).map(|a| (0..=d).map(|j| theta[a * (d + 1) + j] * xt(i, j)).sum()).collect();
            f -= c * softmax(&z)[y[i]].ln();
        }
        f
    };
    for _ in 0..100 {
        let mut g = DVector::<f64>::zeros(p);
        let mut hm = DMatrix::<f64>::zeros(p, p);
        for a in 0..k {
            for j in 0..d {
                g[a * (d + 1) + j] = theta[a * (d + 1) + j];
                hm[(a * (d + 1) + j, a * (d + 1) + j)] = 1.0;
            }
            // the softmax is invariant to a shared bias shift; pin it
            hm[(a * (d + 1) + d, a * (d + 1) + d)] += 1e-9;
        }
        for i in 0..n {
            let z: Vec<f64> = (0..k).map(|a| (0..=d).map(|j| theta[a * (d + 1) + j] * xt(i, j)).sum()).collect();
            let pr = softmax(&z);
            for a in 0..k {
                let r = pr[a] - f64::from(u8::from(y[i] == a));
                for j in 0..=d {
                    g[a * (d + 1) + j] += c * r * xt(i, j);
                }
                for b in 0..k {
                    let wab = pr[a] * (f64::from(u8::from(a == b)) - pr[b]);
                    for j in 0..=d {
                        for l in 0..=d {
                            hm[(a * (d + 1) + j, b * (d + 1) + l)] += c * wab * xt(i, j) * xt(i, l);
                        }
                    }
                }
            }
        }
        if g.norm() < 1e-10 {
            break;
        }
        let step = hm.lu().solve(&g).expect("positive definite");
        let f0 = objective(&theta);
        let mut s = 1.0;
        while objective(&(&theta - s * &step)) > f0 - 1e-4 * s * g.dot(&step) && s > 1e-8 {
            s *= 0.5;
        }
        theta -= s * &step;
    }
    let wm = DMatrix::from_fn(k, d, |a, j| theta[a * (d + 1) + j]);
    let b = DVector::from_fn(k, |a, _| theta[a * (d + 1) + d]);
    (wm, b)
}

#[test]
fn criterion_04_classifier_oracles() {
    let _serial = heavy();
    let t = Instant::now();
    let mut rng = rng_for(41, &[]);
    // prototypes vs brute force
    let mut proto_mismatch = 0;
    for _ in 0..100 {
        let (n_way, k_shot, d, nq) = (5, 5, 16, 15);
        let support = Array2::from_shape_fn((n_way * k_shot, d), |_| rng.random_range(-1.0..1.0));
        let labels: Vec<usize> = (0..n_way * k_shot).map(|i| i % n_way).collect();
        let query = Array2::from_shape_fn((nq, d), |_| rng.random_range(-1.0..1.0));
        let got = prototype_classify(support.view(), &labels, n_way, query.view()).unwrap();
        let want: Vec<usize> = query
            .rows()
            .into_iter()
            .map(|q| {
                let mut best = (0, f64::INFINITY);
                for c in 0..n_way {
                    let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
                    let mut dist = 0.0;
                    for j in 0..d {
                        let m = members.iter().map(|&i| support[[i, j]]).sum::<f64>() / members.len() as f64;
                        dist += (q[j] - m) * (q[j] - m);
                    }
                    if dist < best.1 {
                        best = (c, dist);
                    }
                }
                best.0
            })
            .collect();
        proto_mismatch += got.iter().zip(&want).filter(|(a, b)| a != b).count();
    }
    // logistic head vs Newton on Gaussian blobs
    let (mut agree, mut total) = (0, 0);
    for _ in 0..40 {
        let (n_way, k_shot, d, nq) = (5, 5, 8, 30);
        let centers = Array2::from_shape_fn((n_way, d), |_| rng.random_range(-1.5..1.5));
        let blob = |c: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            (0..d).map(|j| centers[[c, j]] + rng.random_range(-1.0..1.0) + rng.random_range(-1.0..1.0)).collect()
        };
        let labels: Vec<usize> = (0..n_way * k_shot).map(|i| i % n_way).collect();
        let sx: Vec<f64> = labels.iter().flat_map(|&c| blob(c, &mut rng)).collect();
        let support = Array2::from_shape_vec((labels.len(), d), sx).unwrap();
        let qx: Vec<f64> = (0..nq).flat_map(|i| blob(i % n_way, &mut rng)).collect();
        let query = Array2::from_shape_vec((nq, d), qx).unwrap();
        let head = fit_linear_head(support.view(), &labels, n_way, 1.0).unwrap();
        let got = head.predict(query.view());
        let (wm, b) = newton_logistic(&support, &labels, n_way, 1.0);
        for (i, g) in got.iter().enumerate() {
            let q = DVector::from_fn(d, |j, _| query[[i, j]]);
            let scores = &wm * q + &b;
            agree += usize::from(scores.argmax().0 == *g);
            total += 1;
        }
    }
    let rate = agree as f64 / total as f64;
    let secs = t.elapsed().as_secs_f64();
    verdict(
        4,
        proto_mismatch == 0 && rate >= 0.99 && secs < 120.0,
        &format!("prototype mismatches {proto_mismatch}/1500, logistic agreement with Newton oracle {:.2}% of {total} queries ({secs:.1}s)", 100.0 * rate),
    );
}

// ---------------------------------------------------------------------------
// 5. EMA teacher

#[test]
fn criterion_05_ema_teacher() {
    let _serial = heavy();
    let t = Instant::now();
    let small = ToyConfig {
        images_per_class: 4,
        ..ToyConfig::default()
    };
    let dataset = generate_toy_dataset(&small, 3).unwrap().dataset;
    let steps = 50;
    let m = 0.9;
    let config = TrainConfig {
        algorithm: Algorithm::Online,
        feature_dim: 8,
        epochs: steps,
        lr_decay_epochs: vec![],
        batch_size: 64,
        ema_momentum: m,
        seed: 3,
        ..TrainConfig::default()
    };
    // one step per epoch: 12 base classes x 4 images < one batch
    let n_base = dataset.split(Split::Train).classes().count();
    let t0 = init_dual::<f32>(&config.backbone(config.seed), n_base, config.seed).unwrap().rin.flat_state();
    let mut snapshots: Vec<Vec<f32>> = Vec::new();
    let first = pretrain(&dataset, &config, None, &RunOptions { stop_after_epoch: Some(1), ..RunOptions::default() }).unwrap();
    let mut bundle = first.bundle;
    snapshots.push(bundle.rin.flat_state());
    for e in 2..=steps {
        let out = resume(bundle, &dataset, &config, None, &RunOptions { stop_after_epoch: Some(e), ..RunOptions::default() }).unwrap();
        assert_eq!(out.steps.len(), 1);
        bundle = out.bundle;
        snapshots.push(bundle.rin.flat_state());
    }
    let teacher = bundle.teacher.as_ref().unwrap().flat_state();
    // closed form: T_k = m^k T_0 + sum_j (1 - m) m^(k - j) S_j
    let k = snapshots.len();
    let mut worst: f64 = 0.0;
    for i in 0..teacher.len() {
        let mut v = m.powi(k as i32) * f64::from(t0[i]);
        for (j, s) in snapshots.iter().enumerate() {
            v += (1.0 - m) * m.powi((k - 1 - j) as i32) * f64::from(s[i]);
        }
        worst = worst.max((v - f64::from(teacher[i])).abs());
    }
    let moved = teacher.iter().zip(&t0).filter(|(a, b)| a != b).count();
    let secs = t.elapsed().as_secs_f64();
    verdict(
        5,
        k == steps && worst <= 1e-6 && moved > 0 && secs < 60.0,
        &format!("{k} steps, {} teacher values, max deviation from closed-form EMA {worst:.2e} ({secs:.1}s)", teacher.len()),
    );
}

// ---------------------------------------------------------------------------
// 6. toy bias experiment

#[test]
fn criterion_06_toy_bias_experiment() {
    let _serial = heavy();
    let t = Instant::now();
    let mut base = Vec::new();
    let mut lsfsl = Vec::new();
    for seed in SEEDS {
        let dataset = toy(1.0, seed);
        base.push(clean_accuracy(&bias_model(Algorithm::Baseline, seed), &dataset, seed).mean_acc);
        lsfsl.push(clean_accuracy(&bias_model(Algorithm::Lsfsl, seed), &dataset, seed).mean_acc);
    }
    let gap = 100.0 * (mean(&lsfsl) - mean(&base));
    let secs = t.elapsed().as_secs_f64();
    verdict(
        6,
        gap >= 3.0 && secs < 1800.0,
        &format!(
            "decorrelated 5-way 1-shot, {N_TASKS} tasks: LSFSL {:.2}% vs baseline {:.2}% (+{gap:.2} points; per seed {:?} vs {:?}) ({secs:.0}s)",
            100.0 * mean(&lsfsl),
            100.0 * mean(&base),
            lsfsl.iter().map(|a| (1000.0 * a).round() / 10.0).collect::<Vec<_>>(),
            base.iter().map(|a| (1000.0 * a).round() / 10.0).collect::<Vec<_>>()
        ),
    );
}

// ---------------------------------------------------------------------------
// 7. tint scenarios

/// Tint experiments use a texture-free pretraining set so clean models sit
/// well above chance and shortcut damage is measurable.
const TINT_RHO: f32 = 0.0;
const TINT_STRENGTH: f32 = 0.3;

#[test]
fn criterion_07_tint_scenarios() {
    let _serial = heavy();
    let t = Instant::now();
    let scenarios = [TintScenario::Q, TintScenario::Pt, TintScenario::PtQ, TintScenario::S, TintScenario::PtS];
    // acc[model][seed] = clean, Q, PT, PT+Q, S, PT+S
    let mut acc: HashMap<&str, Vec<Vec<f64>>> = HashMap::new();
    for seed in SEEDS {
        let dataset = toy(TINT_RHO, seed);
        let palette = TintPalette::hue_corners(dataset.n_classes(), TINT_STRENGTH);
        let tinted = tint_pretraining_split(&dataset, &palette).unwrap();
        for alg in [Algorithm::Baseline, Algorithm::Lsfsl] {
            let clean = cached(&format!("tint_clean_{}", alg.name()), seed, || train(&dataset, &recipe(alg, seed)));
            let pt = cached(&format!("tint_pt_{}", alg.name()), seed, || train(&tinted, &recipe(alg, seed)));
            let suite = TintSuite {
                dataset: &dataset,
                split: Split::Test,
                spec: EpisodeSpec::new(5, 1, 15, 0),
                n_tasks: N_TASKS,
                seed,
                palette: palette.clone(),
                eval: EvalConfig::default(),
            };
            let reports = run_tint_scenarios(&suite, &clean, Some(PretrainSource::Checkpoint(&pt)), &scenarios).unwrap();
            acc.entry(alg.name()).or_default().push(reports.iter().map(|r| r.mean_acc).collect());
        }
    }
    let means = |alg: &str| -> Vec<f64> { (0..6).map(|i| mean(&acc[alg].iter().map(|r| r[i]).collect::<Vec<_>>())).collect() };
    let (b, l) = (means("baseline"), means("lsfsl"));
    let ordered = |m: &[f64]| m[0] >= m[1] && m[1] >= m[2] && m[2] >= m[3];
    let dominates = (1..6).all(|i| l[i] >= b[i]);
    let fmt = |m: &[f64]| {
        ["clean", "Q", "PT", "PT+Q", "S", "PT+S"]
            .iter()
            .zip(m)
            .map(|(n, v)| format!("{n} {:.1}", 100.0 * v))
            .collect::<Vec<_>>()
            .join(", ")
    };
    let per_seed = |alg: &str| {
        acc[alg]
            .iter()
            .map(|r| format!("{:.1}/{:.1}", 100.0 * r[1], 100.0 * r[2]))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let secs = t.elapsed().as_secs_f64();
    verdict(
        7,
        ordered(&b) && ordered(&l) && dominates && secs < 2700.0,
        &format!(
            "mean over 3 seeds — baseline [{}] ordering {}; LSFSL [{}] ordering {}; LSFSL >= baseline in all five scenarios: {dominates}; per-seed Q/PT baseline {} LSFSL {} ({secs:.0}s)",
            fmt(&b),
            if ordered(&b) { "holds" } else { "violated" },
            fmt(&l),
            if ordered(&l) { "holds" } else { "violated" },
            per_seed("baseline"),
            per_seed("lsfsl"),
        ),
    );
}

// ---------------------------------------------------------------------------
// 8. square attack

#[test]
fn criterion_08_square_attack() {
    let _serial = heavy();
    let t = Instant::now();
    let seed = 0;
    let dataset = toy(1.0, seed);
    let eps = 8.0 / 255.0;
    let attack = AttackConfig { epsilon: eps, seed, ..AttackConfig::default() };
    let spec = EpisodeSpec::new(5, 1, 15, 0);
    let mut lines = Vec::new();
    let mut pass = true;
    for alg in [Algorithm::Baseline, Algorithm::Lsfsl] {
        let bundle = bias_model(alg, seed);
        let ev = Evaluator::from_bundle(&bundle, EvalConfig::default());
        // contract checks on one episode's queries
        let ep = task_episode(&dataset, Split::Test, &spec, seed, 0).unwrap();
        let support = ev.extract(&ep.support.iter().map(|s| &s.image).collect::<Vec<_>>()).unwrap();
        let head = EpisodeHead::fit(&ev.config, support.view(), &ep.support_labels, 5).unwrap();
        let black_box = |imgs: &[&Image]| Ok(head.scores(ev.extract(imgs)?.view()));
        let originals: Vec<Image> = ep.query.iter().map(|q| q.image.clone()).collect();
        let res = square_attack(&black_box, &originals, &ep.query_labels, &attack).unwrap();
        let dev = res
            .adversarial
            .iter()
            .zip(&originals)
            .flat_map(|(a, o)| (a.array() - o.array()).into_iter())
            .fold(0f32, |m, v| m.max(v.abs()));
        let in_range = res.adversarial.iter().all(|a| a.in_unit_range());
        let monotone = res.final_margins.iter().zip(&res.initial_margins).all(|(f, i)| f <= i);
        let recomputed = black_box(&res.adversarial.iter().collect::<Vec<_>>()).unwrap();
        // re-scoring the returned images reproduces the recorded margins up to
        // the batch-composition noise of the eval forward pass (~1e-5)
        let drift = ep
            .query_labels
            .iter()
            .enumerate()
            .map(|(i, &y)| (margin(recomputed.row(i), y) - res.final_margins[i]).abs())
            .fold(0f64, f64::max);
        let consistent = drift < 1e-4;
        // accuracy drop over 10 tasks
        let sweep = attack_sweep(&ev, &dataset, Split::Test, &spec, &[0.0, eps], 10, seed, &attack).unwrap();
        let clean = sweep[0].report.mean_acc;
        let adv = sweep[1].report.mean_acc;
        let ok = dev <= eps && in_range && monotone && consistent && clean - adv >= 0.10;
        pass &= ok;
        lines.push(format!(
            "{}: max |delta| {dev:.5} <= {eps:.5}, in [0,1] {in_range}, margins non-increasing {monotone}, re-scored margin drift {drift:.1e}, clean {:.1}% -> {:.1}% at 8/255",
            alg.name(),
            100.0 * clean,
            100.0 * adv
        ));
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(8, pass && secs < 600.0 + 300.0, &format!("{} ({secs:.0}s incl. cached training)", lines.join("; ")));
}

// ---------------------------------------------------------------------------
// 9. determinism

fn tiny_run_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 4;
    cfg.data.toy.images_per_class = 6;
    cfg.train.feature_dim = 8;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 24;
    cfg.train.lr_decay_epochs = vec![1];
    cfg.evaluation.episodes = vec![[5, 1]];
    cfg.evaluation.n_query = 3;
    cfg.evaluation.n_tasks = 5;
    cfg.robustness.n_tasks = 4;
    cfg.robustness.fourier.as_mut().unwrap().radii = vec![0.0, 3.0];
    let a = cfg.robustness.attack.as_mut().unwrap();
    a.epsilons = vec![0.0, 0.03];
    a.n_iters = 4;
    a.n_tasks = 2;
    cfg.ablation.n_tasks = 3;
    cfg.ablation.n_query = 3;
    cfg
}

fn files_under(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn criterion_09_determinism() {
    let _serial = heavy();
    let t = Instant::now();
    let cfg = tiny_run_config().resolve().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let run = |tag: &str| -> std::path::PathBuf {
        let root = dir.path().join(tag);
        let pre = root.join("pretrain");
        cmd_pretrain(&cfg, &pre, None).unwrap();
        let ckpt = pre.join("checkpoints/final");
        cmd_distill(&cfg, &root.join("distill"), &ckpt).unwrap();
        cmd_evaluate(&cfg, &root.join("evaluate"), &ckpt).unwrap();
        cmd_robustness(&cfg, &root.join("robustness"), &ckpt, None).unwrap();
        cmd_ablate(&cfg, &root.join("ablate")).unwrap();
        cmd_make_toy_data(&cfg, &root.join("toy")).unwrap();
        root
    };
    let a = files_under(&run("a"));
    let b = files_under(&run("b"));
    let names = |v: &[(String, Vec<u8>)]| v.iter().map(|f| f.0.clone()).collect::<Vec<_>>();
    let differing: Vec<&str> = a.iter().zip(&b).filter(|(x, y)| x != y).map(|(x, _)| x.0.as_str()).collect();
    let metrics = a.iter().filter(|f| f.0.ends_with("metrics.jsonl")).count();
    let secs = t.elapsed().as_secs_f64();
    verdict(
        9,
        names(&a) == names(&b) && differing.is_empty() && metrics >= 2,
        &format!(
            "6 commands rerun with identical resolved configs: {} files compared, {} differ {:?} ({secs:.0}s)",
            a.len(),
            differing.len(),
            differing.iter().take(5).collect::<Vec<_>>()
        ),
    );
}

// ---------------------------------------------------------------------------
// 10. ablation grid

/// Rows whose mean accuracy is within this many points of the best row
/// count as tied for best.
const TIE_POINTS: f64 = 1.0;

#[test]
fn criterion_10_ablation_grid() {
    let _serial = heavy();
    let t = Instant::now();
    let mut cfg = RunConfig::default();
    cfg.ablation.seeds = SEEDS.to_vec();
    cfg.ablation.n_tasks = N_TASKS;
    let cfg = cfg.resolve().unwrap();
    let trainer = |ds: &Dataset, seed: u64, row: usize, tc: &TrainConfig| -> anyhow::Result<CheckpointBundle> {
        let b = match row {
            0 => bias_model(Algorithm::Baseline, seed),
            7 => bias_model(Algorithm::Lsfsl, seed),
            _ => cached(&format!("ablation_row{row}"), seed, || train(ds, tc)),
        };
        Ok((*b).clone())
    };
    let rows = run_ablation(&cfg, &trainer).unwrap();
    let best = rows.iter().map(|r| r.mean_acc).fold(f64::NEG_INFINITY, f64::max);
    let all_on = rows.last().unwrap();
    let shaped = rows.len() == 8 && rows.iter().zip(AblationTerms::GRID).all(|(r, g)| r.terms == g && r.accuracies.len() == 3);
    let tied_best = 100.0 * (best - all_on.mean_acc) <= TIE_POINTS;
    let table = rows
        .iter()
        .map(|r| format!("{} {:.1}", r.label, 100.0 * r.mean_acc))
        .collect::<Vec<_>>()
        .join(" | ");
    let secs = t.elapsed().as_secs_f64();
    verdict(
        10,
        shaped && tied_best,
        &format!("8-row grid, mean over 3 seeds: {table}; all-terms row {:.2} vs best {:.2} (tie margin {TIE_POINTS} point) ({secs:.0}s)", 100.0 * all_on.mean_acc, 100.0 * best),
    );
}
