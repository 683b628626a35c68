//! The training objective: cross-entropy, bidirectional feature and decision
//! alignment with stop-gradients, and the distillation terms.
//!
//! Every term returns its value together with the gradient with respect to
//! the one input it trains. Stopped inputs receive no gradient at all, which
//! is how the stop-gradient routing is realized.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{log_softmax_rows, softmax_rows, Real};

/// Alignment and distillation coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub gamma_r: f64,
    pub gamma_s: f64,
    pub lambda_r: f64,
    pub lambda_s: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gamma_r: 1.0,
            gamma_s: 1.0,
            lambda_r: 1.0,
            lambda_s: 1.0,
            alpha: 1.0,
            beta: 1.0,
        }
    }
}

impl LossWeights {
    /// All four alignment factors zero; alpha and beta kept.
    pub fn no_alignment() -> Self {
        Self {
            gamma_r: 0.0,
            gamma_s: 0.0,
            lambda_r: 0.0,
            lambda_s: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("gamma_r", self.gamma_r),
            ("gamma_s", self.gamma_s),
            ("lambda_r", self.lambda_r),
            ("lambda_s", self.lambda_s),
            ("alpha", self.alpha),
            ("beta", self.beta),
        ];
        for (name, v) in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Unweighted per-term values of one step plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce_rin: f64,
    pub ce_sin: f64,
    pub fa_rin: f64,
    pub fa_sin: f64,
    pub da_rin: f64,
    pub da_sin: f64,
    pub ts: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn components(&self) -> [f64; 7] {
        [
            self.ce_rin,
            self.ce_sin,
            self.fa_rin,
            self.fa_sin,
            self.da_rin,
            self.da_sin,
            self.ts,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.components().iter().all(|v| v.is_finite()) && self.total.is_finite()
    }

    /// Element-wise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let sum = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        LossBreakdown {
            ce_rin: sum(|b| b.ce_rin),
            ce_sin: sum(|b| b.ce_sin),
            fa_rin: sum(|b| b.fa_rin),
            fa_sin: sum(|b| b.fa_sin),
            da_rin: sum(|b| b.da_rin),
            da_sin: sum(|b| b.da_sin),
            ts: sum(|b| b.ts),
            total: sum(|b| b.total),
        }
    }
}

/// Which objective the total follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// `ce_rin + ce_sin + fa + da`
    Joint,
    /// joint plus `beta * ts`
    Online,
}

/// Fills in `total` from the unweighted components.
pub fn lsfsl_total(parts: &LossBreakdown, weights: &LossWeights, objective: Objective) -> LossBreakdown {
    let fa = weights.gamma_r * parts.fa_rin + weights.gamma_s * parts.fa_sin;
    let da = weights.lambda_r * parts.da_rin + weights.lambda_s * parts.da_sin;
    let mut total = parts.ce_rin + parts.ce_sin + fa + da;
    if objective == Objective::Online {
        total += weights.beta * parts.ts;
    }
    LossBreakdown { total, ..*parts }
}

fn check_same_shape<F: Real>(a: &Array2<F>, b: &Array2<F>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Input(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.dim(),
            b.dim()
        )));
    }
    if a.nrows() == 0 {
        return Err(Error::Input(format!("{what}: empty batch")));
    }
    Ok(())
}

/// Mean over the batch of `-log softmax(logits)[label]`; gradient with
/// respect to the logits.
pub fn cross_entropy<F: Real>(logits: &Array2<F>, labels: &[usize]) -> Result<(F, Array2<F>)> {
    let (n, k) = logits.dim();
    if labels.len() != n || n == 0 {
        return Err(Error::Input(format!(
            "{} labels for a batch of {n} logits",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Input(format!("label {bad} out of range for {k} classes")));
    }
    let logp = log_softmax_rows(logits);
    let inv_n = F::c(1.0 / n as f64);
    let loss = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -logp[[i, l]])
        .sum::<F>()
        * inv_n;
    let mut grad = logp.mapv(|v| v.exp());
    for (i, &l) in labels.iter().enumerate() {
        grad[[i, l]] -= F::one();
    }
    grad.mapv_inplace(|v| v * inv_n);
    Ok((loss, grad))
}

/// `mean((trained - target)^2)` over all elements, gradient with respect to
/// `trained` only.
pub fn mse_to_target<F: Real>(trained: &Array2<F>, target: &Array2<F>) -> Result<(F, Array2<F>)> {
    check_same_shape(trained, target, "mse")?;
    let diff = trained - target;
    let count = F::c(diff.len() as f64);
    let value = diff.iter().map(|&d| d * d).sum::<F>() / count;
    let scale = F::c(2.0) / count;
    Ok((value, diff.mapv(|d| d * scale)))
}

/// Batch-mean `KL(softmax(a) || softmax(b))` from logits, computed in log
/// space.
pub fn kl_divergence<F: Real>(a: &Array2<F>, b: &Array2<F>) -> Result<F> {
    check_same_shape(a, b, "kl")?;
    let la = log_softmax_rows(a);
    let lb = log_softmax_rows(b);
    let n = F::c(a.nrows() as f64);
    let total = ndarray::Zip::from(&la)
        .and(&lb)
        .fold(F::zero(), |acc, &x, &y| acc + x.exp() * (x - y));
    Ok((total / n).max(F::zero()))
}

/// `KL(softmax(trained) || stopgrad(softmax(target)))`, gradient with
/// respect to `trained` (the first argument).
pub fn kl_trained_first<F: Real>(trained: &Array2<F>, target: &Array2<F>) -> Result<(F, Array2<F>)> {
    let value = kl_divergence(trained, target)?;
    let lp = log_softmax_rows(trained);
    let lq = log_softmax_rows(target);
    let inv_n = F::c(1.0 / trained.nrows() as f64);
    let mut grad = Array2::<F>::zeros(trained.dim());
    for ((mut g, lp), lq) in grad.rows_mut().into_iter().zip(lp.rows()).zip(lq.rows()) {
        let a: Vec<F> = lp.iter().zip(lq.iter()).map(|(&x, &y)| x - y).collect();
        let mean_a = lp.iter().zip(&a).map(|(&x, &ai)| x.exp() * ai).sum::<F>();
        for (j, gj) in g.iter_mut().enumerate() {
            *gj = lp[j].exp() * (a[j] - mean_a) * inv_n;
        }
    }
    Ok((value, grad))
}

/// `KL(stopgrad(softmax(target)) || softmax(trained))`, gradient with
/// respect to `trained` (the second argument).
pub fn kl_trained_second<F: Real>(target: &Array2<F>, trained: &Array2<F>) -> Result<(F, Array2<F>)> {
    let value = kl_divergence(target, trained)?;
    let p = softmax_rows(target);
    let q = softmax_rows(trained);
    let inv_n = F::c(1.0 / trained.nrows() as f64);
    Ok((value, (q - p).mapv(|v| v * inv_n)))
}

/// Upstream gradients for the two networks of one step. `None` means no
/// gradient reaches that tensor.
#[derive(Debug, Clone, Default)]
pub struct DualGrads<F> {
    pub feat_rin: Option<Array2<F>>,
    pub logits_rin: Option<Array2<F>>,
    pub feat_sin: Option<Array2<F>>,
    pub logits_sin: Option<Array2<F>>,
}

fn add_scaled<F: Real>(slot: &mut Option<Array2<F>>, grad: Array2<F>, weight: f64) {
    let scaled = grad.mapv(|v| v * F::c(weight));
    match slot {
        Some(acc) => *acc += &scaled,
        None => *slot = Some(scaled),
    }
}

/// Feature alignment: `gamma_r * MSE(z_rin, sg(z_sin)) + gamma_s * MSE(sg(z_rin), z_sin)`.
#[derive(Debug, Clone)]
pub struct Alignment<F> {
    pub value_rin: F,
    pub value_sin: F,
    pub weighted: F,
    pub grads: DualGrads<F>,
}

pub fn feature_alignment<F: Real>(
    z_rin: &Array2<F>,
    z_sin: &Array2<F>,
    weights: &LossWeights,
) -> Result<Alignment<F>> {
    let (far, g_rin) = mse_to_target(z_rin, z_sin)?;
    let (fas, g_sin) = mse_to_target(z_sin, z_rin)?;
    let mut grads = DualGrads::default();
    if weights.gamma_r != 0.0 {
        add_scaled(&mut grads.feat_rin, g_rin, weights.gamma_r);
    }
    if weights.gamma_s != 0.0 {
        add_scaled(&mut grads.feat_sin, g_sin, weights.gamma_s);
    }
    Ok(Alignment {
        value_rin: far,
        value_sin: fas,
        weighted: F::c(weights.gamma_r) * far + F::c(weights.gamma_s) * fas,
        grads,
    })
}

/// Decision alignment:
/// `lambda_r * KL(softmax(R) || sg(softmax(S))) + lambda_s * KL(sg(softmax(R)) || softmax(S))`.
pub fn decision_alignment<F: Real>(
    logits_rin: &Array2<F>,
    logits_sin: &Array2<F>,
    weights: &LossWeights,
) -> Result<Alignment<F>> {
    let (dar, g_rin) = kl_trained_first(logits_rin, logits_sin)?;
    let (das, g_sin) = kl_trained_second(logits_rin, logits_sin)?;
    let mut grads = DualGrads::default();
    if weights.lambda_r != 0.0 {
        add_scaled(&mut grads.logits_rin, g_rin, weights.lambda_r);
    }
    if weights.lambda_s != 0.0 {
        add_scaled(&mut grads.logits_sin, g_sin, weights.lambda_s);
    }
    Ok(Alignment {
        value_rin: dar,
        value_sin: das,
        weighted: F::c(weights.lambda_r) * dar + F::c(weights.lambda_s) * das,
        grads,
    })
}

/// One term of the joint objective, for isolating gradient routing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    CeRin,
    CeSin,
    FaRin,
    FaSin,
    DaRin,
    DaSin,
    TeacherStudent,
}

/// Outputs of both networks (and the teacher) on one mini-batch.
#[derive(Debug, Clone, Copy)]
pub struct StepOutputs<'a, F> {
    pub z_rin: &'a Array2<F>,
    pub logits_rin: &'a Array2<F>,
    pub z_sin: &'a Array2<F>,
    pub logits_sin: &'a Array2<F>,
    pub teacher_logits: Option<&'a Array2<F>>,
    pub labels: &'a [usize],
}

/// Gradients of a single, unweighted term.
pub fn term_grads<F: Real>(term: Term, out: &StepOutputs<'_, F>) -> Result<DualGrads<F>> {
    let mut g = DualGrads::default();
    match term {
        Term::CeRin => g.logits_rin = Some(cross_entropy(out.logits_rin, out.labels)?.1),
        Term::CeSin => g.logits_sin = Some(cross_entropy(out.logits_sin, out.labels)?.1),
        Term::FaRin => g.feat_rin = Some(mse_to_target(out.z_rin, out.z_sin)?.1),
        Term::FaSin => g.feat_sin = Some(mse_to_target(out.z_sin, out.z_rin)?.1),
        Term::DaRin => g.logits_rin = Some(kl_trained_first(out.logits_rin, out.logits_sin)?.1),
        Term::DaSin => g.logits_sin = Some(kl_trained_second(out.logits_rin, out.logits_sin)?.1),
        Term::TeacherStudent => {
            let t = out
                .teacher_logits
                .ok_or_else(|| Error::Input("teacher-student term without teacher logits".into()))?;
            g.logits_rin = Some(kl_trained_first(out.logits_rin, t)?.1);
        }
    }
    Ok(g)
}

/// The full joint (or online) objective and its routed gradients.
pub fn joint_objective<F: Real>(
    out: &StepOutputs<'_, F>,
    weights: &LossWeights,
    objective: Objective,
) -> Result<(LossBreakdown, DualGrads<F>)> {
    let to64 = |v: F| v.to_f64().unwrap_or(f64::NAN);
    let (ce_rin, g_ce_rin) = cross_entropy(out.logits_rin, out.labels)?;
    let (ce_sin, g_ce_sin) = cross_entropy(out.logits_sin, out.labels)?;
    let fa = feature_alignment(out.z_rin, out.z_sin, weights)?;
    let da = decision_alignment(out.logits_rin, out.logits_sin, weights)?;

    let mut grads = DualGrads {
        feat_rin: fa.grads.feat_rin,
        logits_rin: da.grads.logits_rin,
        feat_sin: fa.grads.feat_sin,
        logits_sin: da.grads.logits_sin,
    };
    add_scaled(&mut grads.logits_rin, g_ce_rin, 1.0);
    add_scaled(&mut grads.logits_sin, g_ce_sin, 1.0);

    let mut ts = 0.0;
    if objective == Objective::Online {
        let teacher = out
            .teacher_logits
            .ok_or_else(|| Error::Input("online objective without teacher logits".into()))?;
        let (v, g) = kl_trained_first(out.logits_rin, teacher)?;
        ts = to64(v);
        if weights.beta != 0.0 {
            add_scaled(&mut grads.logits_rin, g, weights.beta);
        }
    }
    let parts = LossBreakdown {
        ce_rin: to64(ce_rin),
        ce_sin: to64(ce_sin),
        fa_rin: to64(fa.value_rin),
        fa_sin: to64(fa.value_sin),
        da_rin: to64(da.value_rin),
        da_sin: to64(da.value_sin),
        ts,
        total: 0.0,
    };
    Ok((lsfsl_total(&parts, weights, objective), grads))
}

/// `alpha * CE(student, labels) + beta * KL(softmax(teacher) || softmax(student))`
/// with the teacher treated as a constant. Returns the value, its two
/// unweighted parts and the gradient with respect to the student logits.
pub fn sequential_distill_loss<F: Real>(
    student_logits: &Array2<F>,
    teacher_logits: &Array2<F>,
    labels: &[usize],
    alpha: f64,
    beta: f64,
) -> Result<(F, (F, F), Array2<F>)> {
    check_same_shape(student_logits, teacher_logits, "distillation")?;
    let (ce, g_ce) = cross_entropy(student_logits, labels)?;
    let (kl, g_kl) = kl_trained_second(teacher_logits, student_logits)?;
    let (a, b) = (F::c(alpha), F::c(beta));
    let grad = g_ce.mapv(|v| v * a) + g_kl.mapv(|v| v * b);
    Ok((a * ce + b * kl, (ce, kl), grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn uniform_logits_give_log_c() {
        let logits = Array2::<f64>::zeros((3, 7));
        let (v, _) = cross_entropy(&logits, &[0, 3, 6]).unwrap();
        assert_abs_diff_eq!(v, 7f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn ce_two_class_scalar() {
        let (v, _) = cross_entropy(&array![[1.0f64, 0.0]], &[0]).unwrap();
        // -ln(e / (e + 1))
        assert_abs_diff_eq!(v, 0.313262, epsilon = 1e-6);
    }

    #[test]
    fn ce_decreases_with_margin() {
        let mut prev = f64::INFINITY;
        for m in [0.0, 1.0, 2.0, 5.0, 10.0, 40.0] {
            let (v, _) = cross_entropy(&array![[m, 0.0, 0.0]], &[0]).unwrap();
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn ce_rejects_out_of_range_labels() {
        assert!(matches!(
            cross_entropy(&Array2::<f64>::zeros((1, 2)), &[2]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn feature_alignment_hand_value() {
        let w = LossWeights::default();
        let fa = feature_alignment(&array![[1.0f64, 0.0]], &array![[0.0, 1.0]], &w).unwrap();
        assert_abs_diff_eq!(fa.weighted, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn coincident_features_align_with_zero_gradient() {
        let z = array![[0.3f64, -1.0], [2.0, 0.5]];
        let fa = feature_alignment(&z, &z, &LossWeights::default()).unwrap();
        assert_eq!(fa.weighted, 0.0);
        assert!(fa.grads.feat_rin.unwrap().iter().all(|&v| v == 0.0));
        assert!(fa.grads.feat_sin.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_weight_routes_no_gradient() {
        let w = LossWeights {
            gamma_s: 0.0,
            lambda_r: 0.0,
            ..LossWeights::default()
        };
        let a = array![[1.0f64, 0.0]];
        let b = array![[0.0f64, 1.0]];
        assert!(feature_alignment(&a, &b, &w).unwrap().grads.feat_sin.is_none());
        assert!(decision_alignment(&a, &b, &w).unwrap().grads.logits_rin.is_none());
    }

    #[test]
    fn decision_alignment_scalar_kl() {
        let w = LossWeights {
            lambda_s: 0.0,
            ..LossWeights::default()
        };
        let r = array![[0.8f64.ln(), 0.2f64.ln()]];
        let s = array![[0.0f64, 0.0]];
        let da = decision_alignment(&r, &s, &w).unwrap();
        assert_abs_diff_eq!(da.weighted, 0.192745, epsilon = 1e-6);
        let same = decision_alignment(&r, &r, &LossWeights::default()).unwrap();
        assert_abs_diff_eq!(same.weighted, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn kl_is_nonnegative_and_finite_at_extremes() {
        let a = array![[50.0f64, -50.0, 0.0], [-50.0, 50.0, 50.0]];
        let b = array![[-50.0f64, 50.0, 0.0], [50.0, -50.0, -50.0]];
        let v = kl_divergence(&a, &b).unwrap();
        assert!(v.is_finite() && v >= 0.0);
        let v32 = kl_divergence(&a.mapv(|x| x as f32), &b.mapv(|x| x as f32)).unwrap();
        assert!(v32.is_finite() && v32 >= 0.0);
    }

    #[test]
    fn totals_follow_the_objective() {
        let w = LossWeights::default();
        let parts = LossBreakdown {
            ce_rin: 0.1,
            ce_sin: 0.2,
            fa_rin: 0.3,
            da_rin: 0.4,
            ..Default::default()
        };
        assert_abs_diff_eq!(lsfsl_total(&parts, &w, Objective::Joint).total, 1.0, epsilon = 1e-12);
        let none = lsfsl_total(&parts, &LossWeights::no_alignment(), Objective::Joint);
        assert_abs_diff_eq!(none.total, 0.3, epsilon = 1e-12);
        let online = LossBreakdown { ts: 0.2, ..parts };
        let w_half = LossWeights { beta: 0.5, ..w };
        assert_abs_diff_eq!(
            lsfsl_total(&online, &w_half, Objective::Online).total,
            1.1,
            epsilon = 1e-12
        );
    }

    #[test]
    fn doubling_gamma_r_doubles_its_contribution() {
        let parts = LossBreakdown {
            fa_rin: 0.37,
            ..Default::default()
        };
        let w1 = LossWeights {
            gamma_r: 1.5,
            ..LossWeights::no_alignment()
        };
        let w2 = LossWeights { gamma_r: 3.0, ..w1 };
        let t1 = lsfsl_total(&parts, &w1, Objective::Joint).total;
        let t2 = lsfsl_total(&parts, &w2, Objective::Joint).total;
        assert_eq!(t2, 2.0 * t1);
    }

    #[test]
    fn sequential_distill_sums_scalar_oracles() {
        let student = array![[1.0f64, 0.0]];
        let teacher = array![[0.8f64.ln(), 0.2f64.ln()]];
        // KL(teacher || student) with p = (0.8, 0.2), q = softmax(1, 0)
        let q0 = 1f64.exp() / (1f64.exp() + 1.0);
        let kl = 0.8 * (0.8 / q0).ln() + 0.2 * (0.2 / (1.0 - q0)).ln();
        let (v, (ce, k), _) = sequential_distill_loss(&student, &teacher, &[0], 1.0, 1.0).unwrap();
        assert_abs_diff_eq!(ce, 0.313262, epsilon = 1e-6);
        assert_abs_diff_eq!(k, kl, epsilon = 1e-12);
        assert_abs_diff_eq!(v, ce + kl, epsilon = 1e-12);
        let (v0, _, _) = sequential_distill_loss(&student, &teacher, &[0], 1.0, 0.0).unwrap();
        assert_abs_diff_eq!(v0, ce, epsilon = 1e-15);
        let (_, (_, same), _) = sequential_distill_loss(&student, &student, &[0], 1.0, 1.0).unwrap();
        assert_abs_diff_eq!(same, 0.0, epsilon = 1e-15);
    }

    /// Central differences of each scalar term against its analytic gradient.
    #[test]
    fn term_gradients_match_finite_differences() {
        let a = array![[0.3f64, -1.2, 0.7], [1.5, 0.2, -0.4]];
        let b = array![[-0.5f64, 0.9, 0.1], [0.0, -1.0, 2.0]];
        type TermFn = fn(&Array2<f64>, &Array2<f64>) -> (f64, Array2<f64>);
        let terms: [TermFn; 4] = [
            |x, y| kl_trained_first(x, y).unwrap(),
            |x, y| {
                let (v, g) = kl_trained_second(y, x).unwrap();
                (v, g)
            },
            |x, y| mse_to_target(x, y).unwrap(),
            |x, _| cross_entropy(x, &[2, 0]).unwrap(),
        ];
        for f in terms {
            let (_, g) = f(&a, &b);
            for i in 0..2 {
                for j in 0..3 {
                    let h = 1e-6;
                    let mut p = a.clone();
                    p[[i, j]] += h;
                    let mut m = a.clone();
                    m[[i, j]] -= h;
                    let fd = (f(&p, &b).0 - f(&m, &b).0) / (2.0 * h);
                    assert_abs_diff_eq!(fd, g[[i, j]], epsilon = 1e-7);
                }
            }
        }
    }
}
