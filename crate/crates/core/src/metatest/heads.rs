use argmin::core::{CostFunction, Executor, Gradient, State};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::quasinewton::LBFGS;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Multinomial logistic regression over episode features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    /// `n_way × feature_dim`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    /// Inverse regularization strength.
    pub reg: f64,
}

impl LinearHead {
    pub fn logits(&self, features: ArrayView2<f64>) -> Array2<f64> {
        features.dot(&self.weights.t()) + &self.bias
    }

    pub fn predict(&self, features: ArrayView2<f64>) -> Vec<usize> {
        argmax_rows(&self.logits(features))
    }
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(scores: &Array2<f64>) -> Vec<usize> {
    scores
        .rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

fn check_support(features: ArrayView2<f64>, labels: &[usize], n_way: usize) -> Result<()> {
    if features.nrows() != labels.len() || labels.is_empty() {
        return Err(Error::Input(format!(
            "{} support rows with {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= n_way) {
        return Err(Error::Input(format!("support label {l} >= n_way {n_way}")));
    }
    if let Some(c) = (0..n_way).find(|c| !labels.contains(c)) {
        return Err(Error::Config(format!("class {c} has no support example")));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite support features".into()));
    }
    Ok(())
}

/// `0.5 * |W|^2 + reg * sum_i CE(W x_i + b, y_i)`; bias unpenalized.
struct Objective<'a> {
    x: ArrayView2<'a, f64>,
    y: &'a [usize],
    k: usize,
    reg: f64,
}

impl Objective<'_> {
    fn unpack(&self, p: &[f64]) -> (Array2<f64>, Array1<f64>) {
        let d = self.x.ncols();
        let w = Array2::from_shape_vec((self.k, d), p[..self.k * d].to_vec()).expect("sized");
        let b = Array1::from(p[self.k * d..].to_vec());
        (w, b)
    }

    fn value_and_grad(&self, p: &[f64]) -> (f64, Vec<f64>) {
        let (w, b) = self.unpack(p);
        let mut probs = self.x.dot(&w.t()) + &b;
        let mut ce = 0.0;
        for (mut row, &y) in probs.rows_mut().into_iter().zip(self.y) {
            let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            ce += lse - row[y];
            row.mapv_inplace(|v| (v - lse).exp());
        }
        for (mut row, &y) in probs.rows_mut().into_iter().zip(self.y) {
            row[y] -= 1.0;
        }
        let gw = probs.t().dot(&self.x) * self.reg + &w;
        let gb = probs.sum_axis(Axis(0)) * self.reg;
        let value = 0.5 * w.iter().map(|v| v * v).sum::<f64>() + self.reg * ce;
        (value, gw.into_iter().chain(gb).collect())
    }
}

impl CostFunction for Objective<'_> {
    type Param = Vec<f64>;
    type Output = f64;
    fn cost(&self, p: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        Ok(self.value_and_grad(p).0)
    }
}

impl Gradient for Objective<'_> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;
    fn gradient(&self, p: &Vec<f64>) -> std::result::Result<Vec<f64>, argmin::core::Error> {
        Ok(self.value_and_grad(p).1)
    }
}

/// Fits the head with L-BFGS from zero to a gradient-norm tolerance of
/// 1e-6. Deterministic; the objective does not depend on support order.
pub fn fit_linear_head(features: ArrayView2<f64>, labels: &[usize], n_way: usize, reg: f64) -> Result<LinearHead> {
    if !(reg.is_finite() && reg > 0.0) {
        return Err(Error::Config(format!("reg must be finite and > 0, got {reg}")));
    }
    if n_way < 2 {
        return Err(Error::Config("logistic head needs at least two classes".into()));
    }
    check_support(features, labels, n_way)?;
    let problem = Objective {
        x: features,
        y: labels,
        k: n_way,
        reg,
    };
    let n_params = n_way * (features.ncols() + 1);
    let optimum = LBFGS::new(MoreThuenteLineSearch::new(), 10)
        .with_tolerance_grad(1e-6)
        .and_then(|s| s.with_tolerance_cost(0.0))
        .map_err(|e| Error::State(e.to_string()))
        .and_then(|solver| {
            Executor::new(problem, solver)
                .configure(|s| s.param(vec![0.0; n_params]).max_iters(1000))
                .run()
                .map_err(|e| Error::State(format!("logistic regression failed: {e}")))
        })?;
    let best = optimum
        .state()
        .get_best_param()
        .cloned()
        .ok_or_else(|| Error::State("logistic regression produced no parameters".into()))?;
    let (weights, bias) = Objective {
        x: features,
        y: labels,
        k: n_way,
        reg,
    }
    .unpack(&best);
    Ok(LinearHead { weights, bias, reg })
}

/// Class means of the support features.
pub fn prototypes(features: ArrayView2<f64>, labels: &[usize], n_way: usize) -> Result<Array2<f64>> {
    check_support(features, labels, n_way)?;
    let mut protos = Array2::<f64>::zeros((n_way, features.ncols()));
    let mut counts = vec![0usize; n_way];
    for (row, &l) in features.rows().into_iter().zip(labels) {
        protos.row_mut(l).scaled_add(1.0, &row);
        counts[l] += 1;
    }
    for (mut p, &c) in protos.rows_mut().into_iter().zip(&counts) {
        p.mapv_inplace(|v| v / c as f64);
    }
    Ok(protos)
}

fn squared_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest class mean under Euclidean distance; ties go to the lowest class.
pub fn prototype_classify(
    support: ArrayView2<f64>,
    labels: &[usize],
    n_way: usize,
    query: ArrayView2<f64>,
) -> Result<Vec<usize>> {
    let protos = prototypes(support, labels, n_way)?;
    if query.ncols() != protos.ncols() {
        return Err(Error::Input(format!(
            "query dim {} vs support dim {}",
            query.ncols(),
            protos.ncols()
        )));
    }
    let neg_dist = Array2::from_shape_fn((query.nrows(), n_way), |(i, c)| {
        -squared_distance(query.row(i), protos.row(c))
    });
    Ok(argmax_rows(&neg_dist))
}
