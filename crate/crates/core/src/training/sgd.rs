use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::nn::{Param, Real};

/// SGD with heavy-ball momentum and coupled L2 weight decay:
/// `v <- mu * v + (g + wd * w)`, `w <- w - lr * v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<F> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<ArrayD<F>>,
}

impl<F: Real> Sgd<F> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Updates every parameter that has a gradient. The parameter list must
    /// be presented in the same order on every call.
    pub fn step(&mut self, params: Vec<&mut Param<F>>, lr: f64) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} tensors, got {}",
                self.velocity.len(),
                params.len()
            )));
        }
        let (mu, wd, lr) = (F::c(self.momentum), F::c(self.weight_decay), F::c(lr));
        for (p, v) in params.into_iter().zip(self.velocity.iter_mut()) {
            let Some(g) = &p.grad else { continue };
            let decay = if p.decay { wd } else { F::zero() };
            ndarray::Zip::from(&mut p.value)
                .and(g)
                .and(v)
                .for_each(|w, &g, v| {
                    *v = mu * *v + g + decay * *w;
                    *w -= lr * *v;
                });
        }
        Ok(())
    }

    pub fn flat_state(&self) -> Vec<F> {
        self.velocity.iter().flat_map(|v| v.iter().copied()).collect()
    }

    /// Restores velocities for parameters shaped like `params`.
    pub fn load_flat_state(&mut self, params: &[&Param<F>], values: &[F]) -> Result<()> {
        let total: usize = params.iter().map(|p| p.len()).sum();
        if values.len() != total {
            return Err(Error::load(
                "optimizer",
                format!("{} values for {total} parameters", values.len()),
            ));
        }
        let mut offset = 0;
        self.velocity = params
            .iter()
            .map(|p| {
                let n = p.len();
                let v = ArrayD::from_shape_vec(p.value.raw_dim(), values[offset..offset + n].to_vec())
                    .expect("sized");
                offset += n;
                v
            })
            .collect();
        Ok(())
    }
}
