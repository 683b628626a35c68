use ndarray::{Array1, Array2, ArrayView4, Axis};

use super::backbone::{Backbone, BackboneConfig};
use super::layers::Linear;
use super::{to_channel_major, Param, Real};
use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Which network a parameter stream is drawn for; RIN and SIN get
/// independent initializations from the same seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetworkRole {
    Rin,
    Sin,
    Teacher,
    Student,
}

/// Feature extractor `f` plus linear classifier head `g`.
#[derive(Debug, Clone)]
pub struct Network<F> {
    config: BackboneConfig,
    pub backbone: Backbone<F>,
    pub head: Linear<F>,
}

impl<F: Real> Network<F> {
    pub fn new(config: &BackboneConfig, n_classes: usize, role: NetworkRole) -> Result<Self> {
        if n_classes == 0 {
            return Err(Error::Config("n_classes must be > 0".into()));
        }
        let mut rng = rng_for(config.init_seed, &[role as u64]);
        let backbone = Backbone::new(config, &mut rng)?;
        let head = Linear::new(config.feature_dim, n_classes, &mut rng);
        Ok(Self {
            config: *config,
            backbone,
            head,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn n_classes(&self) -> usize {
        self.head.outputs()
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    fn check_batch(&self, batch: &ArrayView4<F>) -> Result<()> {
        let (_, h, w, c) = batch.dim();
        if c != 3 || h != self.config.input_size || w != self.config.input_size {
            return Err(Error::Input(format!(
                "batch of {h}x{w}x{c} images, network expects {0}x{0}x3",
                self.config.input_size
            )));
        }
        Ok(())
    }

    /// Eval-mode features for an `(N, H, W, 3)` batch.
    pub fn forward_features(&self, batch: ArrayView4<F>) -> Result<Array2<F>> {
        self.check_batch(&batch)?;
        Ok(self.backbone.forward_eval(&to_channel_major(batch)))
    }

    /// Eval-mode logits.
    pub fn forward_logits(&self, batch: ArrayView4<F>) -> Result<Array2<F>> {
        Ok(self.head.forward_eval(&self.forward_features(batch)?))
    }

    /// Eval-mode `(features, logits)`.
    pub fn forward_eval(&self, batch: ArrayView4<F>) -> Result<(Array2<F>, Array2<F>)> {
        let z = self.forward_features(batch)?;
        let logits = self.head.forward_eval(&z);
        Ok((z, logits))
    }

    /// Train-mode forward (batch statistics, caches kept for backward).
    pub fn forward_train(&mut self, batch: ArrayView4<F>) -> Result<(Array2<F>, Array2<F>)> {
        self.check_batch(&batch)?;
        if !self.requires_grad() {
            return Err(Error::State("train-mode forward on a frozen network".into()));
        }
        let z = self.backbone.forward_train(&to_channel_major(batch));
        let logits = self.head.forward_train(&z);
        Ok((z, logits))
    }

    /// Accumulates parameter gradients given upstream gradients on the
    /// features and/or logits of the last train-mode forward.
    pub fn backward(&mut self, d_features: Option<&Array2<F>>, d_logits: Option<&Array2<F>>) {
        let mut dz = match d_logits {
            Some(dl) => self.head.backward(dl),
            None => {
                // head cache still has to be released
                let n = d_features.map(|d| d.nrows()).unwrap_or(0);
                self.head
                    .backward(&Array2::zeros((n, self.head.outputs())))
            }
        };
        if let Some(df) = d_features {
            dz += df;
        }
        self.backbone.backward(&dz);
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        let mut out: Vec<&Param<F>> = self
            .backbone
            .layers
            .iter()
            .flat_map(|l| l.params())
            .collect();
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut out: Vec<&mut Param<F>> = self
            .backbone
            .layers
            .iter_mut()
            .flat_map(|l| l.params_mut())
            .collect();
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn buffers(&self) -> Vec<&Array1<F>> {
        self.backbone.layers.iter().flat_map(|l| l.buffers()).collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Array1<F>> {
        self.backbone
            .layers
            .iter_mut()
            .flat_map(|l| l.buffers_mut())
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    /// True iff every parameter carries a gradient accumulator.
    pub fn requires_grad(&self) -> bool {
        self.params().iter().all(|p| p.requires_grad())
    }

    /// Drops all gradient accumulators.
    pub fn freeze(&mut self) {
        self.params_mut().into_iter().for_each(Param::freeze);
    }

    pub fn unfreeze(&mut self) {
        self.params_mut().into_iter().for_each(Param::unfreeze);
    }

    /// All parameter values then all buffers, flattened in traversal order.
    pub fn flat_state(&self) -> Vec<F> {
        let mut out = Vec::new();
        for p in self.params() {
            out.extend(p.value.iter().copied());
        }
        for b in self.buffers() {
            out.extend(b.iter().copied());
        }
        out
    }

    /// Parameter gradients flattened in traversal order (zeros if frozen).
    pub fn flat_grad(&self) -> Vec<F> {
        let mut out = Vec::new();
        for p in self.params() {
            match &p.grad {
                Some(g) => out.extend(g.iter().copied()),
                None => out.extend(std::iter::repeat_n(F::zero(), p.len())),
            }
        }
        out
    }

    pub fn load_flat_state(&mut self, values: &[F]) -> Result<()> {
        let expected: usize =
            self.param_count() + self.buffers().iter().map(|b| b.len()).sum::<usize>();
        if values.len() != expected {
            return Err(Error::State(format!(
                "state has {} values, network expects {expected}",
                values.len()
            )));
        }
        let mut it = values.iter().copied();
        for p in self.params_mut() {
            p.value.iter_mut().for_each(|v| *v = it.next().expect("counted"));
        }
        for b in self.buffers_mut() {
            b.iter_mut().for_each(|v| *v = it.next().expect("counted"));
        }
        Ok(())
    }

    /// Same architecture and tensor shapes.
    pub fn same_shape(&self, other: &Network<F>) -> bool {
        let a = self.params();
        let b = other.params();
        a.len() == b.len()
            && a.iter().zip(&b).all(|(x, y)| x.value.shape() == y.value.shape())
            && self.buffers().len() == other.buffers().len()
    }

    /// Casts every parameter and buffer to another element type.
    pub fn cast<G: Real>(&self) -> Network<G> {
        let mut out = Network::<G>::new(&self.config, self.n_classes(), NetworkRole::Rin)
            .expect("config already validated");
        let values: Vec<G> = self
            .flat_state()
            .into_iter()
            .map(|v| G::c(v.to_f64().expect("finite")))
            .collect();
        out.load_flat_state(&values).expect("same architecture");
        if !self.requires_grad() {
            out.freeze();
        }
        out
    }
}

/// RIN, SIN and the optional EMA teacher.
#[derive(Debug, Clone)]
pub struct DualNetworkState<F> {
    pub rin: Network<F>,
    pub sin: Network<F>,
    pub teacher: Option<Network<F>>,
    pub momentum: f64,
}

/// Independently initialized RIN and SIN with identical shapes; both draws
/// derive from `seed`.
pub fn init_dual<F: Real>(
    config: &BackboneConfig,
    n_base_classes: usize,
    seed: u64,
) -> Result<DualNetworkState<F>> {
    let config = BackboneConfig {
        init_seed: seed,
        ..*config
    };
    Ok(DualNetworkState {
        rin: Network::new(&config, n_base_classes, NetworkRole::Rin)?,
        sin: Network::new(&config, n_base_classes, NetworkRole::Sin)?,
        teacher: None,
        momentum: 0.999,
    })
}

/// `teacher <- m * teacher + (1 - m) * student` for every parameter and
/// batch-norm running statistic. The teacher stays gradient-free.
pub fn ema_update<F: Real>(teacher: &mut Network<F>, student: &Network<F>, momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::State(format!("EMA momentum {momentum} outside [0, 1]")));
    }
    if !teacher.same_shape(student) {
        return Err(Error::State("teacher and student shapes differ".into()));
    }
    // written as a + (1 - m)(b - a) so that a == b is an exact fixed point
    let keep = F::c(1.0 - momentum);
    for (t, s) in teacher.params_mut().into_iter().zip(student.params()) {
        ndarray::Zip::from(&mut t.value)
            .and(&s.value)
            .for_each(|a, &b| *a += keep * (b - *a));
        t.grad = None;
    }
    for (t, s) in teacher.buffers_mut().into_iter().zip(student.buffers()) {
        ndarray::Zip::from(t).and(s).for_each(|a, &b| *a += keep * (b - *a));
    }
    Ok(())
}

/// Stacks `(H, W, 3)` tensors into an `(N, H, W, 3)` batch.
pub fn stack_images<F: Real>(images: &[ndarray::Array3<f32>]) -> ndarray::Array4<F> {
    let views: Vec<_> = images.iter().map(|a| a.view()).collect();
    ndarray::stack(Axis(0), &views)
        .expect("uniform image sizes")
        .mapv(|v| F::c(f64::from(v)))
}
