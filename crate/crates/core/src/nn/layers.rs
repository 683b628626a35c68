use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix2, IxDyn};
use rand_distr::{Distribution, Normal, Uniform};

use super::{Param, Real};
use crate::rng::Rng;

fn sample_normal<F: Real>(rng: &mut Rng, shape: &[usize], std: f64) -> ArrayD<F> {
    let dist = Normal::new(0.0, std).expect("finite std");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || F::c(dist.sample(rng)))
}

fn sample_uniform<F: Real>(rng: &mut Rng, shape: &[usize], bound: f64) -> ArrayD<F> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || F::c(dist.sample(rng)))
}

/// Unfolds `(C, N, H, W)` into `(C·k·k, N·H·W)` for a stride-1, same-padded
/// `k × k` convolution.
fn im2col<F: Real>(x: &Array4<F>, k: usize) -> Array2<F> {
    let (c, n, h, w) = x.dim();
    let pad = (k / 2) as isize;
    let plane = h * w;
    let xs = x.as_slice().expect("standard layout");
    let mut cols = Array2::<F>::zeros((c * k * k, n * plane));
    let cs = cols.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize) as usize;
                for ni in 0..n {
                    let src = &xs[(ci * n + ni) * plane..(ci * n + ni + 1) * plane];
                    let dst_off = row * n * plane + ni * plane;
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize || x0 >= x1 {
                            continue;
                        }
                        let s = sy as usize * w;
                        let d = dst_off + y * w;
                        let sx0 = (x0 as isize + dx) as usize;
                        cs[d + x0..d + x1].copy_from_slice(&src[s + sx0..s + sx0 + (x1 - x0)]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im<F: Real>(cols: &Array2<F>, dims: (usize, usize, usize, usize), k: usize) -> Array4<F> {
    let (c, n, h, w) = dims;
    let pad = (k / 2) as isize;
    let plane = h * w;
    let cs = cols.as_slice().expect("standard layout");
    let mut x = Array4::<F>::zeros(dims);
    let xs = x.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize) as usize;
                for ni in 0..n {
                    let dst_off = (ci * n + ni) * plane;
                    let src_off = row * n * plane + ni * plane;
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize || x0 >= x1 {
                            continue;
                        }
                        let d = dst_off + sy as usize * w;
                        let s = src_off + y * w;
                        let dx0 = (x0 as isize + dx) as usize;
                        for (o, i) in xs[d + dx0..d + dx0 + (x1 - x0)]
                            .iter_mut()
                            .zip(&cs[s + x0..s + x1])
                        {
                            *o += *i;
                        }
                    }
                }
            }
        }
    }
    x
}

/// Stride-1, same-padded convolution without bias (always followed by
/// batch normalization here).
#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    pub weight: Param<F>,
    kernel: usize,
    in_channels: usize,
    out_channels: usize,
    cache: Option<(Array2<F>, (usize, usize, usize, usize))>,
}

impl<F: Real> Conv2d<F> {
    /// Kaiming-normal initialization (fan-out, ReLU gain).
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut Rng) -> Self {
        assert!(kernel % 2 == 1, "odd kernels only");
        let std = (2.0 / (out_channels * kernel * kernel) as f64).sqrt();
        Self {
            weight: Param::new(
                sample_normal(rng, &[out_channels, in_channels, kernel, kernel], std),
                true,
            ),
            kernel,
            in_channels,
            out_channels,
            cache: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    fn matmul(&self, x: &Array4<F>) -> (Array4<F>, Array2<F>) {
        let (c, n, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channels");
        let cols = if self.kernel == 1 {
            x.view()
                .into_shape_with_order((c, n * h * w))
                .expect("standard layout")
                .to_owned()
        } else {
            im2col(x, self.kernel)
        };
        let w2 = self
            .weight
            .value
            .view()
            .into_shape_with_order((self.out_channels, c * self.kernel * self.kernel))
            .expect("standard layout");
        let mut out = Array2::<F>::zeros((self.out_channels, n * h * w));
        general_mat_mul(F::one(), &w2, &cols, F::zero(), &mut out);
        let out = out
            .into_shape_with_order((self.out_channels, n, h, w))
            .expect("contiguous");
        (out, cols)
    }

    pub fn forward_eval(&self, x: &Array4<F>) -> Array4<F> {
        self.matmul(x).0
    }

    pub fn forward_train(&mut self, x: &Array4<F>) -> Array4<F> {
        let (out, cols) = self.matmul(x);
        self.cache = Some((cols, x.dim()));
        out
    }

    pub fn backward(&mut self, dy: &Array4<F>) -> Array4<F> {
        let (cols, dims) = self.cache.take().expect("conv backward without forward");
        let (c, n, h, w) = dims;
        let ckk = c * self.kernel * self.kernel;
        let dy = dy.as_standard_layout();
        let dy2 = dy
            .view()
            .into_shape_with_order((self.out_channels, n * h * w))
            .expect("standard layout");
        {
            let mut gw = self
                .weight
                .grad_mut()
                .view_mut()
                .into_shape_with_order((self.out_channels, ckk))
                .expect("standard layout");
            general_mat_mul(F::one(), &dy2, &cols.t(), F::one(), &mut gw);
        }
        let w2 = self
            .weight
            .value
            .view()
            .into_shape_with_order((self.out_channels, ckk))
            .expect("standard layout");
        let mut dcols = Array2::<F>::zeros((ckk, n * h * w));
        general_mat_mul(F::one(), &w2.t(), &dy2, F::zero(), &mut dcols);
        if self.kernel == 1 {
            dcols.into_shape_with_order(dims).expect("contiguous")
        } else {
            col2im(&dcols, dims, self.kernel)
        }
    }
}

/// Per-channel batch normalization over `(N, H, W)`.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<F> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
    momentum: F,
    eps: F,
    cache: Option<(Array4<F>, Array1<F>)>,
}

impl<F: Real> BatchNorm2d<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(ArrayD::ones(IxDyn(&[channels])), false),
            beta: Param::new(ArrayD::zeros(IxDyn(&[channels])), false),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: F::c(0.1),
            eps: F::c(1e-5),
            cache: None,
        }
    }

    pub fn forward_eval(&self, x: &Array4<F>) -> Array4<F> {
        let mut y = x.as_standard_layout().into_owned();
        for (c, mut plane) in y.axis_iter_mut(Axis(0)).enumerate() {
            let inv = F::one() / (self.running_var[c] + self.eps).sqrt();
            let (g, b, m) = (self.gamma.value[c], self.beta.value[c], self.running_mean[c]);
            plane.mapv_inplace(|v| g * (v - m) * inv + b);
        }
        y
    }

    pub fn forward_train(&mut self, x: &Array4<F>) -> Array4<F> {
        let (channels, n, h, w) = x.dim();
        let count = n * h * w;
        let m = F::c(count as f64);
        let mut xhat = x.as_standard_layout().into_owned();
        let mut inv_std = Array1::<F>::zeros(channels);
        let mut y = Array4::<F>::zeros(x.dim());
        for c in 0..channels {
            let mut plane = xhat.index_axis_mut(Axis(0), c);
            let mean = plane.sum() / m;
            let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / m;
            let inv = F::one() / (var + self.eps).sqrt();
            plane.mapv_inplace(|v| (v - mean) * inv);
            inv_std[c] = inv;
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            ndarray::Zip::from(y.index_axis_mut(Axis(0), c))
                .and(&plane)
                .for_each(|o, &xh| *o = g * xh + b);
            let unbiased = if count > 1 {
                var * m / (m - F::one())
            } else {
                var
            };
            let mo = self.momentum;
            self.running_mean[c] = (F::one() - mo) * self.running_mean[c] + mo * mean;
            self.running_var[c] = (F::one() - mo) * self.running_var[c] + mo * unbiased;
        }
        self.cache = Some((xhat, inv_std));
        y
    }

    pub fn backward(&mut self, dy: &Array4<F>) -> Array4<F> {
        let (xhat, inv_std) = self.cache.take().expect("batchnorm backward without forward");
        let channels = xhat.dim().0;
        let m = F::c((xhat.len() / channels) as f64);
        let mut dx = Array4::<F>::zeros(xhat.dim());
        for c in 0..channels {
            let xh = xhat.index_axis(Axis(0), c);
            let d = dy.index_axis(Axis(0), c);
            let g = self.gamma.value[c];
            let mut sum_dy = F::zero();
            let mut sum_dy_xh = F::zero();
            ndarray::Zip::from(&d).and(&xh).for_each(|&a, &b| {
                sum_dy += a;
                sum_dy_xh += a * b;
            });
            self.gamma.grad_mut()[c] += sum_dy_xh;
            self.beta.grad_mut()[c] += sum_dy;
            let scale = g * inv_std[c] / m;
            ndarray::Zip::from(dx.index_axis_mut(Axis(0), c))
                .and(&d)
                .and(&xh)
                .for_each(|o, &a, &b| *o = scale * (m * a - sum_dy - b * sum_dy_xh));
        }
        dx
    }
}

/// `max(x, slope·x)`; slope 0 is the plain ReLU.
#[derive(Debug, Clone)]
pub struct Activation<F> {
    slope: F,
    cache: Option<Array4<F>>,
}

impl<F: Real> Activation<F> {
    pub fn relu() -> Self {
        Self::leaky(F::zero())
    }

    pub fn leaky(slope: F) -> Self {
        Self { slope, cache: None }
    }

    pub fn forward_eval(&self, x: &Array4<F>) -> Array4<F> {
        let s = self.slope;
        x.mapv(|v| if v > F::zero() { v } else { s * v })
    }

    pub fn forward_train(&mut self, x: &Array4<F>) -> Array4<F> {
        let y = self.forward_eval(x);
        self.cache = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Array4<F>) -> Array4<F> {
        let x = self.cache.take().expect("activation backward without forward");
        let s = self.slope;
        let mut dx = dy.as_standard_layout().into_owned();
        ndarray::Zip::from(&mut dx).and(&x).for_each(|d, &v| {
            if v <= F::zero() {
                *d = *d * s;
            }
        });
        dx
    }
}

/// 2×2 max pooling, stride 2, floor on odd sizes.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2 {
    cache: Option<(Vec<usize>, (usize, usize, usize, usize))>,
}

impl MaxPool2 {
    fn pool<F: Real>(x: &Array4<F>, record: bool) -> (Array4<F>, Vec<usize>) {
        let (c, n, h, w) = x.dim();
        let (oh, ow) = (h / 2, w / 2);
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().expect("standard layout");
        let mut out = Array4::<F>::zeros((c, n, oh, ow));
        let mut idx = if record {
            vec![0usize; c * n * oh * ow]
        } else {
            Vec::new()
        };
        let os = out.as_slice_mut().expect("standard layout");
        for p in 0..c * n {
            let base = p * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + 2 * y * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * y + dy) * w + 2 * xx + dx;
                        if xs[i] > xs[best] {
                            best = i;
                        }
                    }
                    let o = (p * oh + y) * ow + xx;
                    os[o] = xs[best];
                    if record {
                        idx[o] = best;
                    }
                }
            }
        }
        (out, idx)
    }

    pub fn forward_eval<F: Real>(&self, x: &Array4<F>) -> Array4<F> {
        Self::pool(x, false).0
    }

    pub fn forward_train<F: Real>(&mut self, x: &Array4<F>) -> Array4<F> {
        let (out, idx) = Self::pool(x, true);
        self.cache = Some((idx, x.dim()));
        out
    }

    pub fn backward<F: Real>(&mut self, dy: &Array4<F>) -> Array4<F> {
        let (idx, dims) = self.cache.take().expect("maxpool backward without forward");
        let mut dx = Array4::<F>::zeros(dims);
        let ds = dx.as_slice_mut().expect("standard layout");
        let dy = dy.as_standard_layout();
        for (&i, &g) in idx.iter().zip(dy.as_slice().expect("standard layout")) {
            ds[i] += g;
        }
        dx
    }
}

/// Fully connected layer on `(N, in)` rows.
#[derive(Debug, Clone)]
pub struct Linear<F> {
    pub weight: Param<F>,
    pub bias: Param<F>,
    cache: Option<Array2<F>>,
}

impl<F: Real> Linear<F> {
    /// Uniform `±1/sqrt(in)` initialization for weight and bias.
    pub fn new(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Self {
            weight: Param::new(sample_uniform(rng, &[outputs, inputs], bound), true),
            bias: Param::new(sample_uniform(rng, &[outputs], bound), false),
            cache: None,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward_eval(&self, x: &Array2<F>) -> Array2<F> {
        let w = self
            .weight
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("2-d weight");
        let b = self
            .bias
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("1-d bias");
        let mut y = Array2::<F>::zeros((x.nrows(), w.nrows()));
        general_mat_mul(F::one(), x, &w.t(), F::zero(), &mut y);
        y += &b;
        y
    }

    pub fn forward_train(&mut self, x: &Array2<F>) -> Array2<F> {
        let y = self.forward_eval(x);
        self.cache = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Array2<F>) -> Array2<F> {
        let x = self.cache.take().expect("linear backward without forward");
        {
            let mut gw = self
                .weight
                .grad_mut()
                .view_mut()
                .into_dimensionality::<Ix2>()
                .expect("2-d weight");
            general_mat_mul(F::one(), &dy.t(), &x, F::one(), &mut gw);
        }
        let gb = self.bias.grad_mut();
        for row in dy.rows() {
            for (g, &d) in gb.iter_mut().zip(row) {
                *g += d;
            }
        }
        let w = self
            .weight
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("2-d weight");
        dy.dot(&w)
    }
}

/// ResNet-12 block: three 3×3 conv-BN stages (leaky ReLU between), a 1×1
/// conv-BN shortcut, leaky ReLU after the sum, then 2×2 max pooling.
#[derive(Debug, Clone)]
pub struct ResidualBlock<F> {
    pub main: Vec<Layer<F>>,
    pub shortcut: Vec<Layer<F>>,
    act: Activation<F>,
    pool: MaxPool2,
}

impl<F: Real> ResidualBlock<F> {
    pub fn new(in_channels: usize, out_channels: usize, rng: &mut Rng) -> Self {
        let slope = F::c(0.1);
        let main = vec![
            Layer::Conv(Conv2d::new(in_channels, out_channels, 3, rng)),
            Layer::BatchNorm(BatchNorm2d::new(out_channels)),
            Layer::Act(Activation::leaky(slope)),
            Layer::Conv(Conv2d::new(out_channels, out_channels, 3, rng)),
            Layer::BatchNorm(BatchNorm2d::new(out_channels)),
            Layer::Act(Activation::leaky(slope)),
            Layer::Conv(Conv2d::new(out_channels, out_channels, 3, rng)),
            Layer::BatchNorm(BatchNorm2d::new(out_channels)),
        ];
        let shortcut = vec![
            Layer::Conv(Conv2d::new(in_channels, out_channels, 1, rng)),
            Layer::BatchNorm(BatchNorm2d::new(out_channels)),
        ];
        Self {
            main,
            shortcut,
            act: Activation::leaky(slope),
            pool: MaxPool2::default(),
        }
    }

    fn forward_eval(&self, x: &Array4<F>) -> Array4<F> {
        let a = self.main.iter().fold(x.clone(), |h, l| l.forward_eval(&h));
        let b = self.shortcut.iter().fold(x.clone(), |h, l| l.forward_eval(&h));
        self.pool.forward_eval(&self.act.forward_eval(&(a + b)))
    }

    fn forward_train(&mut self, x: &Array4<F>) -> Array4<F> {
        let a = self
            .main
            .iter_mut()
            .fold(x.clone(), |h, l| l.forward_train(&h));
        let b = self
            .shortcut
            .iter_mut()
            .fold(x.clone(), |h, l| l.forward_train(&h));
        let s = self.act.forward_train(&(a + b));
        self.pool.forward_train(&s)
    }

    fn backward(&mut self, dy: &Array4<F>) -> Array4<F> {
        let d = self.act.backward(&self.pool.backward(dy));
        let da = self
            .main
            .iter_mut()
            .rev()
            .fold(d.clone(), |g, l| l.backward(&g));
        let db = self.shortcut.iter_mut().rev().fold(d, |g, l| l.backward(&g));
        da + db
    }
}

/// Backbone building blocks.
#[derive(Debug, Clone)]
pub enum Layer<F> {
    Conv(Conv2d<F>),
    BatchNorm(BatchNorm2d<F>),
    Act(Activation<F>),
    MaxPool(MaxPool2),
    Residual(Box<ResidualBlock<F>>),
}

impl<F: Real> Layer<F> {
    pub fn forward_eval(&self, x: &Array4<F>) -> Array4<F> {
        match self {
            Layer::Conv(l) => l.forward_eval(x),
            Layer::BatchNorm(l) => l.forward_eval(x),
            Layer::Act(l) => l.forward_eval(x),
            Layer::MaxPool(l) => l.forward_eval(x),
            Layer::Residual(l) => l.forward_eval(x),
        }
    }

    pub fn forward_train(&mut self, x: &Array4<F>) -> Array4<F> {
        match self {
            Layer::Conv(l) => l.forward_train(x),
            Layer::BatchNorm(l) => l.forward_train(x),
            Layer::Act(l) => l.forward_train(x),
            Layer::MaxPool(l) => l.forward_train(x),
            Layer::Residual(l) => l.forward_train(x),
        }
    }

    pub fn backward(&mut self, dy: &Array4<F>) -> Array4<F> {
        match self {
            Layer::Conv(l) => l.backward(dy),
            Layer::BatchNorm(l) => l.backward(dy),
            Layer::Act(l) => l.backward(dy),
            Layer::MaxPool(l) => l.backward(dy),
            Layer::Residual(l) => l.backward(dy),
        }
    }

    /// Trainable parameters in a fixed traversal order.
    pub fn params(&self) -> Vec<&Param<F>> {
        match self {
            Layer::Conv(l) => vec![&l.weight],
            Layer::BatchNorm(l) => vec![&l.gamma, &l.beta],
            Layer::Act(_) | Layer::MaxPool(_) => vec![],
            Layer::Residual(b) => b
                .main
                .iter()
                .chain(&b.shortcut)
                .flat_map(|l| l.params())
                .collect(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        match self {
            Layer::Conv(l) => vec![&mut l.weight],
            Layer::BatchNorm(l) => vec![&mut l.gamma, &mut l.beta],
            Layer::Act(_) | Layer::MaxPool(_) => vec![],
            Layer::Residual(b) => {
                let b = &mut **b;
                b.main
                    .iter_mut()
                    .chain(b.shortcut.iter_mut())
                    .flat_map(|l| l.params_mut())
                    .collect()
            }
        }
    }

    /// Non-trainable state (batch-norm running statistics).
    pub fn buffers(&self) -> Vec<&Array1<F>> {
        match self {
            Layer::BatchNorm(l) => vec![&l.running_mean, &l.running_var],
            Layer::Residual(b) => b
                .main
                .iter()
                .chain(&b.shortcut)
                .flat_map(|l| l.buffers())
                .collect(),
            _ => vec![],
        }
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Array1<F>> {
        match self {
            Layer::BatchNorm(l) => vec![&mut l.running_mean, &mut l.running_var],
            Layer::Residual(b) => {
                let b = &mut **b;
                b.main
                    .iter_mut()
                    .chain(b.shortcut.iter_mut())
                    .flat_map(|l| l.buffers_mut())
                    .collect()
            }
            _ => vec![],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use rand::Rng as _;

    fn random4(dims: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = rng_for(seed, &[]);
        Array4::from_shape_simple_fn(dims, || rng.random_range(-1.0..1.0))
    }

    /// Direct nested-loop convolution.
    fn conv_direct(x: &Array4<f64>, w: &ArrayD<f64>) -> Array4<f64> {
        let (c, n, h, wd) = x.dim();
        let (o, k) = (w.shape()[0], w.shape()[2]);
        let p = (k / 2) as isize;
        Array4::from_shape_fn((o, n, h, wd), |(oc, ni, y, xx)| {
            let mut acc = 0.0;
            for ci in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let sy = y as isize + ky as isize - p;
                        let sx = xx as isize + kx as isize - p;
                        if sy >= 0 && sy < h as isize && sx >= 0 && sx < wd as isize {
                            acc += w[[oc, ci, ky, kx]] * x[[ci, ni, sy as usize, sx as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = rng_for(1, &[]);
        for k in [1, 3] {
            let conv = Conv2d::<f64>::new(3, 4, k, &mut rng);
            let x = random4((3, 2, 5, 6), 2);
            let got = conv.forward_eval(&x);
            let want = conv_direct(&x, &conv.weight.value);
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let x = random4((2, 2, 4, 5), 3);
        let cols = im2col(&x, 3);
        let mut rng = rng_for(4, &[]);
        let r = Array2::from_shape_simple_fn(cols.dim(), || rng.random_range(-1.0..1.0));
        let lhs: f64 = (&cols * &r).sum();
        let rhs: f64 = (&x * &col2im(&r, x.dim(), 3)).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn batchnorm_train_output_is_standardized() {
        let mut bn = BatchNorm2d::<f64>::new(3);
        let x = random4((3, 4, 3, 3), 5).mapv(|v| 2.0 * v + 1.0);
        let y = bn.forward_train(&x);
        for plane in y.axis_iter(Axis(0)) {
            let mean = plane.mean().unwrap();
            let var = plane.mapv(|v| (v - mean).powi(2)).mean().unwrap();
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let mut pool = MaxPool2::default();
        let x = Array4::from_shape_vec((1, 1, 2, 2), vec![0.1, 0.9, 0.3, 0.2]).unwrap();
        let y = pool.forward_train(&x);
        assert_eq!(y[[0, 0, 0, 0]], 0.9);
        let dx = pool.backward(&Array4::from_elem((1, 1, 1, 1), 2.0));
        assert_eq!(dx.iter().cloned().collect::<Vec<_>>(), vec![0.0, 2.0, 0.0, 0.0]);
    }
}
