//! A small convolutional engine with hand-written backward passes.
//!
//! Activations are stored channel-major, `(C, N, H, W)`, so that a 3×3
//! convolution is a single GEMM against an im2col matrix and batch
//! normalization works on contiguous per-channel slices. Public entry points
//! take image batches as `(N, H, W, C)`.

mod backbone;
mod layers;
mod network;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{Array2, Array4, ArrayD, ArrayView4, NdFloat};

pub use backbone::{Architecture, Backbone, BackboneConfig};
pub use layers::{Activation, BatchNorm2d, Conv2d, Layer, Linear, MaxPool2, ResidualBlock};
pub use network::{ema_update, init_dual, DualNetworkState, Network, NetworkRole};
pub use network::stack_images;

/// Floating-point element type of the engine (`f32` for training, `f64` for
/// finite-difference checks).
pub trait Real: NdFloat + Sum + Default + Display + Debug {
    const DTYPE: &'static str;

    fn c(v: f64) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    const BYTES: usize;
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn c(v: f64) -> Self {
        v as f32
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn c(v: f64) -> Self {
        v
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// A trainable tensor and its gradient accumulator. Frozen parameters carry
/// no accumulator at all.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub value: ArrayD<F>,
    pub grad: Option<ArrayD<F>>,
    /// Whether weight decay applies (conv and linear weights only).
    pub decay: bool,
}

impl<F: Real> Param<F> {
    pub fn new(value: ArrayD<F>, decay: bool) -> Self {
        let grad = Some(ArrayD::zeros(value.raw_dim()));
        Self { value, grad, decay }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(F::zero());
        }
    }

    pub fn freeze(&mut self) {
        self.grad = None;
    }

    pub fn unfreeze(&mut self) {
        if self.grad.is_none() {
            self.grad = Some(ArrayD::zeros(self.value.raw_dim()));
        }
    }

    pub(crate) fn grad_mut(&mut self) -> &mut ArrayD<F> {
        self.grad
            .as_mut()
            .expect("backward through a frozen parameter")
    }
}

/// `(N, H, W, C)` batch to the internal `(C, N, H, W)` layout.
pub fn to_channel_major<F: Real>(batch: ArrayView4<F>) -> Array4<F> {
    batch.permuted_axes([3, 0, 1, 2]).as_standard_layout().into_owned()
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<F: Real>(logits: &Array2<F>) -> Array2<F> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Row-wise log-softmax with max subtraction.
pub fn log_softmax_rows<F: Real>(logits: &Array2<F>) -> Array2<F> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
        row.mapv_inplace(|v| v - lse);
    }
    out
}
