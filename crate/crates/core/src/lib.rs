//! Shape-aware few-shot image classification.
//!
//! A standard RGB network (RIN) is trained jointly with a companion network
//! fed Sobel edge-magnitude images (SIN). Bidirectional feature and decision
//! alignment terms with stop-gradients push shape information into the RIN,
//! which is then evaluated alone as a frozen feature extractor on N-way
//! k-shot episodes.
//!
//! Module map:
//! - [`data`]: datasets, class splits, the synthetic shape/texture set and
//!   episode sampling
//! - [`transforms`]: Sobel shape images, paired augmentation, tints, Fourier
//!   low-pass filtering, normalization
//! - [`nn`]: a small CPU convolutional engine with manual backpropagation,
//!   the conv4/ResNet-12 backbones and the dual network container
//! - [`losses`]: cross-entropy, feature/decision alignment, distillation
//! - [`training`]: the joint, sequential-distillation and online-EMA regimes
//! - [`metatest`]: episodic evaluation with logistic-regression or prototype
//!   heads
//! - [`robustness`]: tint scenarios, Fourier sweeps and the square attack

pub mod data;
pub mod error;
pub mod image;
pub mod losses;
pub mod metatest;
pub mod nn;
pub mod rng;
pub mod robustness;
pub mod training;
pub mod transforms;

pub use error::{Error, Result};
pub use image::Image;
