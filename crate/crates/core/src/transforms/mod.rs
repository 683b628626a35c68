//! Image-space operations. All functions are pure over value inputs.

mod augment;
mod fourier;
mod normalize;
mod sobel;
mod tint;

pub use augment::{paired_augment, AugmentationParams, ColorJitter};
pub use fourier::{fourier_low_pass, max_frequency_radius};
pub use normalize::{denormalize, normalize, ChannelStats};
pub use sobel::{
    luminance, resize_bilinear, sobel_magnitude, sobel_shape_image, ShapeImage, SOBEL_X, SOBEL_Y,
};
pub use tint::{apply_class_tint, TintPalette};
