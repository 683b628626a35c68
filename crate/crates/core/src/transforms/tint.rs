use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Chromatic corners of the RGB cube (red, yellow, green, cyan, blue,
/// magenta) expressed as offsets in [-1, 1].
const HUE_CORNERS: [[f32; 3]; 6] = [
    [1.0, -1.0, -1.0],
    [1.0, 1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, 1.0, 1.0],
    [-1.0, -1.0, 1.0],
    [1.0, -1.0, 1.0],
];

/// Per-class additive color offsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TintPalette {
    pub offsets: Vec<[f32; 3]>,
    pub strength: f32,
}

impl TintPalette {
    pub const DEFAULT_STRENGTH: f32 = 0.4;

    /// Class `c` gets hue corner `c mod 6`.
    pub fn hue_corners(n_classes: usize, strength: f32) -> Self {
        Self {
            offsets: (0..n_classes).map(|c| HUE_CORNERS[c % HUE_CORNERS.len()]).collect(),
            strength,
        }
    }

    pub fn with_strength(&self, strength: f32) -> Self {
        Self {
            offsets: self.offsets.clone(),
            strength,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(Error::Parameter(format!(
                "tint strength {} outside [0, 1]",
                self.strength
            )));
        }
        if self
            .offsets
            .iter()
            .flatten()
            .any(|v| !(-1.0..=1.0).contains(v))
        {
            return Err(Error::Parameter("tint offsets must lie in [-1, 1]".into()));
        }
        Ok(())
    }

    pub fn offset(&self, class_id: usize) -> Result<[f32; 3]> {
        self.offsets.get(class_id).copied().ok_or_else(|| {
            Error::Parameter(format!(
                "class {class_id} has no tint (palette covers {} classes)",
                self.offsets.len()
            ))
        })
    }
}

/// `clamp(image + strength * offset[class_id], 0, 1)`.
pub fn apply_class_tint(image: &Image, class_id: usize, palette: &TintPalette) -> Result<Image> {
    palette.validate()?;
    let offset = palette.offset(class_id)?;
    let mut out = image.clone();
    for (c, mut channel) in out.array_mut().axis_iter_mut(ndarray::Axis(2)).enumerate() {
        let shift = palette.strength * offset[c];
        channel.mapv_inplace(|v| (v + shift).clamp(0.0, 1.0));
    }
    Ok(out)
}
