use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};

/// Per-pixel equivalent densities (mg/cm³) of the two basis materials.
///
/// Storage is channel-major: the full material-1 plane followed by the
/// material-2 plane, each row-major with `width` pixels per row.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialImage {
    width: usize,
    height: usize,
    pixel_size: f64,
    data: Vec<f64>,
}

impl MaterialImage {
    pub fn zeros(width: usize, height: usize, pixel_size: f64) -> Self {
        Self {
            width,
            height,
            pixel_size,
            data: vec![0.0; 2 * width * height],
        }
    }

    /// Builds an image from channel-major data. Densities must be finite and nonnegative.
    pub fn from_channel_major(width: usize, height: usize, pixel_size: f64, data: Vec<f64>) -> Result<Self> {
        let img = Self::from_raw_unchecked(width, height, pixel_size, data)?;
        if let Some(v) = img.data.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Validation(alloc::format!(
                "material density must be finite and nonnegative, got {v}"
            )));
        }
        Ok(img)
    }

    /// Like [`from_channel_major`](Self::from_channel_major) but allows
    /// negative values, for intermediate estimates before the clamp.
    pub fn from_raw_unchecked(width: usize, height: usize, pixel_size: f64, data: Vec<f64>) -> Result<Self> {
        if data.len() != 2 * width * height {
            return Err(dim_err(alloc::format!(
                "expected {} values for a {width}x{height} two-channel image, got {}",
                2 * width * height,
                data.len()
            )));
        }
        if !(pixel_size > 0.0) {
            return Err(Error::Validation(alloc::format!(
                "pixel size must be positive, got {pixel_size}"
            )));
        }
        Ok(Self {
            width,
            height,
            pixel_size,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_size(&self) -> f64 {
        self.pixel_size
    }

    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let m = self.n_pixels();
        &self.data[c * m..(c + 1) * m]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let m = self.n_pixels();
        &mut self.data[c * m..(c + 1) * m]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn same_shape(&self, other: &MaterialImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Projects onto the nonnegative orthant in place.
    pub fn clamp_nonnegative(&mut self) {
        for v in &mut self.data {
            if !(*v > 0.0) {
                *v = 0.0;
            }
        }
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Maximum of one channel.
    pub fn channel_max(&self, c: usize) -> f64 {
        self.channel(c).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}
