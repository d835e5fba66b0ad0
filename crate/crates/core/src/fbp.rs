//! Filtered back-projection.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{Error, Result};
use crate::projector::Geometry;

/// Ramp filter apodization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RampFilter {
    #[default]
    RamLak,
    Hann,
}

/// Spatial convolution kernel for offsets `-(n-1)..=(n-1)`, stored at index `offset + n - 1`.
///
/// The Ram-Lak kernel is the band-limited ramp sampled at the detector pitch.
/// Windowed variants are obtained by transforming that kernel over a
/// zero-padded period, applying the window to the frequency response and
/// transforming back; the padding makes the circular and linear convolutions agree.
pub fn filter_kernel(filter: RampFilter, n_detectors: usize, spacing: f64) -> Vec<f64> {
    let n = n_detectors as isize;
    let ramlak = |k: isize| -> f64 {
        if k == 0 {
            1.0 / (4.0 * spacing * spacing)
        } else if k % 2 == 0 {
            0.0
        } else {
            -1.0 / (PI * PI * (k * k) as f64 * spacing * spacing)
        }
    };
    match filter {
        RampFilter::RamLak => (-(n - 1)..n).map(ramlak).collect(),
        RampFilter::Hann => {
            let period = (2 * n_detectors).next_power_of_two();
            let p = period as isize;
            let cos_table: Vec<f64> = (0..period)
                .map(|m| libm::cos(2.0 * PI * m as f64 / period as f64))
                .collect();
            let wrap = |k: isize| -> isize {
                if k > p / 2 {
                    k - p
                } else {
                    k
                }
            };
            // Frequency response of the (real, even) spatial kernel on one period.
            let response: Vec<f64> = (0..p)
                .map(|f| {
                    (0..p)
                        .map(|k| ramlak(wrap(k)) * cos_table[((f * k) % p) as usize])
                        .sum::<f64>()
                })
                .collect();
            let windowed: Vec<f64> = response
                .iter()
                .enumerate()
                .map(|(f, r)| {
                    let fr = f.min(period - f) as f64;
                    r * 0.5 * (1.0 + libm::cos(2.0 * PI * fr / period as f64))
                })
                .collect();
            (-(n - 1)..n)
                .map(|k| {
                    let kk = k.rem_euclid(p);
                    windowed
                        .iter()
                        .enumerate()
                        .map(|(f, r)| r * cos_table[((f as isize * kk) % p) as usize])
                        .sum::<f64>()
                        / period as f64
                })
                .collect()
        }
    }
}

/// Applies the ramp filter independently to every projection angle.
pub fn filter_sinogram(sinogram: &[f64], geometry: &Geometry, filter: RampFilter) -> Vec<f64> {
    let nd = geometry.n_detectors();
    let tau = geometry.detector_spacing();
    let kernel = filter_kernel(filter, nd, tau);
    let mut out = vec![0.0; sinogram.len()];
    for (row_in, row_out) in sinogram.chunks(nd).zip(out.chunks_mut(nd)) {
        for (d, o) in row_out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (dp, v) in row_in.iter().enumerate() {
                acc += kernel[d + nd - 1 - dp] * v;
            }
            *o = acc * tau;
        }
    }
    out
}

/// Filtered back-projection of one sinogram channel.
///
/// Scaled so that a unit-density object reconstructs to unit density.
pub fn fbp(sinogram: &[f64], geometry: &Geometry, filter: RampFilter) -> Result<Vec<f64>> {
    if geometry.n_angles() < 2 {
        return Err(Error::InsufficientData(
            "filtered back-projection needs at least 2 angles".into(),
        ));
    }
    if sinogram.len() != geometry.n_rays() {
        return Err(crate::error::dim_err(alloc::format!(
            "sinogram channel has {} entries, geometry expects {}",
            sinogram.len(),
            geometry.n_rays()
        )));
    }
    let filtered = filter_sinogram(sinogram, geometry, filter);
    let mut image = geometry.back_project(&filtered)?;
    let ps = geometry.pixel_size();
    let scale = PI / geometry.n_angles() as f64 * geometry.detector_spacing() / (ps * ps);
    image.iter_mut().for_each(|v| *v *= scale);
    Ok(image)
}
