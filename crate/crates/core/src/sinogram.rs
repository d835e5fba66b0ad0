use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};

/// Negative-log measurements for both sources with their inverse-variance weights.
///
/// Each plane is angle-major: ray `n = angle * n_detectors + detector`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergySinogram {
    n_angles: usize,
    n_detectors: usize,
    y: [Vec<f64>; 2],
    weights: [Vec<f64>; 2],
}

impl EnergySinogram {
    pub fn new(n_angles: usize, n_detectors: usize, y: [Vec<f64>; 2], weights: [Vec<f64>; 2]) -> Result<Self> {
        let n = n_angles * n_detectors;
        for plane in y.iter().chain(weights.iter()) {
            if plane.len() != n {
                return Err(dim_err(format!(
                    "sinogram plane has {} entries, expected {n}",
                    plane.len()
                )));
            }
        }
        if y.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Validation("sinogram contains non-finite values".into()));
        }
        if weights.iter().flatten().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::Validation("sinogram weights must be positive".into()));
        }
        Ok(Self {
            n_angles,
            n_detectors,
            y,
            weights,
        })
    }

    /// Unit weights; for callers that only need the measurements.
    pub fn unweighted(n_angles: usize, n_detectors: usize, y: [Vec<f64>; 2]) -> Result<Self> {
        let n = n_angles * n_detectors;
        Self::new(n_angles, n_detectors, y, [vec![1.0; n], vec![1.0; n]])
    }

    pub fn n_angles(&self) -> usize {
        self.n_angles
    }

    pub fn n_detectors(&self) -> usize {
        self.n_detectors
    }

    pub fn n_rays(&self) -> usize {
        self.n_angles * self.n_detectors
    }

    pub fn y(&self, k: usize) -> &[f64] {
        &self.y[k]
    }

    pub fn weights(&self, k: usize) -> &[f64] {
        &self.weights[k]
    }

    pub fn ray(&self, n: usize) -> [f64; 2] {
        [self.y[0][n], self.y[1][n]]
    }

    pub fn ray_weights(&self, n: usize) -> [f64; 2] {
        [self.weights[0][n], self.weights[1][n]]
    }
}

/// Material-density line integrals (mg/cm²) per ray.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialSinogram {
    n_angles: usize,
    n_detectors: usize,
    p: [Vec<f64>; 2],
}

impl MaterialSinogram {
    pub fn new(n_angles: usize, n_detectors: usize, p: [Vec<f64>; 2]) -> Result<Self> {
        let n = n_angles * n_detectors;
        if p.iter().any(|c| c.len() != n) {
            return Err(dim_err(format!("material sinogram planes must have {n} entries")));
        }
        if p.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Validation("material sinogram contains non-finite values".into()));
        }
        Ok(Self {
            n_angles,
            n_detectors,
            p,
        })
    }

    pub fn zeros(n_angles: usize, n_detectors: usize) -> Self {
        let n = n_angles * n_detectors;
        Self {
            n_angles,
            n_detectors,
            p: [vec![0.0; n], vec![0.0; n]],
        }
    }

    pub fn n_angles(&self) -> usize {
        self.n_angles
    }

    pub fn n_detectors(&self) -> usize {
        self.n_detectors
    }

    pub fn n_rays(&self) -> usize {
        self.n_angles * self.n_detectors
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.p[c]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.p[c]
    }

    pub fn ray(&self, n: usize) -> [f64; 2] {
        [self.p[0][n], self.p[1][n]]
    }
}
