//! Parallel-beam system matrix `A` and its exact transpose.
//!
//! Both directions share one ray traversal so `back_project` is the literal
//! adjoint of `forward_project`.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::OnceCell;
use core::f64::consts::PI;

use crate::error::{dim_err, Error, Result};

/// How a ray's coupling to the pixel grid is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RayModel {
    /// Linear interpolation between the two nearest pixels on every row
    /// (or column) crossed.
    #[default]
    Joseph,
    /// Exact intersection lengths of the ray with each pixel square.
    Siddon,
}

pub const DEFAULT_DETECTORS: usize = 1024;

/// Geometries whose system matrix would exceed this many stored couplings
/// trace rays on the fly instead of caching them.
pub const MAX_CACHED_ENTRIES: usize = 16_000_000;

/// Row-compressed couplings produced by [`Geometry::trace_ray`], one row per ray.
#[derive(Debug)]
pub struct SystemMatrix {
    row_start: Vec<usize>,
    pixel: Vec<u32>,
    weight: Vec<f64>,
}

impl SystemMatrix {
    fn build(geometry: &Geometry) -> Self {
        let mut row_start = Vec::with_capacity(geometry.n_rays() + 1);
        let mut pixel = Vec::new();
        let mut weight = Vec::new();
        row_start.push(0);
        for a in 0..geometry.n_angles() {
            for d in 0..geometry.n_detectors {
                geometry.trace_ray(a, d, |m, w| {
                    pixel.push(m as u32);
                    weight.push(w);
                });
                row_start.push(pixel.len());
            }
        }
        Self {
            row_start,
            pixel,
            weight,
        }
    }

    pub fn nnz(&self) -> usize {
        self.pixel.len()
    }

    fn row(&self, n: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.row_start[n], self.row_start[n + 1]);
        (&self.pixel[a..b], &self.weight[a..b])
    }
}

/// Parallel-beam acquisition over `[0, π)` with a centred detector array.
#[derive(Debug, Clone)]
pub struct Geometry {
    angles: Vec<f64>,
    trig: Vec<(f64, f64)>,
    n_detectors: usize,
    detector_spacing: f64,
    width: usize,
    height: usize,
    pixel_size: f64,
    ray_model: RayModel,
    matrix: OnceCell<Option<Arc<SystemMatrix>>>,
}

impl PartialEq for Geometry {
    fn eq(&self, other: &Self) -> bool {
        self.angles == other.angles
            && self.n_detectors == other.n_detectors
            && self.detector_spacing == other.detector_spacing
            && self.width == other.width
            && self.height == other.height
            && self.pixel_size == other.pixel_size
            && self.ray_model == other.ray_model
    }
}

impl Geometry {
    /// `n_angles` uniform angles and [`DEFAULT_DETECTORS`] detectors spanning the image diagonal.
    pub fn parallel(n_angles: usize, width: usize, height: usize, pixel_size: f64) -> Result<Self> {
        let diag = Self::diagonal(width, height, pixel_size);
        Self::with_detectors(
            n_angles,
            width,
            height,
            pixel_size,
            DEFAULT_DETECTORS,
            diag / DEFAULT_DETECTORS as f64,
        )
    }

    /// Uniform angles with an explicit detector array. The array must span the image diagonal.
    pub fn with_detectors(
        n_angles: usize,
        width: usize,
        height: usize,
        pixel_size: f64,
        n_detectors: usize,
        detector_spacing: f64,
    ) -> Result<Self> {
        if n_angles == 0 || n_detectors == 0 || width == 0 || height == 0 {
            return Err(Error::Validation(
                "geometry needs at least one angle, detector and pixel".into(),
            ));
        }
        if !(pixel_size > 0.0) || !(detector_spacing > 0.0) {
            return Err(Error::Validation(
                "pixel size and detector spacing must be positive".into(),
            ));
        }
        let diag = Self::diagonal(width, height, pixel_size);
        let span = n_detectors as f64 * detector_spacing;
        if span < diag * (1.0 - 1e-9) {
            return Err(Error::Validation(format!(
                "detector span {span:.4} cm does not cover the image diagonal {diag:.4} cm"
            )));
        }
        let angles: Vec<f64> = (0..n_angles).map(|a| PI * a as f64 / n_angles as f64).collect();
        let trig = angles.iter().map(|&t| (libm::cos(t), libm::sin(t))).collect();
        Ok(Self {
            angles,
            trig,
            n_detectors,
            detector_spacing,
            width,
            height,
            pixel_size,
            ray_model: RayModel::Joseph,
            matrix: OnceCell::new(),
        })
    }

    /// Smallest detector count at spacing `pixel_size` spanning the diagonal.
    pub fn compact(n_angles: usize, width: usize, height: usize, pixel_size: f64) -> Result<Self> {
        let diag = Self::diagonal(width, height, pixel_size);
        let n_det = libm::ceil(diag / pixel_size - 1e-9) as usize;
        Self::with_detectors(n_angles, width, height, pixel_size, n_det, pixel_size)
    }

    pub fn with_ray_model(mut self, model: RayModel) -> Self {
        self.ray_model = model;
        self.matrix = OnceCell::new();
        self
    }

    /// Cached couplings, built on first use when small enough.
    pub fn system_matrix(&self) -> Option<&SystemMatrix> {
        self.matrix
            .get_or_init(|| {
                let per_ray = match self.ray_model {
                    RayModel::Joseph => 2 * self.width.max(self.height),
                    RayModel::Siddon => self.width + self.height,
                };
                (self.n_rays().saturating_mul(per_ray) <= MAX_CACHED_ENTRIES)
                    .then(|| Arc::new(SystemMatrix::build(self)))
            })
            .as_deref()
    }

    fn diagonal(width: usize, height: usize, pixel_size: f64) -> f64 {
        libm::hypot(width as f64, height as f64) * pixel_size
    }

    pub fn n_angles(&self) -> usize {
        self.angles.len()
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn n_detectors(&self) -> usize {
        self.n_detectors
    }

    pub fn detector_spacing(&self) -> f64 {
        self.detector_spacing
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

    pub fn ray_model(&self) -> RayModel {
        self.ray_model
    }

    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn n_rays(&self) -> usize {
        self.angles.len() * self.n_detectors
    }

    /// Signed detector coordinate (cm) of detector `d`.
    pub fn detector_offset(&self, d: usize) -> f64 {
        (d as f64 - (self.n_detectors as f64 - 1.0) / 2.0) * self.detector_spacing
    }

    /// Calls `f(pixel_index, weight)` for every pixel coupled to ray `(angle, detector)`.
    pub fn trace_ray(&self, angle: usize, detector: usize, f: impl FnMut(usize, f64)) {
        match self.ray_model {
            RayModel::Joseph => self.trace_joseph(angle, detector, f),
            RayModel::Siddon => self.trace_siddon(angle, detector, f),
        }
    }

    fn trace_joseph(&self, angle: usize, detector: usize, mut f: impl FnMut(usize, f64)) {
        let (c, s) = self.trig[angle];
        let t = self.detector_offset(detector);
        let ps = self.pixel_size;
        let (w, h) = (self.width as isize, self.height as isize);
        let cx = (self.width as f64 - 1.0) / 2.0;
        let cy = (self.height as f64 - 1.0) / 2.0;
        // Ray: x cos + y sin = t. Step along the axis the ray is most aligned with.
        if libm::fabs(c) >= libm::fabs(s) {
            let weight = ps / libm::fabs(c);
            for j in 0..h {
                let y = (j as f64 - cy) * ps;
                let fx = (t - y * s) / c / ps + cx;
                let i0 = libm::floor(fx);
                let frac = fx - i0;
                let i0 = i0 as isize;
                if i0 >= 0 && i0 < w {
                    f((j * w + i0) as usize, weight * (1.0 - frac));
                }
                if i0 + 1 >= 0 && i0 + 1 < w && frac > 0.0 {
                    f((j * w + i0 + 1) as usize, weight * frac);
                }
            }
        } else {
            let weight = ps / libm::fabs(s);
            for i in 0..w {
                let x = (i as f64 - cx) * ps;
                let fy = (t - x * c) / s / ps + cy;
                let j0 = libm::floor(fy);
                let frac = fy - j0;
                let j0 = j0 as isize;
                if j0 >= 0 && j0 < h {
                    f((j0 * w + i) as usize, weight * (1.0 - frac));
                }
                if j0 + 1 >= 0 && j0 + 1 < h && frac > 0.0 {
                    f(((j0 + 1) * w + i) as usize, weight * frac);
                }
            }
        }
    }

    fn trace_siddon(&self, angle: usize, detector: usize, mut f: impl FnMut(usize, f64)) {
        let (c, s) = self.trig[angle];
        let t = self.detector_offset(detector);
        let ps = self.pixel_size;
        let x_min = -(self.width as f64) * ps / 2.0;
        let y_min = -(self.height as f64) * ps / 2.0;
        // r(a) = t (c, s) + a (-s, c)
        let (ox, oy) = (t * c, t * s);
        let (dx, dy) = (-s, c);
        let mut alphas: Vec<f64> = Vec::with_capacity(self.width + self.height + 2);
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        // A ray lying on a grid line is shared equally by the pixels on either side.
        let mut on_line: [Option<usize>; 2] = [None, None];
        for (axis, (o, d, min, n)) in [(ox, dx, x_min, self.width), (oy, dy, y_min, self.height)]
            .into_iter()
            .enumerate()
        {
            let max = min + n as f64 * ps;
            if libm::fabs(d) < 1e-15 {
                let u = (o - min) / ps;
                let k = libm::round(u);
                if libm::fabs(u - k) < 1e-9 && k >= 0.0 && k <= n as f64 {
                    on_line[axis] = Some(k as usize);
                } else if o <= min || o >= max {
                    return;
                }
                continue;
            }
            let (a0, a1) = ((min - o) / d, (max - o) / d);
            lo = lo.max(a0.min(a1));
            hi = hi.min(a0.max(a1));
            for k in 0..=n {
                alphas.push((min + k as f64 * ps - o) / d);
            }
        }
        if !(hi > lo) {
            return;
        }
        alphas.retain(|a| *a > lo && *a < hi);
        alphas.push(lo);
        alphas.push(hi);
        alphas.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(core::cmp::Ordering::Equal));
        let (w, h) = (self.width as isize, self.height as isize);
        let mut emit = |i: isize, j: isize, len: f64| {
            if i >= 0 && j >= 0 && i < w && j < h {
                f(j as usize * self.width + i as usize, len);
            }
        };
        for pair in alphas.windows(2) {
            let len = pair[1] - pair[0];
            if len <= 1e-12 * ps {
                continue;
            }
            let mid = 0.5 * (pair[0] + pair[1]);
            let i = libm::floor((ox + mid * dx - x_min) / ps) as isize;
            let j = libm::floor((oy + mid * dy - y_min) / ps) as isize;
            match on_line {
                [Some(k), _] => {
                    emit(k as isize - 1, j, 0.5 * len);
                    emit(k as isize, j, 0.5 * len);
                }
                [_, Some(k)] => {
                    emit(i, k as isize - 1, 0.5 * len);
                    emit(i, k as isize, 0.5 * len);
                }
                _ => emit(i, j, len),
            }
        }
    }

    fn check_image(&self, len: usize) -> Result<()> {
        if len != self.n_pixels() {
            return Err(dim_err(format!(
                "image channel has {len} pixels, geometry expects {}x{}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    fn check_sinogram(&self, len: usize) -> Result<()> {
        if len != self.n_rays() {
            return Err(dim_err(format!(
                "sinogram channel has {len} entries, geometry expects {}x{}",
                self.n_angles(),
                self.n_detectors
            )));
        }
        Ok(())
    }

    /// `A x` for one channel. Output is angle-major.
    pub fn forward_project(&self, image: &[f64]) -> Result<Vec<f64>> {
        self.check_image(image.len())?;
        let mut out = vec![0.0; self.n_rays()];
        self.forward_project_into(image, &mut out);
        Ok(out)
    }

    pub(crate) fn forward_project_into(&self, image: &[f64], out: &mut [f64]) {
        if let Some(mat) = self.system_matrix() {
            for (n, o) in out.iter_mut().enumerate() {
                let (idx, w) = mat.row(n);
                *o = idx.iter().zip(w).map(|(m, w)| w * image[*m as usize]).sum();
            }
            return;
        }
        for a in 0..self.n_angles() {
            for d in 0..self.n_detectors {
                let mut acc = 0.0;
                self.trace_ray(a, d, |m, w| acc += w * image[m]);
                out[a * self.n_detectors + d] = acc;
            }
        }
    }

    /// `Aᵀ y` for one channel.
    pub fn back_project(&self, sinogram: &[f64]) -> Result<Vec<f64>> {
        self.check_sinogram(sinogram.len())?;
        let mut out = vec![0.0; self.n_pixels()];
        self.back_project_into(sinogram, &mut out);
        Ok(out)
    }

    pub(crate) fn back_project_into(&self, sinogram: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        if let Some(mat) = self.system_matrix() {
            for (n, &v) in sinogram.iter().enumerate() {
                if v != 0.0 {
                    let (idx, w) = mat.row(n);
                    for (m, w) in idx.iter().zip(w) {
                        out[*m as usize] += w * v;
                    }
                }
            }
            return;
        }
        for a in 0..self.n_angles() {
            for d in 0..self.n_detectors {
                let v = sinogram[a * self.n_detectors + d];
                if v != 0.0 {
                    self.trace_ray(a, d, |m, w| out[m] += w * v);
                }
            }
        }
    }

    /// Largest eigenvalue of `AᵀA` by power iteration from a constant start.
    pub fn operator_norm_sq(&self, iterations: usize) -> f64 {
        let mut v = vec![1.0 / libm::sqrt(self.n_pixels() as f64); self.n_pixels()];
        let mut sino = vec![0.0; self.n_rays()];
        let mut next = vec![0.0; self.n_pixels()];
        let mut estimate = 0.0;
        for _ in 0..iterations.max(1) {
            self.forward_project_into(&v, &mut sino);
            self.back_project_into(&sino, &mut next);
            let norm = libm::sqrt(next.iter().map(|x| x * x).sum::<f64>());
            if norm == 0.0 {
                return 0.0;
            }
            estimate = norm;
            v.iter_mut().zip(&next).for_each(|(a, b)| *a = b / norm);
        }
        estimate
    }
}
