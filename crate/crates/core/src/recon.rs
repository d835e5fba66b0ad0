//! Data-consistency solve and the unrolled decomposition loop.
//!
//! Each outer iteration solves
//! `[Aᵀ diag(b) A + λ I] x = Aᵀ (b ⊙ p̂) + λ z` per material channel with CG,
//! projects the result onto `x ≥ 0`, and feeds it through the denoiser to
//! obtain the next `z`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::OnceCell;

use crate::cg::{conjugate_gradient, CgOutcome};
use crate::decomp::{DecompCovariance, PolynomialDecomposer};
use crate::denoiser::DenoiserParams;
use crate::error::{dim_err, Error, Result};
use crate::fbp::{fbp, RampFilter};
use crate::image::MaterialImage;
use crate::projector::Geometry;
use crate::sinogram::{EnergySinogram, MaterialSinogram};

/// Power iterations used to estimate `‖A‖²` for [`Lambda::Scaled`].
pub const NORM_ITERATIONS: usize = 30;

/// Regularization weight, either absolute or relative to the data term's scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Lambda {
    Fixed(f64),
    /// `factor · median(b_diag) · ‖A‖²`.
    Scaled(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconConfig {
    pub lambda: Lambda,
    pub k_outer: usize,
    pub cg_max_iter: usize,
    pub cg_rel_tol: f64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            lambda: Lambda::Scaled(0.005),
            k_outer: 3,
            cg_max_iter: 20,
            cg_rel_tol: 1e-6,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        let lambda_ok = match self.lambda {
            Lambda::Fixed(v) | Lambda::Scaled(v) => v > 0.0 && v.is_finite(),
        };
        if !lambda_ok {
            return Err(Error::Validation("lambda must be positive".into()));
        }
        if self.k_outer == 0 || self.cg_max_iter == 0 {
            return Err(Error::Validation("k_outer and cg_max_iter must be at least 1".into()));
        }
        if !(self.cg_rel_tol >= 0.0) {
            return Err(Error::Validation("cg_rel_tol must be nonnegative".into()));
        }
        Ok(())
    }
}

/// The weighted normal-equation system shared by every outer iteration.
#[derive(Debug, Clone)]
pub struct DcSystem {
    geometry: Geometry,
    b_diag: [Vec<f64>; 2],
    /// `Aᵀ (b ⊙ p̂)` per channel.
    rhs: [Vec<f64>; 2],
    flagged_rays: usize,
    norm_sq: OnceCell<f64>,
}

impl DcSystem {
    /// Assembles the system from decomposed line integrals and their weights.
    pub fn assemble(geometry: &Geometry, p_hat: &MaterialSinogram, b_diag: [Vec<f64>; 2]) -> Result<Self> {
        let n = geometry.n_rays();
        if p_hat.n_rays() != n || b_diag.iter().any(|b| b.len() != n) {
            return Err(dim_err(format!(
                "material sinogram / weights do not match the geometry's {n} rays"
            )));
        }
        if b_diag.iter().flatten().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(Error::Validation("data weights must be finite and nonnegative".into()));
        }
        let mut rhs = [Vec::new(), Vec::new()];
        for c in 0..2 {
            let weighted: Vec<f64> = p_hat.channel(c).iter().zip(&b_diag[c]).map(|(p, b)| p * b).collect();
            rhs[c] = geometry.back_project(&weighted)?;
        }
        Ok(Self {
            geometry: geometry.clone(),
            b_diag,
            rhs,
            flagged_rays: 0,
            norm_sq: OnceCell::new(),
        })
    }

    /// Decomposes `y`, transports its weights and assembles the system.
    pub fn from_measurements(
        geometry: &Geometry,
        decomposer: &PolynomialDecomposer,
        y: &EnergySinogram,
    ) -> Result<Self> {
        if y.n_angles() != geometry.n_angles() || y.n_detectors() != geometry.n_detectors() {
            return Err(dim_err(format!(
                "sinogram is {}x{}, geometry expects {}x{}",
                y.n_angles(),
                y.n_detectors(),
                geometry.n_angles(),
                geometry.n_detectors()
            )));
        }
        let p_hat = decomposer.apply(y);
        let cov = decomposer.covariance_weights(y);
        let flagged = cov.flagged;
        let DecompCovariance { b_diag, .. } = cov;
        let mut sys = Self::assemble(geometry, &p_hat, b_diag)?;
        sys.flagged_rays = flagged;
        Ok(sys)
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn b_diag(&self, c: usize) -> &[f64] {
        &self.b_diag[c]
    }

    pub fn rhs(&self, c: usize) -> &[f64] {
        &self.rhs[c]
    }

    pub fn flagged_rays(&self) -> usize {
        self.flagged_rays
    }

    pub fn n_unknowns(&self) -> usize {
        2 * self.geometry.n_pixels()
    }

    /// Estimated `‖A‖²`, computed once per system.
    pub fn operator_norm_sq(&self) -> f64 {
        *self
            .norm_sq
            .get_or_init(|| self.geometry.operator_norm_sq(NORM_ITERATIONS))
    }

    pub fn resolve_lambda(&self, lambda: Lambda) -> f64 {
        match lambda {
            Lambda::Fixed(v) => v,
            Lambda::Scaled(f) => {
                let mut b: Vec<f64> = self.b_diag.iter().flatten().copied().collect();
                b.sort_unstable_by(|x, y| x.partial_cmp(y).unwrap_or(core::cmp::Ordering::Equal));
                let median = if b.is_empty() { 0.0 } else { b[b.len() / 2] };
                f * median * self.operator_norm_sq()
            }
        }
    }

    /// `Aᵀ (b_c ⊙ A x) + λ x` for one channel.
    pub fn apply_channel(&self, c: usize, lambda: f64, x: &[f64], out: &mut [f64]) {
        let mut sino = vec![0.0; self.geometry.n_rays()];
        self.geometry.forward_project_into(x, &mut sino);
        sino.iter_mut().zip(&self.b_diag[c]).for_each(|(s, b)| *s *= b);
        self.geometry.back_project_into(&sino, out);
        if lambda != 0.0 {
            out.iter_mut().zip(x).for_each(|(o, xi)| *o += lambda * xi);
        }
    }

    /// Channel-major normal operator on a two-channel image vector.
    pub fn normal_operator(&self, lambda: f64, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_unknowns() {
            return Err(dim_err(format!(
                "expected {} unknowns, got {}",
                self.n_unknowns(),
                x.len()
            )));
        }
        let m = self.geometry.n_pixels();
        let mut out = vec![0.0; 2 * m];
        for c in 0..2 {
            self.apply_channel(c, lambda, &x[c * m..(c + 1) * m], &mut out[c * m..(c + 1) * m]);
        }
        Ok(out)
    }

    /// Solves `(H_c + λ I) v = rhs_c` per channel by CG starting from `v`.
    pub fn solve_shifted(
        &self,
        lambda: f64,
        rhs: &[f64],
        v: &mut [f64],
        rel_tol: f64,
        max_iter: usize,
    ) -> Result<[CgOutcome; 2]> {
        let m = self.geometry.n_pixels();
        if rhs.len() != 2 * m || v.len() != 2 * m {
            return Err(dim_err("CG vectors do not match the image size"));
        }
        let mut outcomes = Vec::with_capacity(2);
        for c in 0..2 {
            let out = conjugate_gradient(
                |p, ap| self.apply_channel(c, lambda, p, ap),
                &rhs[c * m..(c + 1) * m],
                &mut v[c * m..(c + 1) * m],
                rel_tol,
                max_iter,
            )?;
            outcomes.push(out);
        }
        let second = outcomes.pop().expect("two channels");
        let first = outcomes.pop().expect("two channels");
        Ok([first, second])
    }
}

/// Result of one data-consistency block.
#[derive(Debug, Clone)]
pub struct DcSolution {
    /// CG solution before the nonnegativity projection.
    pub unclamped: Vec<f64>,
    /// `max(unclamped, 0)`.
    pub clamped: Vec<f64>,
    pub cg: [CgOutcome; 2],
}

impl DcSolution {
    pub fn iterations(&self) -> [usize; 2] {
        [self.cg[0].iterations, self.cg[1].iterations]
    }

    pub fn image(&self, geometry: &Geometry) -> MaterialImage {
        MaterialImage::from_raw_unchecked(
            geometry.width(),
            geometry.height(),
            geometry.pixel_size(),
            self.clamped.clone(),
        )
        .expect("solution matches geometry")
    }
}

/// Solves the DC system for prior image `z`, warm-starting CG from `x_init`.
pub fn dc_solve(
    system: &DcSystem,
    z: &[f64],
    lambda: f64,
    config: &ReconConfig,
    x_init: Option<&[f64]>,
) -> Result<DcSolution> {
    let n = system.n_unknowns();
    if z.len() != n || x_init.is_some_and(|x| x.len() != n) {
        return Err(dim_err(format!("prior and warm start must have {n} values")));
    }
    let m = system.geometry.n_pixels();
    let mut rhs = vec![0.0; n];
    for c in 0..2 {
        for i in 0..m {
            rhs[c * m + i] = system.rhs[c][i] + lambda * z[c * m + i];
        }
    }
    let mut x = match x_init {
        Some(x0) => x0.to_vec(),
        None => vec![0.0; n],
    };
    let cg = system.solve_shifted(lambda, &rhs, &mut x, config.cg_rel_tol, config.cg_max_iter)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence("non-finite values in the DC solution".into()));
    }
    let clamped = x.iter().map(|v| if *v > 0.0 { *v } else { 0.0 }).collect();
    Ok(DcSolution {
        unclamped: x,
        clamped,
        cg,
    })
}

/// Per-run diagnostics of [`e2e_decomp`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReconReport {
    pub lambda: f64,
    pub cg_iterations: Vec<[usize; 2]>,
    pub cg_relative_residuals: Vec<[f64; 2]>,
    pub flagged_rays: usize,
}

/// Unrolled decomposition: `z⁰ = 0`, then `K` rounds of DC solve and denoising.
///
/// Returns the DC output of the last round.
pub fn e2e_decomp_with_system(
    system: &DcSystem,
    denoiser: &DenoiserParams,
    config: &ReconConfig,
) -> Result<(MaterialImage, ReconReport)> {
    config.validate()?;
    let g = system.geometry();
    let lambda = system.resolve_lambda(config.lambda);
    let mut z = vec![0.0; system.n_unknowns()];
    let mut warm: Option<Vec<f64>> = None;
    let mut report = ReconReport {
        lambda,
        cg_iterations: Vec::new(),
        cg_relative_residuals: Vec::new(),
        flagged_rays: system.flagged_rays(),
    };
    let mut last = None;
    for k in 0..config.k_outer {
        let sol = dc_solve(system, &z, lambda, config, warm.as_deref())?;
        report.cg_iterations.push(sol.iterations());
        report
            .cg_relative_residuals
            .push([sol.cg[0].relative_residual(), sol.cg[1].relative_residual()]);
        if k + 1 < config.k_outer {
            z = denoiser.denoise_slice(&sol.clamped, g.width(), g.height());
        }
        warm = Some(sol.unclamped.clone());
        last = Some(sol);
    }
    let image = last.expect("k_outer >= 1").image(g);
    Ok((image, report))
}

pub fn e2e_decomp(
    y: &EnergySinogram,
    geometry: &Geometry,
    decomposer: &PolynomialDecomposer,
    denoiser: &DenoiserParams,
    config: &ReconConfig,
) -> Result<(MaterialImage, ReconReport)> {
    let system = DcSystem::from_measurements(geometry, decomposer, y)?;
    e2e_decomp_with_system(&system, denoiser, config)
}

/// Baseline: decompose in the sinogram domain, then FBP each material.
pub fn fbp_decomp(
    y: &EnergySinogram,
    decomposer: &PolynomialDecomposer,
    geometry: &Geometry,
    filter: RampFilter,
) -> Result<MaterialImage> {
    if y.n_angles() != geometry.n_angles() || y.n_detectors() != geometry.n_detectors() {
        return Err(dim_err("sinogram does not match the geometry"));
    }
    let p_hat = decomposer.apply(y);
    let mut data = Vec::with_capacity(2 * geometry.n_pixels());
    for c in 0..2 {
        data.extend(fbp(p_hat.channel(c), geometry, filter)?);
    }
    let mut img = MaterialImage::from_raw_unchecked(geometry.width(), geometry.height(), geometry.pixel_size(), data)?;
    img.clamp_nonnegative();
    Ok(img)
}
