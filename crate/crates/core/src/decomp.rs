//! Polynomial sinogram-domain material decomposition.
//!
//! The decomposer maps the two log measurements of a ray to the two
//! material line integrals with a bivariate polynomial per output channel:
//! `p_c = Σ_ij θ[i, j, c] u₁^i u₂^j`, where `u` is the measurement affinely
//! rescaled to `[-1, 1]²` over the calibration range.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{dim_err, Error, Result};
use crate::simulate;
use crate::sinogram::{EnergySinogram, MaterialSinogram};
use crate::spectral::SpectralModel;

/// Relative Tikhonov damping added to the normal-equation diagonal.
pub const FIT_DAMPING: f64 = 1e-10;
/// Largest acceptable condition number of the undamped normal matrix.
pub const FIT_CONDITION_LIMIT: f64 = 1e12;

/// Monomials `y₁^i y₂^j` in i-major order, length `(degree_i + 1)(degree_j + 1)`.
pub fn design_row(y: [f64; 2], degree_i: usize, degree_j: usize) -> Vec<f64> {
    let mut row = Vec::with_capacity((degree_i + 1) * (degree_j + 1));
    let mut yi = 1.0;
    for _ in 0..=degree_i {
        let mut yj = 1.0;
        for _ in 0..=degree_j {
            row.push(yi * yj);
            yj *= y[1];
        }
        yi *= y[0];
    }
    row
}

/// Affine map `u = (y - center) / half_range` applied before monomial expansion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputScaling {
    pub center: [f64; 2],
    pub half_range: [f64; 2],
}

impl InputScaling {
    pub const IDENTITY: InputScaling = InputScaling {
        center: [0.0, 0.0],
        half_range: [1.0, 1.0],
    };

    /// Maps the bounding box of `points` onto `[-1, 1]²`.
    pub fn from_points(points: impl Iterator<Item = [f64; 2]>) -> Self {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in points {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let mut s = Self::IDENTITY;
        for k in 0..2 {
            if lo[k].is_finite() && hi[k].is_finite() {
                s.center[k] = 0.5 * (lo[k] + hi[k]);
                let h = 0.5 * (hi[k] - lo[k]);
                s.half_range[k] = if h > 0.0 { h } else { 1.0 };
            }
        }
        s
    }

    pub fn apply(&self, y: [f64; 2]) -> [f64; 2] {
        [
            (y[0] - self.center[0]) / self.half_range[0],
            (y[1] - self.center[1]) / self.half_range[1],
        ]
    }
}

/// How calibration rays are weighted in the least-squares fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FitWeighting {
    Uniform,
    /// Mean detected count of the two sources, normalized to unit mean.
    #[default]
    Counts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialDecomposer {
    degree_i: usize,
    degree_j: usize,
    scaling: InputScaling,
    /// Indexed `[(i * (degree_j + 1) + j) * 2 + c]`.
    theta: Vec<f64>,
}

/// Diagnostics returned by [`PolynomialDecomposer::fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    /// `P(y_n) - p_n` for every calibration ray, in input order.
    pub residuals: Vec<[f64; 2]>,
    /// Condition number of the undamped weighted normal matrix.
    pub condition: f64,
}

impl FitReport {
    /// `‖residual‖ / ‖p‖` over all calibration rays.
    pub fn relative_residual(&self, calib: &[(EnergySinogram, MaterialSinogram)]) -> f64 {
        let num: f64 = self.residuals.iter().map(|r| r[0] * r[0] + r[1] * r[1]).sum();
        let den: f64 = calib
            .iter()
            .flat_map(|(_, p)| (0..p.n_rays()).map(move |n| p.ray(n)))
            .map(|p| p[0] * p[0] + p[1] * p[1])
            .sum();
        libm::sqrt(num / den)
    }
}

impl PolynomialDecomposer {
    pub fn from_coefficients(degree_i: usize, degree_j: usize, scaling: InputScaling, theta: Vec<f64>) -> Result<Self> {
        let n = 2 * (degree_i + 1) * (degree_j + 1);
        if theta.len() != n {
            return Err(dim_err(format!(
                "degrees ({degree_i}, {degree_j}) need {n} coefficients, got {}",
                theta.len()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("decomposer coefficients must be finite".into()));
        }
        if scaling.half_range.iter().any(|h| !(*h > 0.0)) {
            return Err(Error::Validation("input scaling half-range must be positive".into()));
        }
        Ok(Self {
            degree_i,
            degree_j,
            scaling,
            theta,
        })
    }

    /// A decomposer with all coefficients zero.
    pub fn zeros(degree_i: usize, degree_j: usize) -> Self {
        Self {
            degree_i,
            degree_j,
            scaling: InputScaling::IDENTITY,
            theta: vec![0.0; 2 * (degree_i + 1) * (degree_j + 1)],
        }
    }

    /// The linear map `p = L y` (no scaling), for degrees (1, 1).
    pub fn linear(l: [[f64; 2]; 2]) -> Self {
        let mut d = Self::zeros(1, 1);
        // term (i=1, j=0) is y₁ at index 2, term (i=0, j=1) is y₂ at index 1
        for (c, row) in l.iter().enumerate() {
            d.theta[2 * 2 + c] = row[0];
            d.theta[2 + c] = row[1];
        }
        d
    }

    pub fn degrees(&self) -> (usize, usize) {
        (self.degree_i, self.degree_j)
    }

    pub fn scaling(&self) -> InputScaling {
        self.scaling
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.theta
    }

    pub fn coefficient(&self, i: usize, j: usize, c: usize) -> f64 {
        self.theta[(i * (self.degree_j + 1) + j) * 2 + c]
    }

    pub fn n_terms(&self) -> usize {
        (self.degree_i + 1) * (self.degree_j + 1)
    }

    /// Weighted least-squares fit of both output channels over all calibration pairs.
    pub fn fit(
        calib: &[(EnergySinogram, MaterialSinogram)],
        degree_i: usize,
        degree_j: usize,
        weighting: FitWeighting,
    ) -> Result<(Self, FitReport)> {
        let n_terms = (degree_i + 1) * (degree_j + 1);
        let mut n_rays = 0usize;
        for (y, p) in calib {
            if y.n_rays() != p.n_rays() {
                return Err(dim_err(format!(
                    "calibration pair has {} measurement rays but {} material rays",
                    y.n_rays(),
                    p.n_rays()
                )));
            }
            n_rays += y.n_rays();
        }
        if n_rays < n_terms {
            return Err(Error::InsufficientData(format!(
                "degrees ({degree_i}, {degree_j}) need at least {n_terms} calibration rays, got {n_rays}"
            )));
        }
        let scaling = InputScaling::from_points(calib.iter().flat_map(|(y, _)| (0..y.n_rays()).map(move |n| y.ray(n))));
        let mean_count = match weighting {
            FitWeighting::Uniform => 1.0,
            FitWeighting::Counts => {
                calib
                    .iter()
                    .flat_map(|(y, _)| (0..y.n_rays()).map(move |n| y.ray_weights(n)))
                    .map(|w| 0.5 * (w[0] + w[1]))
                    .sum::<f64>()
                    / n_rays as f64
            }
        };
        let mut gram = DMatrix::<f64>::zeros(n_terms, n_terms);
        let mut rhs = [DVector::<f64>::zeros(n_terms), DVector::<f64>::zeros(n_terms)];
        for (y, p) in calib {
            for n in 0..y.n_rays() {
                let w = match weighting {
                    FitWeighting::Uniform => 1.0,
                    FitWeighting::Counts => {
                        let wn = y.ray_weights(n);
                        0.5 * (wn[0] + wn[1]) / mean_count
                    }
                };
                let row = design_row(scaling.apply(y.ray(n)), degree_i, degree_j);
                let pn = p.ray(n);
                for a in 0..n_terms {
                    let wa = w * row[a];
                    for b in a..n_terms {
                        gram[(a, b)] += wa * row[b];
                    }
                    rhs[0][a] += wa * pn[0];
                    rhs[1][a] += wa * pn[1];
                }
            }
        }
        for a in 0..n_terms {
            for b in 0..a {
                gram[(a, b)] = gram[(b, a)];
            }
        }
        let eig = gram.clone().symmetric_eigenvalues();
        let (emin, emax) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| {
            (lo.min(e), hi.max(libm::fabs(e)))
        });
        let condition = if emin > 0.0 { emax / emin } else { f64::INFINITY };
        if !(condition <= FIT_CONDITION_LIMIT) {
            return Err(Error::Conditioning { condition });
        }
        let damping = FIT_DAMPING * gram.trace() / n_terms as f64;
        for a in 0..n_terms {
            gram[(a, a)] += damping;
        }
        let chol = gram.cholesky().ok_or(Error::Conditioning { condition })?;
        let sol = [chol.solve(&rhs[0]), chol.solve(&rhs[1])];
        let mut theta = vec![0.0; 2 * n_terms];
        for t in 0..n_terms {
            theta[2 * t] = sol[0][t];
            theta[2 * t + 1] = sol[1][t];
        }
        let decomposer = Self::from_coefficients(degree_i, degree_j, scaling, theta)?;
        let residuals = calib
            .iter()
            .flat_map(|(y, p)| {
                let d = &decomposer;
                (0..y.n_rays()).map(move |n| {
                    let est = d.apply_ray(y.ray(n));
                    let truth = p.ray(n);
                    [est[0] - truth[0], est[1] - truth[1]]
                })
            })
            .collect();
        Ok((decomposer, FitReport { residuals, condition }))
    }

    /// Estimated material line integrals for one ray.
    pub fn apply_ray(&self, y: [f64; 2]) -> [f64; 2] {
        let u = self.scaling.apply(y);
        let mut out = [0.0; 2];
        let mut ui = 1.0;
        for i in 0..=self.degree_i {
            let mut uj = 1.0;
            for j in 0..=self.degree_j {
                let m = ui * uj;
                let t = (i * (self.degree_j + 1) + j) * 2;
                out[0] += self.theta[t] * m;
                out[1] += self.theta[t + 1] * m;
                uj *= u[1];
            }
            ui *= u[0];
        }
        out
    }

    pub fn apply(&self, y: &EnergySinogram) -> MaterialSinogram {
        let n = y.n_rays();
        let mut p = [vec![0.0; n], vec![0.0; n]];
        for r in 0..n {
            let est = self.apply_ray(y.ray(r));
            p[0][r] = est[0];
            p[1][r] = est[1];
        }
        MaterialSinogram::new(y.n_angles(), y.n_detectors(), p).expect("finite coefficients on finite input")
    }

    /// `J[c][k] = ∂p_c / ∂y_k` at measurement `y`.
    pub fn jacobian(&self, y: [f64; 2]) -> [[f64; 2]; 2] {
        let u = self.scaling.apply(y);
        let pow = |base: f64, e: usize| -> f64 { (0..e).fold(1.0, |acc, _| acc * base) };
        let mut jac = [[0.0; 2]; 2];
        for i in 0..=self.degree_i {
            for j in 0..=self.degree_j {
                let t = (i * (self.degree_j + 1) + j) * 2;
                let d1 = if i > 0 {
                    i as f64 * pow(u[0], i - 1) * pow(u[1], j)
                } else {
                    0.0
                };
                let d2 = if j > 0 {
                    j as f64 * pow(u[0], i) * pow(u[1], j - 1)
                } else {
                    0.0
                };
                for c in 0..2 {
                    jac[c][0] += self.theta[t + c] * d1;
                    jac[c][1] += self.theta[t + c] * d2;
                }
            }
        }
        for row in &mut jac {
            row[0] /= self.scaling.half_range[0];
            row[1] /= self.scaling.half_range[1];
        }
        jac
    }

    /// Inverse covariance of the decomposed line integrals per ray.
    pub fn covariance_weights(&self, y: &EnergySinogram) -> DecompCovariance {
        let n = y.n_rays();
        let mut b_full = Vec::with_capacity(n);
        let mut singular = vec![false; n];
        for r in 0..n {
            let jac = self.jacobian(y.ray(r));
            match transported_weight(jac, y.ray_weights(r)) {
                Some(b) => b_full.push(b),
                None => {
                    singular[r] = true;
                    b_full.push([0.0; 3]);
                }
            }
        }
        DecompCovariance::from_full(b_full, &singular)
    }
}

/// `B = J⁻ᵀ diag(w) J⁻¹` as `[b11, b12, b22]`, or `None` when `J` is numerically singular.
pub fn transported_weight(jac: [[f64; 2]; 2], w: [f64; 2]) -> Option<[f64; 3]> {
    let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
    let norm_sq: f64 = jac.iter().flatten().map(|v| v * v).sum();
    if !(libm::fabs(det) >= 1e-12 * norm_sq) || norm_sq == 0.0 {
        return None;
    }
    let inv = [[jac[1][1] / det, -jac[0][1] / det], [-jac[1][0] / det, jac[0][0] / det]];
    let b = |a: usize, c: usize| w[0] * inv[0][a] * inv[0][c] + w[1] * inv[1][a] * inv[1][c];
    Some([b(0, 0), b(0, 1), b(1, 1)])
}

/// Per-ray weights of the material-sinogram data term.
#[derive(Debug, Clone, PartialEq)]
pub struct DecompCovariance {
    /// Diagonal of `B_n` for materials 1 and 2, floored to stay positive.
    pub b_diag: [Vec<f64>; 2],
    /// Full symmetric `B_n` as `[b11, b12, b22]`; zero for flagged rays.
    pub b_full: Vec<[f64; 3]>,
    /// Rays whose Jacobian was singular (or whose diagonal fell below the floor).
    pub flagged: usize,
    pub floor: f64,
}

impl DecompCovariance {
    /// Floors the diagonal at `1e-8 × median(diagonal)`; singular rays take the floor value.
    pub fn from_full(b_full: Vec<[f64; 3]>, singular: &[bool]) -> Self {
        let mut diag_values: Vec<f64> = b_full
            .iter()
            .zip(singular)
            .filter(|(_, s)| !**s)
            .flat_map(|(b, _)| [b[0], b[2]])
            .filter(|v| v.is_finite())
            .collect();
        let median = if diag_values.is_empty() {
            1.0
        } else {
            diag_values.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(core::cmp::Ordering::Equal));
            let m = diag_values.len();
            if m % 2 == 1 {
                diag_values[m / 2]
            } else {
                0.5 * (diag_values[m / 2 - 1] + diag_values[m / 2])
            }
        };
        let floor = if median > 0.0 { 1e-8 * median } else { 1e-8 };
        let n = b_full.len();
        let mut b_diag = [vec![floor; n], vec![floor; n]];
        let mut flagged = 0;
        for (r, b) in b_full.iter().enumerate() {
            if singular[r] {
                flagged += 1;
                continue;
            }
            let mut floored = false;
            for (c, v) in [b[0], b[2]].into_iter().enumerate() {
                if v.is_finite() && v >= floor {
                    b_diag[c][r] = v;
                } else {
                    floored = true;
                }
            }
            if floored {
                flagged += 1;
            }
        }
        Self {
            b_diag,
            b_full,
            flagged,
            floor,
        }
    }

    /// All-ones diagonal (unweighted data term).
    pub fn uniform(n_rays: usize) -> Self {
        Self {
            b_diag: [vec![1.0; n_rays], vec![1.0; n_rays]],
            b_full: vec![[1.0, 0.0, 1.0]; n_rays],
            flagged: 0,
            floor: 1e-8,
        }
    }

    pub fn n_rays(&self) -> usize {
        self.b_diag[0].len()
    }

    pub fn median_diag(&self) -> f64 {
        let mut v: Vec<f64> = self.b_diag.iter().flatten().copied().collect();
        v.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(core::cmp::Ordering::Equal));
        if v.is_empty() {
            return 0.0;
        }
        let m = v.len();
        if m % 2 == 1 {
            v[m / 2]
        } else {
            0.5 * (v[m / 2 - 1] + v[m / 2])
        }
    }
}

/// Noiseless calibration rays on a rectangular `(p₁, p₂)` grid covering
/// `[0, p_max[0]] × [0, p_max[1]]` with `steps` nodes per axis.
pub fn calibration_grid(
    model: &SpectralModel,
    p_max: [f64; 2],
    steps: [usize; 2],
) -> Result<(EnergySinogram, MaterialSinogram)> {
    if steps.iter().any(|s| *s < 2) || p_max.iter().any(|p| !(*p > 0.0)) {
        return Err(Error::Validation(
            "calibration grid needs ≥2 steps and positive extent".into(),
        ));
    }
    let n = steps[0] * steps[1];
    let mut p = [Vec::with_capacity(n), Vec::with_capacity(n)];
    for a in 0..steps[0] {
        for b in 0..steps[1] {
            p[0].push(p_max[0] * a as f64 / (steps[0] - 1) as f64);
            p[1].push(p_max[1] * b as f64 / (steps[1] - 1) as f64);
        }
    }
    let p = MaterialSinogram::new(1, n, p)?;
    let y = simulate::noiseless(&p, model)?;
    Ok((y, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{EnergyGrid, MaterialBasis, Spectrum, SyntheticSpectrum};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(kind: SyntheticSpectrum) -> SpectralModel {
        let g = EnergyGrid::diagnostic();
        let s = Spectrum::synthetic(kind, &g, 1e5).unwrap();
        SpectralModel::new(s, MaterialBasis::synthetic(&g).unwrap()).unwrap()
    }

    const DELTA: SyntheticSpectrum = SyntheticSpectrum::DeltaPair {
        low_kev: 50.0,
        high_kev: 80.0,
    };
    const P_MAX: [f64; 2] = [14000.0, 3500.0];

    fn random_rays(m: &SpectralModel, n: usize, seed: u64) -> (EnergySinogram, MaterialSinogram) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = [
            (0..n).map(|_| rng.random_range(0.0..P_MAX[0])).collect(),
            (0..n).map(|_| rng.random_range(0.0..P_MAX[1])).collect(),
        ];
        let p = MaterialSinogram::new(1, n, p).unwrap();
        (simulate::noiseless(&p, m).unwrap(), p)
    }

    /// Worst per-channel error relative to the calibration extent of that channel.
    fn max_relative_error(d: &PolynomialDecomposer, y: &EnergySinogram, p: &MaterialSinogram) -> f64 {
        (0..y.n_rays())
            .flat_map(|n| {
                let (e, t) = (d.apply_ray(y.ray(n)), p.ray(n));
                [libm::fabs(e[0] - t[0]) / P_MAX[0], libm::fabs(e[1] - t[1]) / P_MAX[1]]
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn design_row_is_i_major() {
        assert_eq!(design_row([2.0, 3.0], 1, 1), vec![1.0, 3.0, 2.0, 6.0]);
        assert_eq!(design_row([2.0, 3.0], 2, 0), vec![1.0, 2.0, 4.0]);
        assert_eq!(design_row([0.5, -1.0], 0, 2), vec![1.0, -1.0, 1.0]);
    }

    #[test]
    fn monoenergetic_inverse_is_exactly_linear() {
        let m = model(DELTA);
        let calib = calibration_grid(&m, P_MAX, [12, 12]).unwrap();
        let (d, _) = PolynomialDecomposer::fit(&[calib], 1, 1, FitWeighting::Counts).unwrap();
        let (y, p) = random_rays(&m, 500, 3);
        let num: f64 = (0..y.n_rays())
            .map(|n| {
                let (e, t) = (d.apply_ray(y.ray(n)), p.ray(n));
                (e[0] - t[0]) * (e[0] - t[0]) + (e[1] - t[1]) * (e[1] - t[1])
            })
            .sum();
        let den: f64 = (0..p.n_rays())
            .map(|n| p.ray(n))
            .map(|t| t[0] * t[0] + t[1] * t[1])
            .sum();
        assert!(libm::sqrt(num / den) <= 1e-8, "{}", libm::sqrt(num / den));
    }

    #[test]
    fn planted_polynomial_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let theta: Vec<f64> = (0..18).map(|_| rng.random_range(-2.0..2.0)).collect();
        let truth = |y: [f64; 2]| -> [f64; 2] {
            let row = design_row(y, 2, 2);
            let mut p = [0.0; 2];
            for (t, m) in row.iter().enumerate() {
                p[0] += theta[2 * t] * m;
                p[1] += theta[2 * t + 1] * m;
            }
            p
        };
        let sample = |rng: &mut ChaCha8Rng, n: usize| {
            let ys: Vec<[f64; 2]> = (0..n)
                .map(|_| [rng.random_range(0.0..3.0), rng.random_range(0.0..2.0)])
                .collect();
            let y = EnergySinogram::unweighted(
                1,
                n,
                [ys.iter().map(|v| v[0]).collect(), ys.iter().map(|v| v[1]).collect()],
            )
            .unwrap();
            let p = MaterialSinogram::new(
                1,
                n,
                [
                    ys.iter().map(|v| truth(*v)[0]).collect(),
                    ys.iter().map(|v| truth(*v)[1]).collect(),
                ],
            )
            .unwrap();
            (y, p)
        };
        let calib = sample(&mut rng, 200);
        let (d, _) = PolynomialDecomposer::fit(&[calib], 2, 2, FitWeighting::Uniform).unwrap();
        let (y, p) = sample(&mut rng, 100);
        for n in 0..y.n_rays() {
            let (e, t) = (d.apply_ray(y.ray(n)), p.ray(n));
            for c in 0..2 {
                assert!(libm::fabs(e[c] - t[c]) <= 1e-6 * (1.0 + libm::fabs(t[c])));
            }
        }
    }

    #[test]
    fn polyenergetic_cubic_fit_is_within_one_percent() {
        let m = model(SyntheticSpectrum::DEFAULT_TRIANGULAR);
        let calib = calibration_grid(&m, P_MAX, [25, 25]).unwrap();
        let (d, report) = PolynomialDecomposer::fit(&[calib], 3, 3, FitWeighting::Counts).unwrap();
        assert!(report.condition <= FIT_CONDITION_LIMIT);
        let (y, p) = random_rays(&m, 400, 8);
        assert!(max_relative_error(&d, &y, &p) <= 0.01);
    }

    #[test]
    fn residual_does_not_grow_with_degree() {
        let m = model(SyntheticSpectrum::DEFAULT_TRIANGULAR);
        let calib = [calibration_grid(&m, P_MAX, [20, 20]).unwrap()];
        let ssr = |deg: usize| {
            let (_, r) = PolynomialDecomposer::fit(&calib, deg, deg, FitWeighting::Uniform).unwrap();
            r.relative_residual(&calib)
        };
        let (a, b, c) = (ssr(1), ssr(2), ssr(3));
        assert!(b <= a * (1.0 + 1e-9) && c <= b * (1.0 + 1e-9), "{a} {b} {c}");
    }

    #[test]
    fn zero_and_linear_decomposers() {
        let z = PolynomialDecomposer::zeros(2, 3);
        assert_eq!(z.apply_ray([0.3, 0.7]), [0.0, 0.0]);
        let l = [[2.0, -1.0], [0.5, 3.0]];
        let d = PolynomialDecomposer::linear(l);
        let y = [0.4, -1.3];
        let p = d.apply_ray(y);
        assert!(libm::fabs(p[0] - (2.0 * 0.4 + 1.3)) < 1e-15);
        assert!(libm::fabs(p[1] - (0.2 - 3.9)) < 1e-15);
        assert_eq!(d.jacobian([5.0, 7.0]), l);
        assert_eq!(PolynomialDecomposer::linear([[1.0, 0.0], [0.0, 1.0]]).apply_ray(y), y);
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let m = model(SyntheticSpectrum::DEFAULT_TRIANGULAR);
        let calib = calibration_grid(&m, P_MAX, [15, 15]).unwrap();
        let (d, _) = PolynomialDecomposer::fit(&[calib], 3, 3, FitWeighting::Counts).unwrap();
        let (y, _) = random_rays(&m, 20, 4);
        for n in 0..y.n_rays() {
            let y0 = y.ray(n);
            let jac = d.jacobian(y0);
            for k in 0..2 {
                let h = 1e-5;
                let (mut a, mut b) = (y0, y0);
                a[k] += h;
                b[k] -= h;
                let (pa, pb) = (d.apply_ray(a), d.apply_ray(b));
                for c in 0..2 {
                    let fd = (pa[c] - pb[c]) / (2.0 * h);
                    assert!(libm::fabs(fd - jac[c][k]) <= 1e-6 * libm::fabs(fd).max(1.0));
                }
            }
        }
    }

    #[test]
    fn transported_weight_special_cases() {
        assert_eq!(
            transported_weight([[1.0, 0.0], [0.0, 1.0]], [3.0, 5.0]),
            Some([3.0, 0.0, 5.0])
        );
        let b = transported_weight([[2.0, 0.0], [0.0, 4.0]], [8.0, 32.0]).unwrap();
        assert_eq!(b, [2.0, 0.0, 2.0]);
        assert_eq!(transported_weight([[1.0, 2.0], [2.0, 4.0]], [1.0, 1.0]), None);
        assert_eq!(transported_weight([[0.0; 2]; 2], [1.0, 1.0]), None);
    }

    #[test]
    fn transported_weight_pulls_back_to_the_measurement_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let j = [
                [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)],
                [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)],
            ];
            let w = [rng.random_range(0.1..10.0), rng.random_range(0.1..10.0)];
            let Some(b) = transported_weight(j, w) else { continue };
            let bm = [[b[0], b[1]], [b[1], b[2]]];
            // Jᵀ B J must give back diag(w)
            for r in 0..2 {
                for c in 0..2 {
                    let v: f64 = (0..2)
                        .flat_map(|a| (0..2).map(move |e| (a, e)))
                        .map(|(a, e)| j[a][r] * bm[a][e] * j[e][c])
                        .sum();
                    let expect = if r == c { w[r] } else { 0.0 };
                    assert!(libm::fabs(v - expect) <= 1e-9 * (1.0 + w[0] + w[1]));
                }
            }
        }
    }

    #[test]
    fn constant_decomposer_flags_every_ray() {
        let mut theta = vec![0.0; 8];
        theta[0] = 3.0;
        theta[1] = 1.0;
        let d = PolynomialDecomposer::from_coefficients(1, 1, InputScaling::IDENTITY, theta).unwrap();
        let y = EnergySinogram::unweighted(1, 5, [vec![0.1; 5], vec![0.2; 5]]).unwrap();
        let cov = d.covariance_weights(&y);
        assert_eq!(cov.flagged, 5);
        assert!(cov.b_diag.iter().flatten().all(|v| *v > 0.0));
    }

    #[test]
    fn degenerate_calibration_is_rejected() {
        let y = EnergySinogram::unweighted(1, 30, [vec![0.5; 30], vec![0.25; 30]]).unwrap();
        let p = MaterialSinogram::new(1, 30, [vec![1.0; 30], vec![2.0; 30]]).unwrap();
        let err = PolynomialDecomposer::fit(&[(y.clone(), p.clone())], 1, 1, FitWeighting::Uniform).unwrap_err();
        assert!(matches!(err, Error::Conditioning { .. }));
        let few = EnergySinogram::unweighted(1, 3, [vec![0.5; 3], vec![0.25; 3]]).unwrap();
        let fp = MaterialSinogram::zeros(1, 3);
        let err = PolynomialDecomposer::fit(&[(few, fp)], 1, 1, FitWeighting::Uniform).unwrap_err();
        assert!(matches!(err, Error::InsufficientData(_)));
    }
}
