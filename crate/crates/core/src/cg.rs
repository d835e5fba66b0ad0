//! Conjugate gradient for symmetric positive definite operators.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CgOutcome {
    pub iterations: usize,
    /// `‖b - A x‖` before the first iteration and after each one.
    pub residual_norms: Vec<f64>,
    pub rhs_norm: f64,
    pub converged: bool,
}

impl CgOutcome {
    pub fn final_residual(&self) -> f64 {
        *self.residual_norms.last().unwrap_or(&0.0)
    }

    pub fn relative_residual(&self) -> f64 {
        if self.rhs_norm == 0.0 {
            self.final_residual()
        } else {
            self.final_residual() / self.rhs_norm
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `A x = b` starting from the contents of `x`.
///
/// Conjugate gradient with minimal-residual smoothing: the CG recurrence is
/// run unchanged and the returned iterate is the running combination with
/// the smallest residual along the way, so `residual_norms` never increases.
/// Stops once `‖b - A x‖ ≤ rel_tol · ‖b‖` or after `max_iter` iterations.
/// `apply(v, out)` must write `A v` into `out`.
pub fn conjugate_gradient(
    mut apply: impl FnMut(&[f64], &mut [f64]),
    b: &[f64],
    x: &mut [f64],
    rel_tol: f64,
    max_iter: usize,
) -> Result<CgOutcome> {
    let n = b.len();
    let mut ax = vec![0.0; n];
    apply(x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let mut p = r.clone();
    let mut ap = ax;
    // raw CG iterate; `x` holds the smoothed one and `rho` its residual
    let mut xc = x.to_vec();
    let mut rho = r.clone();
    let mut diff = vec![0.0; n];
    let rhs_norm = libm::sqrt(dot(b, b));
    let mut rr = dot(&r, &r);
    let mut rho_sq = rr;
    let mut residual_norms = vec![libm::sqrt(rr)];
    let target = rel_tol * rhs_norm;
    if !rr.is_finite() {
        return Err(Error::Divergence("non-finite initial residual".into()));
    }
    let mut iterations = 0;
    while iterations < max_iter && libm::sqrt(rho_sq) > target {
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) || !pap.is_finite() {
            if rr == 0.0 {
                break;
            }
            return Err(Error::Divergence(format!(
                "curvature pᵀAp = {pap:e} at iteration {iterations}; operator is not positive definite"
            )));
        }
        let alpha = rr / pap;
        for i in 0..n {
            xc[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        if !rr_new.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite residual at iteration {iterations}"
            )));
        }
        let beta = rr_new / rr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
        iterations += 1;

        for i in 0..n {
            diff[i] = r[i] - rho[i];
        }
        let dd = dot(&diff, &diff);
        if dd > 0.0 {
            let eta = -dot(&rho, &diff) / dd;
            let candidate: f64 = rho
                .iter()
                .zip(&diff)
                .map(|(q, d)| {
                    let v = q + eta * d;
                    v * v
                })
                .sum();
            if candidate < rho_sq {
                for i in 0..n {
                    rho[i] += eta * diff[i];
                    x[i] += eta * (xc[i] - x[i]);
                }
                rho_sq = candidate;
            }
        }
        residual_norms.push(libm::sqrt(rho_sq));
    }
    Ok(CgOutcome {
        iterations,
        converged: libm::sqrt(rho_sq) <= target,
        residual_norms,
        rhs_norm,
    })
}
