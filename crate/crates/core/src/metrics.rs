//! Image quality metrics.

/// `10 log10(peak² / MSE)` with `peak = max(truth)`; `+∞` when the images match.
pub fn psnr(estimate: &[f64], truth: &[f64]) -> f64 {
    assert_eq!(estimate.len(), truth.len(), "psnr inputs differ in length");
    let peak = truth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mse = mse(estimate, truth);
    if mse == 0.0 {
        return f64::INFINITY;
    }
    10.0 * libm::log10(peak * peak / mse)
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}
