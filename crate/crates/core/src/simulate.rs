//! Poisson-noise measurement simulation.

use alloc::vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{dim_err, Error, Result};
use crate::image::MaterialImage;
use crate::projector::Geometry;
use crate::sinogram::{EnergySinogram, MaterialSinogram};
use crate::spectral::SpectralModel;

/// Counts below this floor are clamped before taking the logarithm.
pub const COUNT_FLOOR: f64 = 1.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimulationReport {
    /// Number of (ray, source) samples clamped to [`COUNT_FLOOR`].
    pub clamped: usize,
}

/// Material line integrals `p = A x` for both channels.
pub fn material_sinogram(image: &MaterialImage, geometry: &Geometry) -> Result<MaterialSinogram> {
    if image.width() != geometry.width() || image.height() != geometry.height() {
        return Err(dim_err(alloc::format!(
            "image is {}x{}, geometry is {}x{}",
            image.width(),
            image.height(),
            geometry.width(),
            geometry.height()
        )));
    }
    let p = [
        geometry.forward_project(image.channel(0))?,
        geometry.forward_project(image.channel(1))?,
    ];
    MaterialSinogram::new(geometry.n_angles(), geometry.n_detectors(), p)
}

/// Noiseless measurements: `y = h(p)` with weights equal to the expected counts.
pub fn noiseless(p: &MaterialSinogram, model: &SpectralModel) -> Result<EnergySinogram> {
    let n = p.n_rays();
    let mut y = [vec![0.0; n], vec![0.0; n]];
    let mut w = [vec![0.0; n], vec![0.0; n]];
    for r in 0..n {
        let counts = model.expected_counts(p.ray(r));
        for k in 0..2 {
            let c = counts[k].max(COUNT_FLOOR);
            y[k][r] = -libm::log(c / model.i0());
            w[k][r] = c;
        }
    }
    EnergySinogram::new(p.n_angles(), p.n_detectors(), y, w)
}

/// Per-ray random stream: the seed fixes the key, the ray index selects the stream.
pub fn ray_rng(seed: u64, ray: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(ray as u64);
    rng
}

/// Draws Poisson counts for every ray of material sinogram `p`.
pub fn simulate_from_sinogram(
    p: &MaterialSinogram,
    model: &SpectralModel,
    seed: u64,
) -> Result<(EnergySinogram, SimulationReport)> {
    let n = p.n_rays();
    let i0 = model.i0();
    let mut y = [vec![0.0; n], vec![0.0; n]];
    let mut w = [vec![0.0; n], vec![0.0; n]];
    let mut report = SimulationReport::default();
    for r in 0..n {
        let mean = model.expected_counts(p.ray(r));
        let mut rng = ray_rng(seed, r);
        for k in 0..2 {
            let draw = if mean[k] > 0.0 {
                Poisson::new(mean[k])
                    .map_err(|e| Error::Validation(alloc::format!("poisson mean {}: {e}", mean[k])))?
                    .sample(&mut rng)
            } else {
                0.0
            };
            let c = if draw < COUNT_FLOOR {
                report.clamped += 1;
                COUNT_FLOOR
            } else {
                draw
            };
            y[k][r] = -libm::log(c / i0);
            w[k][r] = c;
        }
    }
    Ok((EnergySinogram::new(p.n_angles(), p.n_detectors(), y, w)?, report))
}

/// Forward-projects `image` and draws noisy dual-energy measurements.
pub fn simulate(
    image: &MaterialImage,
    geometry: &Geometry,
    model: &SpectralModel,
    seed: u64,
) -> Result<(EnergySinogram, SimulationReport)> {
    if image.min_value() < 0.0 {
        return Err(Error::Validation("material image has negative densities".into()));
    }
    let p = material_sinogram(image, geometry)?;
    simulate_from_sinogram(&p, model, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{EnergyGrid, MaterialBasis, Spectrum, SyntheticSpectrum};
    use alloc::vec::Vec;

    fn model(i0: f64) -> SpectralModel {
        let g = EnergyGrid::diagnostic();
        let s = Spectrum::synthetic(SyntheticSpectrum::DEFAULT_TRIANGULAR, &g, i0).unwrap();
        SpectralModel::new(s, MaterialBasis::synthetic(&g).unwrap()).unwrap()
    }

    fn constant_sinogram(n: usize, p: [f64; 2]) -> MaterialSinogram {
        MaterialSinogram::new(1, n, [vec![p[0]; n], vec![p[1]; n]]).unwrap()
    }

    #[test]
    fn noiseless_zero_path_is_zero_attenuation() {
        let m = model(1e5);
        let y = noiseless(&constant_sinogram(3, [0.0, 0.0]), &m).unwrap();
        for k in 0..2 {
            assert!(y.y(k).iter().all(|v| libm::fabs(*v) < 1e-12));
            assert!(y.weights(k).iter().all(|w| libm::fabs(w - 1e5) < 1e-6));
        }
    }

    #[test]
    fn counts_have_poisson_moments() {
        let m = model(1e5);
        let p = [2000.0, 500.0];
        let n = 10_000;
        let (y, _) = simulate_from_sinogram(&constant_sinogram(n, p), &m, 17).unwrap();
        let expected = m.expected_counts(p);
        for k in 0..2 {
            let mean_i = y.weights(k).iter().sum::<f64>() / n as f64;
            assert!(libm::fabs(mean_i - expected[k]) / expected[k] < 0.01);
            let mean_y = y.y(k).iter().sum::<f64>() / n as f64;
            let var_y = y.y(k).iter().map(|v| (v - mean_y) * (v - mean_y)).sum::<f64>() / (n - 1) as f64;
            let predicted = 1.0 / expected[k];
            assert!(
                libm::fabs(var_y - predicted) / predicted < 0.1,
                "var {var_y} vs {predicted}"
            );
        }
    }

    #[test]
    fn streams_are_per_ray() {
        let m = model(1e4);
        let long = constant_sinogram(100, [1000.0, 100.0]);
        let short = constant_sinogram(40, [1000.0, 100.0]);
        let (a, _) = simulate_from_sinogram(&long, &m, 5).unwrap();
        let (b, _) = simulate_from_sinogram(&short, &m, 5).unwrap();
        assert_eq!(&a.y(0)[..40], b.y(0));
        let (c, _) = simulate_from_sinogram(&long, &m, 5).unwrap();
        assert_eq!(a, c);
        let (d, _) = simulate_from_sinogram(&long, &m, 6).unwrap();
        assert_ne!(a.y(0), d.y(0));
    }

    #[test]
    fn opaque_rays_are_clamped() {
        let m = model(10.0);
        let (y, report) = simulate_from_sinogram(&constant_sinogram(4, [1e6, 1e6]), &m, 0).unwrap();
        assert_eq!(report.clamped, 8);
        let cap = libm::log(10.0);
        assert!(y.y(0).iter().chain(y.y(1)).all(|v| libm::fabs(v - cap) < 1e-12));
    }

    #[test]
    fn negative_images_are_rejected() {
        let g = Geometry::compact(4, 4, 4, 0.1).unwrap();
        let mut data: Vec<f64> = vec![0.0; 32];
        data[3] = -1.0;
        let img = MaterialImage::from_raw_unchecked(4, 4, 0.1, data).unwrap();
        assert!(matches!(simulate(&img, &g, &model(1e5), 0), Err(Error::Validation(_))));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let g = Geometry::compact(4, 4, 4, 0.1).unwrap();
        let img = MaterialImage::zeros(5, 4, 0.1);
        assert!(matches!(material_sinogram(&img, &g), Err(Error::Dimension(_))));
    }
}
