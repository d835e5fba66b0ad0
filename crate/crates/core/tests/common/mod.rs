#![allow(dead_code)]

use dect_core::decomp::{calibration_grid, FitWeighting, PolynomialDecomposer};
use dect_core::phantom::{make_phantom, Ellipse, PhantomSpec};
use dect_core::simulate::{material_sinogram, simulate};
use dect_core::*;

pub fn model() -> SpectralModel {
    let grid = EnergyGrid::diagnostic();
    let spectrum = Spectrum::synthetic(SyntheticSpectrum::DEFAULT_TRIANGULAR, &grid, 1e5).unwrap();
    SpectralModel::new(spectrum, MaterialBasis::synthetic(&grid).unwrap()).unwrap()
}

/// Dense background covering every pixel plus two inserts, so no pixel is near zero.
pub fn solid_phantom(n: usize, ps: f64, shift: f64) -> MaterialImage {
    let half = n as f64 * ps;
    make_phantom(&PhantomSpec {
        width: n,
        height: n,
        pixel_size: ps,
        ellipses: vec![
            Ellipse::disc([0.0, 0.0], half, [800.0, 150.0]),
            Ellipse::disc([0.2 * half * shift, 0.1 * half], 0.2 * half, [300.0, 500.0]),
            Ellipse {
                center: [-0.2 * half, -0.15 * half * shift],
                semi_axes: [0.25 * half, 0.12 * half],
                rotation: 0.4,
                density: [1000.0, 80.0],
            },
        ],
    })
    .unwrap()
}

/// Cubic decomposer calibrated over the line-integral range of `images`.
pub fn decomposer_for(model: &SpectralModel, images: &[&MaterialImage], geometry: &Geometry) -> PolynomialDecomposer {
    let mut p_max = [0.0f64; 2];
    for img in images {
        let p = material_sinogram(img, geometry).unwrap();
        for (c, m) in p_max.iter_mut().enumerate() {
            *m = p.channel(c).iter().copied().fold(*m, f64::max);
        }
    }
    let calib = calibration_grid(model, [1.1 * p_max[0], 1.1 * p_max[1]], [20, 20]).unwrap();
    PolynomialDecomposer::fit(&[calib], 3, 3, FitWeighting::Counts)
        .unwrap()
        .0
}

pub fn noisy(img: &MaterialImage, geometry: &Geometry, model: &SpectralModel, seed: u64) -> EnergySinogram {
    simulate(img, geometry, model, seed).unwrap().0
}
