//! Ellipse-composition phantoms with two density channels.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::MaterialImage;

/// One filled ellipse. Coordinates in cm relative to the image centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub center: [f64; 2],
    pub semi_axes: [f64; 2],
    /// Counter-clockwise rotation in radians.
    pub rotation: f64,
    /// Density pair (mg/cm³) for materials 1 and 2.
    pub density: [f64; 2],
}

impl Ellipse {
    pub fn disc(center: [f64; 2], radius: f64, density: [f64; 2]) -> Self {
        Self {
            center,
            semi_axes: [radius, radius],
            rotation: 0.0,
            density,
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (c, s) = (libm::cos(self.rotation), libm::sin(self.rotation));
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        let u = (dx * c + dy * s) / self.semi_axes[0];
        let v = (-dx * s + dy * c) / self.semi_axes[1];
        u * u + v * v <= 1.0
    }
}

/// Image size plus an ordered list of ellipses; later ellipses overwrite earlier ones.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub width: usize,
    pub height: usize,
    pub pixel_size: f64,
    pub ellipses: Vec<Ellipse>,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || !(self.pixel_size > 0.0) {
            return Err(Error::Validation(
                "phantom needs a nonempty grid and positive pixel size".into(),
            ));
        }
        for (k, e) in self.ellipses.iter().enumerate() {
            if e.density.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
                return Err(Error::Validation(format!(
                    "ellipse {k} has a negative or non-finite density {:?}",
                    e.density
                )));
            }
            if e.semi_axes.iter().any(|a| !(*a > 0.0)) {
                return Err(Error::Validation(format!("ellipse {k} has a non-positive semi-axis")));
            }
        }
        Ok(())
    }
}

/// Rasterizes the ellipse list by testing each pixel centre for membership.
pub fn make_phantom(spec: &PhantomSpec) -> Result<MaterialImage> {
    spec.validate()?;
    let mut img = MaterialImage::zeros(spec.width, spec.height, spec.pixel_size);
    let cx = (spec.width as f64 - 1.0) / 2.0;
    let cy = (spec.height as f64 - 1.0) / 2.0;
    let m = spec.width * spec.height;
    let data = img.as_mut_slice();
    for j in 0..spec.height {
        let y = (j as f64 - cy) * spec.pixel_size;
        for i in 0..spec.width {
            let x = (i as f64 - cx) * spec.pixel_size;
            let idx = j * spec.width + i;
            for e in &spec.ellipses {
                if e.contains(x, y) {
                    data[idx] = e.density[0];
                    data[m + idx] = e.density[1];
                }
            }
        }
    }
    Ok(img)
}

/// A randomized breast-like cross-section: a soft-tissue body ellipse with
/// denser glandular inclusions and a few small high-density specks.
pub fn random_breast_spec(seed: u64, width: usize, height: usize, pixel_size: f64) -> PhantomSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half_w = width as f64 * pixel_size / 2.0;
    let half_h = height as f64 * pixel_size / 2.0;
    let mut ellipses = Vec::new();
    let body_a = half_w * rng.random_range(0.78..0.90);
    let body_b = half_h * rng.random_range(0.62..0.80);
    ellipses.push(Ellipse {
        center: [0.0, 0.0],
        semi_axes: [body_a, body_b],
        rotation: rng.random_range(-0.2..0.2),
        density: [rng.random_range(900.0..1000.0), 0.0],
    });
    let n_glands = rng.random_range(3..7);
    for _ in 0..n_glands {
        let r = rng.random_range(0.0..0.6f64);
        let phi = rng.random_range(0.0..2.0 * PI);
        ellipses.push(Ellipse {
            center: [r * body_a * libm::cos(phi), r * body_b * libm::sin(phi)],
            semi_axes: [
                body_a * rng.random_range(0.10..0.30),
                body_b * rng.random_range(0.10..0.30),
            ],
            rotation: rng.random_range(0.0..PI),
            density: [rng.random_range(400.0..800.0), rng.random_range(150.0..400.0)],
        });
    }
    let n_specks = rng.random_range(1..4);
    for _ in 0..n_specks {
        let r = rng.random_range(0.0..0.7f64);
        let phi = rng.random_range(0.0..2.0 * PI);
        let radius = pixel_size * rng.random_range(1.5..3.0);
        ellipses.push(Ellipse::disc(
            [r * body_a * libm::cos(phi), r * body_b * libm::sin(phi)],
            radius,
            [rng.random_range(100.0..300.0), rng.random_range(500.0..800.0)],
        ));
    }
    PhantomSpec {
        width,
        height,
        pixel_size,
        ellipses,
    }
}
