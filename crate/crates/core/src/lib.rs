//! Dual-energy CT material decomposition.
//!
//! Simulation of poly-energetic dual-source measurements, a polynomial
//! sinogram-domain decomposition, and an unrolled reconstruction that
//! alternates a weighted data-consistency solve with a learned denoiser.
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std` feature.

#![cfg_attr(not(feature = "std"), no_std)]
// NaN-rejecting guards are written as negated comparisons on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]
extern crate alloc;

pub mod autodiff;
pub mod cg;
pub mod decomp;
pub mod denoiser;
pub mod error;
pub mod fbp;
pub mod image;
pub mod metrics;
pub mod phantom;
pub mod projector;
pub mod recon;
pub mod simulate;
pub mod sinogram;
pub mod spectral;
pub mod train;

pub use error::{Error, Result};
pub use image::MaterialImage;
pub use projector::{Geometry, RayModel};
pub use sinogram::{EnergySinogram, MaterialSinogram};
pub use spectral::{EnergyGrid, MaterialBasis, SpectralModel, Spectrum, SyntheticSpectrum, Table};
