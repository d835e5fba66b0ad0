//! Experiment configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use dect_core::decomp::FitWeighting;
use dect_core::denoiser::DenoiserParams;
use dect_core::phantom::{make_phantom, random_breast_spec, Ellipse, PhantomSpec};
use dect_core::recon::{Lambda, ReconConfig};
use dect_core::train::TrainConfig;
use dect_core::{
    EnergyGrid, Geometry, MaterialBasis, MaterialImage, RayModel, SpectralModel, Spectrum, SyntheticSpectrum, Table,
};

use crate::error::{CliError, CliResult};

pub const DEFAULT_ANGLES: [usize; 6] = [30, 60, 90, 180, 360, 512];

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Photons per ray.
    pub i0: f64,
    /// Angle counts of the test sweep.
    pub angles: Vec<usize>,
    pub paths: Paths,
    pub energy: EnergyBlock,
    pub geometry: GeometryBlock,
    pub phantoms: PhantomBlock,
    pub decomp: DecompBlock,
    pub recon: ReconBlock,
    pub train: TrainBlock,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            i0: 1e5,
            angles: DEFAULT_ANGLES.to_vec(),
            paths: Paths::default(),
            energy: EnergyBlock::default(),
            geometry: GeometryBlock::default(),
            phantoms: PhantomBlock::default(),
            decomp: DecompBlock::default(),
            recon: ReconBlock::default(),
            train: TrainBlock::default(),
        }
    }
}

/// One three-column table, or one two-column table per source.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum SpectrumPaths {
    Single(PathBuf),
    Pair([PathBuf; 2]),
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Built-in triangular spectra when absent.
    pub spectrum: Option<SpectrumPaths>,
    /// Built-in synthetic attenuation basis when absent.
    pub basis: Option<PathBuf>,
    /// Explicit phantom list; random phantoms when absent.
    pub phantoms: Option<PathBuf>,
    /// Output directory; `--out` overrides it.
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyBlock {
    pub start_kev: f64,
    pub stop_kev: f64,
    pub step_kev: f64,
}

impl Default for EnergyBlock {
    fn default() -> Self {
        let g = EnergyGrid::diagnostic();
        Self {
            start_kev: g.min(),
            stop_kev: g.max(),
            step_kev: g.delta_e(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RayModelName {
    #[default]
    Joseph,
    Siddon,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryBlock {
    pub width: usize,
    pub height: usize,
    /// cm.
    pub pixel_size: f64,
    /// Detector count; the smallest array at `pixel_size` spacing covering the image when absent.
    pub detectors: Option<usize>,
    /// cm; defaults to the array exactly spanning the image diagonal.
    pub detector_spacing: Option<f64>,
    pub ray_model: RayModelName,
}

impl Default for GeometryBlock {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            pixel_size: 0.25,
            detectors: None,
            detector_spacing: None,
            ray_model: RayModelName::Joseph,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomBlock {
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for PhantomBlock {
    fn default() -> Self {
        Self {
            n_train: 12,
            n_test: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightingName {
    Uniform,
    #[default]
    Counts,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecompBlock {
    pub degree: [usize; 2],
    /// Calibration grid nodes per material axis.
    pub calib_steps: [usize; 2],
    /// Calibration extent as a multiple of the largest training line integral.
    pub margin: f64,
    pub weighting: WeightingName,
    /// Explicit calibration extent (mg/cm²), overriding the phantom-derived one.
    pub p_max: Option<[f64; 2]>,
}

impl Default for DecompBlock {
    fn default() -> Self {
        Self {
            degree: [3, 3],
            calib_steps: [25, 25],
            margin: 1.1,
            weighting: WeightingName::Counts,
            p_max: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconBlock {
    /// Relative weight: λ = factor · median(B) · ‖A‖².
    pub lambda_factor: Option<f64>,
    /// Absolute λ; exclusive with `lambda_factor`.
    pub lambda: Option<f64>,
    pub k_outer: usize,
    pub cg_max_iter: usize,
    pub cg_rel_tol: f64,
}

impl Default for ReconBlock {
    fn default() -> Self {
        let d = ReconConfig::default();
        Self {
            lambda_factor: None,
            lambda: None,
            k_outer: d.k_outer,
            cg_max_iter: d.cg_max_iter,
            cg_rel_tol: d.cg_rel_tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainBlock {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Angle count of the training sinograms.
    pub angles: usize,
    /// Channel widths from input to output; both ends must be 2.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub input_scale: f64,
    /// Scale of the random initial weights of the last layer.
    pub init_gain: f64,
}

impl Default for TrainBlock {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            momentum: d.momentum,
            angles: 60,
            channels: vec![2, 16, 16, 2],
            kernel: 3,
            input_scale: 1000.0,
            init_gain: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct PhantomFile {
    #[serde(default)]
    train: Vec<PhantomEntry>,
    #[serde(default)]
    test: Vec<PhantomEntry>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct PhantomEntry {
    ellipses: Vec<EllipseEntry>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct EllipseEntry {
    center: [f64; 2],
    semi_axes: [f64; 2],
    #[serde(default)]
    rotation: f64,
    density: [f64; 2],
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn read_text(path: &Path, what: &str) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {what} {}: {e}", path.display())))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let mut cfg = Self::from_toml(&read_text(path, "config")?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.paths.rebase(base);
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: &str| Err(CliError::Config(m.into()));
        if self.angles.is_empty() || self.angles.contains(&0) {
            return bad("angle list must be nonempty and every count positive");
        }
        if !(self.i0 > 0.0 && self.i0.is_finite()) {
            return bad("i0 must be positive");
        }
        if self.recon.lambda.is_some() && self.recon.lambda_factor.is_some() {
            return bad("set either recon.lambda or recon.lambda_factor, not both");
        }
        if self.train.channels.first() != Some(&2) || self.train.channels.last() != Some(&2) {
            return bad("train.channels must start and end with 2");
        }
        if self.train.angles == 0 {
            return bad("train.angles must be positive");
        }
        if self.decomp.margin.is_nan() || self.decomp.margin < 1.0 {
            return bad("decomp.margin must be at least 1");
        }
        self.recon_config().validate().map_err(config_err)?;
        self.train_config(0).validate().map_err(config_err)?;
        self.geometry(self.angles[0])?;
        Ok(())
    }

    /// Existence of every referenced input file.
    pub fn check_paths(&self) -> CliResult<()> {
        let mut files: Vec<&Path> = Vec::new();
        match &self.paths.spectrum {
            Some(SpectrumPaths::Single(p)) => files.push(p),
            Some(SpectrumPaths::Pair(ps)) => files.extend(ps.iter().map(PathBuf::as_path)),
            None => {}
        }
        files.extend(self.paths.basis.as_deref());
        files.extend(self.paths.phantoms.as_deref());
        match files.into_iter().find(|p| !p.is_file()) {
            Some(p) => Err(CliError::Config(format!(
                "referenced file {} does not exist",
                p.display()
            ))),
            None => Ok(()),
        }
    }

    pub fn recon_config(&self) -> ReconConfig {
        let d = ReconConfig::default();
        let lambda = match (self.recon.lambda, self.recon.lambda_factor) {
            (Some(v), _) => Lambda::Fixed(v),
            (None, Some(f)) => Lambda::Scaled(f),
            (None, None) => d.lambda,
        };
        ReconConfig {
            lambda,
            k_outer: self.recon.k_outer,
            cg_max_iter: self.recon.cg_max_iter,
            cg_rel_tol: self.recon.cg_rel_tol,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            momentum: self.train.momentum,
            seed,
        }
    }

    pub fn initial_denoiser(&self, seed: u64) -> CliResult<DenoiserParams> {
        let t = &self.train;
        DenoiserParams::random(&t.channels, t.kernel, t.input_scale, t.init_gain, seed).map_err(config_err)
    }

    pub fn weighting(&self) -> FitWeighting {
        match self.decomp.weighting {
            WeightingName::Uniform => FitWeighting::Uniform,
            WeightingName::Counts => FitWeighting::Counts,
        }
    }

    pub fn geometry(&self, n_angles: usize) -> CliResult<Geometry> {
        let g = &self.geometry;
        let geometry = match (g.detectors, g.detector_spacing) {
            (None, None) => Geometry::compact(n_angles, g.width, g.height, g.pixel_size),
            (Some(n), spacing) => {
                let diag = (g.width as f64).hypot(g.height as f64) * g.pixel_size;
                Geometry::with_detectors(
                    n_angles,
                    g.width,
                    g.height,
                    g.pixel_size,
                    n,
                    spacing.unwrap_or(diag / n as f64),
                )
            }
            (None, Some(_)) => {
                return Err(CliError::Config(
                    "geometry.detector_spacing needs geometry.detectors".into(),
                ))
            }
        }
        .map_err(config_err)?;
        let model = match g.ray_model {
            RayModelName::Joseph => RayModel::Joseph,
            RayModelName::Siddon => RayModel::Siddon,
        };
        Ok(geometry.with_ray_model(model))
    }

    pub fn spectral_model(&self) -> CliResult<SpectralModel> {
        let e = &self.energy;
        let grid = EnergyGrid::uniform(e.start_kev, e.stop_kev, e.step_kev).map_err(config_err)?;
        let table = |p: &Path| -> CliResult<Table> {
            Table::parse(&read_text(p, "table")?).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
        };
        let spectrum = match &self.paths.spectrum {
            None => Spectrum::synthetic(SyntheticSpectrum::DEFAULT_TRIANGULAR, &grid, self.i0),
            Some(SpectrumPaths::Single(p)) => Spectrum::from_tables(&[&table(p)?], &grid, self.i0),
            Some(SpectrumPaths::Pair([a, b])) => Spectrum::from_tables(&[&table(a)?, &table(b)?], &grid, self.i0),
        }
        .map_err(config_err)?;
        let basis = match &self.paths.basis {
            None => MaterialBasis::synthetic(&grid),
            Some(p) => MaterialBasis::from_table(&table(p)?, &grid),
        }
        .map_err(config_err)?;
        SpectralModel::new(spectrum, basis).map_err(config_err)
    }

    /// Training and test phantom descriptions. Random phantoms draw from
    /// `phantom_seed(split, index)`.
    pub fn phantom_specs(
        &self,
        phantom_seed: impl Fn(u64, usize) -> u64,
    ) -> CliResult<(Vec<PhantomSpec>, Vec<PhantomSpec>)> {
        let g = &self.geometry;
        let Some(path) = &self.paths.phantoms else {
            let random = |split: u64, n: usize| -> Vec<PhantomSpec> {
                (0..n)
                    .map(|i| random_breast_spec(phantom_seed(split, i), g.width, g.height, g.pixel_size))
                    .collect()
            };
            return Ok((random(0, self.phantoms.n_train), random(1, self.phantoms.n_test)));
        };
        let file: PhantomFile = toml::from_str(&read_text(path, "phantom file")?)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let convert = |entries: &[PhantomEntry]| -> CliResult<Vec<PhantomSpec>> {
            entries
                .iter()
                .map(|p| {
                    let spec = PhantomSpec {
                        width: g.width,
                        height: g.height,
                        pixel_size: g.pixel_size,
                        ellipses: p
                            .ellipses
                            .iter()
                            .map(|e| Ellipse {
                                center: e.center,
                                semi_axes: e.semi_axes,
                                rotation: e.rotation,
                                density: e.density,
                            })
                            .collect(),
                    };
                    spec.validate()
                        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                    Ok(spec)
                })
                .collect()
        };
        Ok((convert(&file.train)?, convert(&file.test)?))
    }
}

impl Paths {
    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.spectrum {
            Some(SpectrumPaths::Single(p)) => fix(p),
            Some(SpectrumPaths::Pair(ps)) => ps.iter_mut().for_each(fix),
            None => {}
        }
        self.basis.iter_mut().for_each(fix);
        self.phantoms.iter_mut().for_each(fix);
        self.out.iter_mut().for_each(fix);
    }
}

pub fn render(spec: &PhantomSpec) -> CliResult<MaterialImage> {
    make_phantom(spec).map_err(config_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_takes_defaults() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.angles, vec![30, 60, 90, 180, 360, 512]);
        assert_eq!(cfg.i0, 1e5);
    }

    #[test]
    fn blocks_override_defaults() {
        let cfg = ExperimentConfig::from_toml(
            "seed = 9\nangles = [30, 60]\n[recon]\nlambda_factor = 0.01\nk_outer = 2\n[geometry]\nwidth = 16\nheight = 8\nray_model = \"siddon\"\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.recon_config().lambda, Lambda::Scaled(0.01));
        assert_eq!(cfg.recon_config().k_outer, 2);
        let g = cfg.geometry(30).unwrap();
        assert_eq!((g.width(), g.height(), g.ray_model()), (16, 8, RayModel::Siddon));
    }

    #[test]
    fn invalid_configs_are_config_errors() {
        for text in [
            "angles = []",
            "i0 = -1",
            "unknown_key = 1",
            "[recon]\nlambda = 1.0\nlambda_factor = 0.1",
            "[recon]\nk_outer = 0",
            "[train]\nchannels = [2, 8, 3]",
            "[geometry]\ndetectors = 3\ndetector_spacing = 0.1",
            "angles = \"many\"",
        ] {
            let err = ExperimentConfig::from_toml(text).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}: {err}");
        }
    }

    #[test]
    fn missing_referenced_file_is_reported() {
        let mut cfg = ExperimentConfig::default();
        cfg.paths.basis = Some("/nonexistent/basis.txt".into());
        let err = cfg.check_paths().unwrap_err();
        assert!(err.to_string().contains("/nonexistent/basis.txt"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn table_files_feed_the_spectral_model() {
        let dir = tempfile::tempdir().unwrap();
        let spec = dir.path().join("spec.txt");
        std::fs::write(&spec, "# keV low high\n10 1 0\n150 1 1\n").unwrap();
        let cfg_path = dir.path().join("c.toml");
        std::fs::write(&cfg_path, "[paths]\nspectrum = \"spec.txt\"\n").unwrap();
        let cfg = ExperimentConfig::load(&cfg_path).unwrap();
        cfg.check_paths().unwrap();
        let model = cfg.spectral_model().unwrap();
        let row: f64 = model.spectrum().row(0).iter().sum();
        assert!((row - 1.0).abs() < 1e-12);
    }

    #[test]
    fn phantom_file_defines_the_sets() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ph.toml");
        std::fs::write(
            &p,
            "[[test]]\nellipses = [{ center = [0.0, 0.0], semi_axes = [2.0, 1.0], density = [900.0, 0.0] }]\n",
        )
        .unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.paths.phantoms = Some(p);
        let (train, test) = cfg.phantom_specs(|_, i| i as u64).unwrap();
        assert!(train.is_empty());
        assert_eq!(test.len(), 1);
        assert_eq!(render(&test[0]).unwrap().width(), 64);
    }
}
