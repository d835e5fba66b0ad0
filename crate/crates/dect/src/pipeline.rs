//! The five pipeline stages. Each reads only artifacts listed in the
//! manifest and records what it writes there.

use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dect_core::decomp::{calibration_grid, PolynomialDecomposer};
use dect_core::fbp::RampFilter;
use dect_core::metrics::psnr;
use dect_core::recon::{e2e_decomp, fbp_decomp, ReconReport};
use dect_core::simulate::{material_sinogram, simulate};
use dect_core::train::train;
use dect_core::{EnergySinogram, MaterialImage};

use crate::config::{render, ExperimentConfig};
use crate::error::{CliError, CliResult};
use crate::formats::{self, MetricRow, Report};
use crate::manifest::{ensure_writable, Manifest};
use crate::preview;

/// Artifact locations relative to the output directory.
pub mod layout {
    pub const DECOMPOSER: &str = "model/decomposer.dec";
    pub const DECOMP_REPORT: &str = "model/decomposer_report.txt";
    pub const DENOISER: &str = "model/denoiser.den";
    pub const LOSS_LOG: &str = "train/loss.txt";
    pub const TRAIN_REPORT: &str = "train/report.txt";
    pub const METRICS: &str = "metrics.txt";
    pub const METRICS_PER_IMAGE: &str = "metrics_per_image.txt";
    pub const METHODS: [&str; 2] = ["e2e", "fbp"];

    pub fn truth(split: &str, i: usize) -> String {
        format!("truth/{split}_{i:03}.raw")
    }

    pub fn sinogram(split: &str, i: usize, angles: usize) -> String {
        format!("sino/{split}_{i:03}_a{angles:03}.raw")
    }

    pub fn recon(method: &str, i: usize, angles: usize) -> String {
        format!("recon/{method}/test_{i:03}_a{angles:03}.raw")
    }

    pub fn recon_report(i: usize, angles: usize) -> String {
        format!("recon/reports/test_{i:03}_a{angles:03}.txt")
    }

    pub fn preview(name: &str, channel: usize) -> String {
        format!("previews/{name}_m{}.png", channel + 1)
    }
}

/// Artifact kinds used in the manifest.
pub mod kind {
    pub const TRUTH_TRAIN: &str = "truth-train";
    pub const TRUTH_TEST: &str = "truth-test";
    pub const SINO_TRAIN: &str = "sinogram-train";
    pub const SINO_TEST: &str = "sinogram-test";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Simulate,
    FitDecomp,
    Train,
    Reconstruct,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Simulate,
        Stage::FitDecomp,
        Stage::Train,
        Stage::Reconstruct,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::FitDecomp => "fit-decomp",
            Stage::Train => "train",
            Stage::Reconstruct => "reconstruct",
            Stage::Evaluate => "evaluate",
        }
    }
}

/// Independent sub-seeds of the run seed.
mod streams {
    pub const PHANTOM: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const INIT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
}

pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(2 * index as u128);
    rng.next_u64()
}

fn noise_seed(seed: u64, split: &str, phantom: usize, angles: usize) -> u64 {
    let split_id = u64::from(split == "test");
    derive_seed(
        seed,
        streams::NOISE,
        (split_id << 48) | ((phantom as u64) << 16) | angles as u64,
    )
}

/// Resolved run context shared by the stages.
pub struct Run {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub out: PathBuf,
    manifest: Manifest,
}

impl Run {
    /// `seed` and `out` override the config values.
    pub fn new(config: ExperimentConfig, seed: Option<u64>, out: Option<PathBuf>) -> CliResult<Self> {
        let seed = seed.unwrap_or(config.seed);
        let out = out
            .or_else(|| config.paths.out.clone())
            .ok_or_else(|| CliError::Config("no output directory: pass --out or set paths.out".into()))?;
        config.check_paths()?;
        Ok(Self {
            manifest: Manifest::new(&out),
            config,
            seed,
            out,
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn execute(&self, stage: Stage) -> CliResult<()> {
        ensure_writable(&self.out)?;
        log::info!("{} into {} with seed {}", stage.name(), self.out.display(), self.seed);
        match stage {
            Stage::Simulate => self.simulate(),
            Stage::FitDecomp => self.fit_decomp(),
            Stage::Train => self.train(),
            Stage::Reconstruct => self.reconstruct(),
            Stage::Evaluate => self.evaluate(),
        }
    }

    pub fn execute_all(&self) -> CliResult<()> {
        Stage::ALL.iter().try_for_each(|s| self.execute(*s))
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn begin(&self, stage: Stage) -> CliResult<()> {
        self.manifest.record_run(stage.name(), self.seed, self.config.i0)
    }

    fn finish(&self, stage: Stage, outputs: Vec<(String, &str)>) -> CliResult<()> {
        self.manifest.record_outputs(stage.name(), &outputs)
    }

    fn simulate(&self) -> CliResult<()> {
        self.begin(Stage::Simulate)?;
        let cfg = &self.config;
        let model = cfg.spectral_model()?;
        let (train_specs, test_specs) =
            cfg.phantom_specs(|split, i| derive_seed(self.seed, streams::PHANTOM, (split << 32) | i as u64))?;
        let mut outputs = Vec::new();
        let mut write_split = |split: &str,
                               specs: &[dect_core::phantom::PhantomSpec],
                               angle_counts: &[usize],
                               kinds: [&'static str; 2]|
         -> CliResult<()> {
            for (i, spec) in specs.iter().enumerate() {
                let truth = render(spec)?;
                let rel = layout::truth(split, i);
                formats::write_image(&self.path(&rel), &truth)?;
                outputs.push((rel, kinds[0]));
                for &na in angle_counts {
                    let g = cfg.geometry(na)?;
                    let (y, rep) = simulate(&truth, &g, &model, noise_seed(self.seed, split, i, na))?;
                    let rel = layout::sinogram(split, i, na);
                    formats::write_sinogram(&self.path(&rel), &y, g.detector_spacing(), cfg.i0, rep.clamped)?;
                    outputs.push((rel, kinds[1]));
                }
            }
            Ok(())
        };
        write_split(
            "train",
            &train_specs,
            &[cfg.train.angles],
            [kind::TRUTH_TRAIN, kind::SINO_TRAIN],
        )?;
        write_split("test", &test_specs, &cfg.angles, [kind::TRUTH_TEST, kind::SINO_TEST])?;
        self.finish(Stage::Simulate, outputs)
    }

    fn read_truths(&self, kind: &str) -> CliResult<Vec<MaterialImage>> {
        self.manifest
            .listed(kind)?
            .iter()
            .map(|rel| formats::read_image(&self.manifest.require(rel, "run simulate")?))
            .collect()
    }

    fn fit_decomp(&self) -> CliResult<()> {
        self.begin(Stage::FitDecomp)?;
        let cfg = &self.config;
        let p_max = match cfg.decomp.p_max {
            Some(p) => p,
            None => {
                let mut truths = self.read_truths(kind::TRUTH_TRAIN)?;
                if truths.is_empty() {
                    truths = self.read_truths(kind::TRUTH_TEST)?;
                }
                if truths.is_empty() {
                    return Err(CliError::Dependency {
                        path: self.path(&layout::truth("train", 0)),
                        hint: "no phantoms listed to derive the calibration range; run simulate or set decomp.p_max"
                            .into(),
                    });
                }
                let g = cfg.geometry(cfg.train.angles)?;
                let mut p_max = [0.0f64; 2];
                for t in &truths {
                    let p = material_sinogram(t, &g)?;
                    for (c, m) in p_max.iter_mut().enumerate() {
                        *m = p.channel(c).iter().fold(*m, |a, &b| a.max(b));
                    }
                }
                p_max.map(|p| p * cfg.decomp.margin)
            }
        };
        let model = cfg.spectral_model()?;
        let calib = calibration_grid(&model, p_max, cfg.decomp.calib_steps)?;
        let [di, dj] = cfg.decomp.degree;
        let calib = [calib];
        let (dec, fit) = PolynomialDecomposer::fit(&calib, di, dj, cfg.weighting())?;
        formats::write_decomposer(&self.path(layout::DECOMPOSER), &dec)?;
        let mut report = Report::new();
        report
            .set("degree", format!("{di} {dj}"))
            .set("calibration_rays", calib[0].0.n_rays())
            .set("p_max", format!("{:?} {:?}", p_max[0], p_max[1]))
            .set("condition", format!("{:?}", fit.condition))
            .set("relative_residual", format!("{:?}", fit.relative_residual(&calib)));
        report.write(&self.path(layout::DECOMP_REPORT))?;
        self.finish(
            Stage::FitDecomp,
            vec![
                (layout::DECOMPOSER.into(), "decomposer"),
                (layout::DECOMP_REPORT.into(), "report"),
            ],
        )
    }

    fn decomposer(&self) -> CliResult<PolynomialDecomposer> {
        formats::read_decomposer(&self.manifest.require(layout::DECOMPOSER, "run fit-decomp first")?)
    }

    fn sinogram(&self, rel: &str) -> CliResult<formats::StoredSinogram> {
        formats::read_sinogram(&self.manifest.require(rel, "run simulate with this angle list")?)
    }

    fn train(&self) -> CliResult<()> {
        self.begin(Stage::Train)?;
        let cfg = &self.config;
        let decomposer = self.decomposer()?;
        let truths = self.manifest.listed(kind::TRUTH_TRAIN)?;
        if truths.is_empty() {
            return Err(CliError::Dependency {
                path: self.path(&layout::truth("train", 0)),
                hint: "no training phantoms listed; run simulate with phantoms.n_train > 0".into(),
            });
        }
        let na = cfg.train.angles;
        let g = cfg.geometry(na)?;
        let mut data: Vec<(EnergySinogram, MaterialImage)> = Vec::with_capacity(truths.len());
        for (i, rel) in truths.iter().enumerate() {
            let x = formats::read_image(&self.manifest.require(rel, "run simulate")?)?;
            let y = self.sinogram(&layout::sinogram("train", i, na))?.sinogram;
            data.push((y, x));
        }
        let init = cfg.initial_denoiser(derive_seed(self.seed, streams::INIT, 0))?;
        let tc = cfg.train_config(derive_seed(self.seed, streams::SHUFFLE, 0));
        let outcome = train(&data, &g, &decomposer, &init, &cfg.recon_config(), &tc)?;
        formats::write_denoiser(&self.path(layout::DENOISER), &outcome.params)?;
        formats::write_loss_log(&self.path(layout::LOSS_LOG), &outcome.log)?;
        let first = outcome.log.first().map_or(f64::NAN, |r| r.loss);
        let last = outcome
            .log
            .iter()
            .rev()
            .find(|r| r.accepted)
            .map_or(f64::NAN, |r| r.loss);
        let mut report = Report::new();
        report
            .set("samples", data.len())
            .set("parameters", outcome.params.n_params())
            .set("epochs", outcome.log.len().saturating_sub(1))
            .set("rejected_epochs", outcome.log.iter().filter(|r| !r.accepted).count())
            .set("initial_loss", format!("{first:?}"))
            .set("final_loss", format!("{last:?}"))
            .set(
                "final_learning_rate",
                format!("{:?}", outcome.log.last().map_or(tc.learning_rate, |r| r.learning_rate)),
            )
            .set(
                "aborted_at",
                outcome.aborted_at.map_or("none".to_string(), |e| e.to_string()),
            );
        report.write(&self.path(layout::TRAIN_REPORT))?;
        self.finish(
            Stage::Train,
            vec![
                (layout::DENOISER.into(), "denoiser"),
                (layout::LOSS_LOG.into(), "loss-log"),
                (layout::TRAIN_REPORT.into(), "report"),
            ],
        )?;
        match outcome.aborted_at {
            Some(epoch) => Err(CliError::Divergence(format!(
                "training loss became non-finite at epoch {epoch}; last finite checkpoint kept in {}",
                layout::DENOISER
            ))),
            None => Ok(()),
        }
    }

    fn reconstruct(&self) -> CliResult<()> {
        self.begin(Stage::Reconstruct)?;
        let cfg = &self.config;
        let decomposer = self.decomposer()?;
        let denoiser = formats::read_denoiser(&self.manifest.require(layout::DENOISER, "run train first")?)?;
        let n_test = self.manifest.listed(kind::TRUTH_TEST)?.len();
        let recon_cfg = cfg.recon_config();

        // Inputs are resolved up front so a missing file fails before any compute.
        let mut inputs = Vec::new();
        for &na in &cfg.angles {
            for i in 0..n_test {
                inputs.push((na, i, self.sinogram(&layout::sinogram("test", i, na))?));
            }
        }
        // One worker per angle count; every output depends only on its own inputs.
        let results: Vec<CliResult<Vec<(String, &str)>>> = std::thread::scope(|scope| {
            let workers: Vec<_> = cfg
                .angles
                .iter()
                .map(|&na| {
                    let items: Vec<_> = inputs.iter().filter(|(a, _, _)| *a == na).collect();
                    let (decomposer, denoiser) = (&decomposer, &denoiser);
                    scope.spawn(move || -> CliResult<Vec<(String, &str)>> {
                        let g = cfg.geometry(na)?;
                        let mut outputs = Vec::new();
                        for (_, i, stored) in items {
                            let y = &stored.sinogram;
                            let (e2e, rep) = e2e_decomp(y, &g, decomposer, denoiser, &recon_cfg)?;
                            let fbp = fbp_decomp(y, decomposer, &g, RampFilter::RamLak)?;
                            for (method, img) in layout::METHODS.iter().zip([&e2e, &fbp]) {
                                let rel = layout::recon(method, *i, na);
                                formats::write_image(&self.path(&rel), img)?;
                                outputs.push((rel, if *method == "e2e" { "recon-e2e" } else { "recon-fbp" }));
                            }
                            let rel = layout::recon_report(*i, na);
                            recon_report(&rep, stored.clamped, &e2e, &fbp).write(&self.path(&rel))?;
                            outputs.push((rel, "report"));
                        }
                        Ok(outputs)
                    })
                })
                .collect();
            workers
                .into_iter()
                .map(|w| w.join().expect("reconstruction worker panicked"))
                .collect()
        });
        let mut outputs = Vec::new();
        for r in results {
            outputs.extend(r?);
        }
        self.finish(Stage::Reconstruct, outputs)
    }

    fn evaluate(&self) -> CliResult<()> {
        self.begin(Stage::Evaluate)?;
        let cfg = &self.config;
        let truths = self.read_truths(kind::TRUTH_TEST)?;
        if truths.is_empty() {
            return Err(CliError::Dependency {
                path: self.path(&layout::truth("test", 0)),
                hint: "no test phantoms listed; run simulate".into(),
            });
        }
        let mut outputs = Vec::new();
        let mut per_image = String::from("# phantom angles method material psnr_db\n");
        let mut rows = Vec::new();
        for &na in &cfg.angles {
            for method in layout::METHODS {
                let mut sums = [0.0; 3];
                for (i, truth) in truths.iter().enumerate() {
                    let rel = layout::recon(method, i, na);
                    let img =
                        formats::read_image(&self.manifest.require(&rel, "run reconstruct with this angle list")?)?;
                    let vals = image_psnr(&img, truth)?;
                    for (m, v) in ["1", "2", "mean"].iter().zip(vals) {
                        per_image.push_str(&format!("{i} {na} {method} {m} {}\n", formats::format_psnr(v)));
                    }
                    sums.iter_mut().zip(vals).for_each(|(s, v)| *s += v);
                    let stem = format!("test_{i:03}_a{na:03}_{method}");
                    outputs.extend(self.previews(&stem, &img, truth)?);
                }
                for (m, s) in ["1", "2", "mean"].iter().zip(sums) {
                    rows.push(MetricRow {
                        angles: na,
                        method: method.into(),
                        material: (*m).into(),
                        psnr_db: s / truths.len() as f64,
                    });
                }
            }
        }
        for (i, truth) in truths.iter().enumerate() {
            outputs.extend(self.previews(&format!("test_{i:03}_truth"), truth, truth)?);
        }
        formats::write_metrics(&self.path(layout::METRICS), &rows)?;
        std::fs::write(self.path(layout::METRICS_PER_IMAGE), per_image)
            .map_err(CliError::io(format!("writing {}", layout::METRICS_PER_IMAGE)))?;
        outputs.push((layout::METRICS.into(), "metrics"));
        outputs.push((layout::METRICS_PER_IMAGE.into(), "metrics"));
        self.finish(Stage::Evaluate, outputs)
    }

    /// One preview per channel, windowed to `[0, max(truth channel)]`.
    fn previews(
        &self,
        stem: &str,
        img: &MaterialImage,
        truth: &MaterialImage,
    ) -> CliResult<Vec<(String, &'static str)>> {
        (0..2)
            .map(|c| {
                let rel = layout::preview(stem, c);
                let px = preview::window_to_u8(img.channel(c), 0.0, truth.channel_max(c));
                preview::write_png(&self.path(&rel), img.width(), img.height(), &px)?;
                Ok((rel, "preview"))
            })
            .collect()
    }
}

/// Per-channel PSNR and their mean, with the truth maximum of each channel as peak.
pub fn image_psnr(img: &MaterialImage, truth: &MaterialImage) -> CliResult<[f64; 3]> {
    if !img.same_shape(truth) {
        return Err(dect_core::Error::Dimension(format!(
            "reconstruction is {}x{}, truth is {}x{}",
            img.width(),
            img.height(),
            truth.width(),
            truth.height()
        ))
        .into());
    }
    let a = psnr(img.channel(0), truth.channel(0));
    let b = psnr(img.channel(1), truth.channel(1));
    Ok([a, b, (a + b) / 2.0])
}

fn recon_report(rep: &ReconReport, clamped_counts: usize, e2e: &MaterialImage, fbp: &MaterialImage) -> Report {
    let join = |v: Vec<String>| v.join(" ");
    let mut r = Report::new();
    r.set("lambda", format!("{:?}", rep.lambda))
        .set("outer_iterations", rep.cg_iterations.len())
        .set(
            "cg_iterations",
            join(rep.cg_iterations.iter().map(|[a, b]| format!("{a},{b}")).collect()),
        )
        .set(
            "cg_relative_residuals",
            join(
                rep.cg_relative_residuals
                    .iter()
                    .map(|[a, b]| format!("{a:.3e},{b:.3e}"))
                    .collect(),
            ),
        )
        .set("flagged_rays", rep.flagged_rays)
        .set("clamped_counts", clamped_counts)
        .set("e2e_min", format!("{:?}", e2e.min_value()))
        .set("fbp_min", format!("{:?}", fbp.min_value()));
    r
}

/// Convenience for tests and the demo: load, override and run every stage.
pub fn run_all(config_path: &Path, seed: Option<u64>, out: &Path) -> CliResult<()> {
    let cfg = ExperimentConfig::load(config_path)?;
    Run::new(cfg, seed, Some(out.to_path_buf()))?.execute_all()
}
