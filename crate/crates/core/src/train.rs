//! End-to-end training of the shared denoiser through the unrolled loop.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::decomp::PolynomialDecomposer;
use crate::denoiser::DenoiserParams;
use crate::error::{dim_err, Error, Result};
use crate::image::MaterialImage;
use crate::projector::Geometry;
use crate::recon::{DcSystem, ReconConfig};
use crate::sinogram::EnergySinogram;

/// Gradient of the DC output with respect to its prior `z`.
///
/// The unclamped solution satisfies `(H + λI) x = r + λ z`, so
/// `∂x/∂z = λ (H + λI)⁻¹` and the vector-Jacobian product is one more CG
/// solve on the same symmetric operator.
pub fn dc_backward(system: &DcSystem, lambda: f64, upstream: &[f64], config: &ReconConfig) -> Result<Vec<f64>> {
    if upstream.len() != system.n_unknowns() {
        return Err(dim_err(format!(
            "upstream gradient has {} entries, expected {}",
            upstream.len(),
            system.n_unknowns()
        )));
    }
    if lambda == 0.0 {
        return Ok(vec![0.0; upstream.len()]);
    }
    let mut v = vec![0.0; upstream.len()];
    system.solve_shifted(lambda, upstream, &mut v, config.cg_rel_tol, config.cg_max_iter)?;
    v.iter_mut().for_each(|x| *x *= lambda);
    Ok(v)
}

/// The unrolled loop recorded on a tape.
pub struct UnrolledGraph<'s> {
    pub tape: Tape<'s>,
    pub params: Vec<(Var, Var)>,
    /// Priors `z^k` fed to each DC block (`z⁰` is a constant zero leaf).
    pub priors: Vec<Var>,
    pub output: Var,
}

/// Records `K` rounds of DC solve and denoising; the output is the last clamped DC result.
pub fn record_unrolled<'s>(
    system: &'s DcSystem,
    denoiser: &DenoiserParams,
    config: &ReconConfig,
) -> Result<UnrolledGraph<'s>> {
    config.validate()?;
    let g = system.geometry();
    let lambda = system.resolve_lambda(config.lambda);
    let mut tape = Tape::new();
    let params = tape.denoiser_leaves(denoiser);
    let mut z = tape.leaf(vec![0.0; system.n_unknowns()], false);
    let mut priors = vec![z];
    let mut warm: Option<Vec<f64>> = None;
    let mut output = z;
    for k in 0..config.k_outer {
        let (raw, sol) = tape.dc_solve(z, system, lambda, config, warm.as_deref())?;
        let x = tape.clamp_nonneg(raw);
        output = x;
        if k + 1 < config.k_outer {
            z = tape.denoise(x, denoiser, &params, g.width(), g.height())?;
            priors.push(z);
        }
        warm = Some(sol.unclamped);
    }
    Ok(UnrolledGraph {
        tape,
        params,
        priors,
        output,
    })
}

/// Mean squared error of the unrolled reconstruction against `x_truth`.
pub fn unrolled_loss(
    system: &DcSystem,
    x_truth: &MaterialImage,
    denoiser: &DenoiserParams,
    config: &ReconConfig,
) -> Result<f64> {
    let mut graph = record_unrolled(system, denoiser, config)?;
    check_truth(system, x_truth)?;
    let loss = graph.tape.mse(graph.output, x_truth.as_slice())?;
    Ok(graph.tape.value(loss)[0])
}

/// Loss and its gradient with respect to the flattened denoiser parameters.
pub fn unrolled_loss_and_grad(
    system: &DcSystem,
    x_truth: &MaterialImage,
    denoiser: &DenoiserParams,
    config: &ReconConfig,
) -> Result<(f64, Vec<f64>)> {
    let mut graph = record_unrolled(system, denoiser, config)?;
    check_truth(system, x_truth)?;
    let loss = graph.tape.mse(graph.output, x_truth.as_slice())?;
    let grads = graph.tape.backward(loss)?;
    let mut flat = Vec::with_capacity(denoiser.n_params());
    for (layer, (w, b)) in denoiser.layers.iter().zip(&graph.params) {
        match grads.get(*w) {
            Some(g) => flat.extend_from_slice(g),
            None => flat.extend(core::iter::repeat_n(0.0, layer.weights.len())),
        }
        match grads.get(*b) {
            Some(g) => flat.extend_from_slice(g),
            None => flat.extend(core::iter::repeat_n(0.0, layer.bias.len())),
        }
    }
    Ok((graph.tape.value(loss)[0], flat))
}

fn check_truth(system: &DcSystem, x_truth: &MaterialImage) -> Result<()> {
    let g = system.geometry();
    if x_truth.width() != g.width() || x_truth.height() != g.height() {
        return Err(dim_err("ground truth does not match the reconstruction grid"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 2,
            learning_rate: 1e-3,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Validation("epochs and batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Validation(
                "learning rate must be nonnegative and momentum in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Full-batch loss after an epoch (epoch 0 is the initial state).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub learning_rate: f64,
    /// False when the epoch raised the loss and was rolled back.
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: DenoiserParams,
    pub log: Vec<EpochRecord>,
    /// Epoch at which a non-finite loss stopped training; `params` is then the last finite checkpoint.
    pub aborted_at: Option<usize>,
}

/// Precomputed per-sample systems and targets.
pub struct TrainingSet {
    pub systems: Vec<DcSystem>,
    pub targets: Vec<MaterialImage>,
}

impl TrainingSet {
    pub fn build(
        dataset: &[(EnergySinogram, MaterialImage)],
        geometry: &Geometry,
        decomposer: &PolynomialDecomposer,
    ) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::InsufficientData("training set is empty".into()));
        }
        let mut systems = Vec::with_capacity(dataset.len());
        let mut targets = Vec::with_capacity(dataset.len());
        for (y, x) in dataset {
            systems.push(DcSystem::from_measurements(geometry, decomposer, y)?);
            targets.push(x.clone());
        }
        Ok(Self { systems, targets })
    }

    pub fn len(&self) -> usize {
        self.systems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.systems.is_empty()
    }

    /// Mean unrolled loss over every sample, summed in index order.
    pub fn mean_loss(&self, denoiser: &DenoiserParams, config: &ReconConfig) -> Result<f64> {
        let mut total = 0.0;
        for (s, t) in self.systems.iter().zip(&self.targets) {
            total += unrolled_loss(s, t, denoiser, config)?;
        }
        Ok(total / self.len() as f64)
    }
}

/// Mini-batch SGD with momentum on the mean unrolled loss.
///
/// After every epoch the full-batch loss is re-evaluated; an epoch that
/// raises it is rolled back, the momentum is cleared and the learning rate
/// halved. Gradients are taken of the loss divided by its initial value so
/// step sizes do not depend on the density units.
pub fn train(
    dataset: &[(EnergySinogram, MaterialImage)],
    geometry: &Geometry,
    decomposer: &PolynomialDecomposer,
    init: &DenoiserParams,
    recon: &ReconConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let set = TrainingSet::build(dataset, geometry, decomposer)?;
    train_on_set(&set, init, recon, config)
}

pub fn train_on_set(
    set: &TrainingSet,
    init: &DenoiserParams,
    recon: &ReconConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    recon.validate()?;
    init.validate()?;
    if set.is_empty() {
        return Err(Error::InsufficientData("training set is empty".into()));
    }
    let mut params = init.clone();
    let mut flat = params.flatten();
    let mut checkpoint = flat.clone();
    let mut velocity = vec![0.0; flat.len()];
    let mut lr = config.learning_rate;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..set.len()).collect();

    let mut best = set.mean_loss(&params, recon)?;
    if !best.is_finite() {
        return Err(Error::Divergence("initial training loss is not finite".into()));
    }
    let objective_scale = if best > 0.0 { 1.0 / best } else { 1.0 };
    let mut log = vec![EpochRecord {
        epoch: 0,
        loss: best,
        learning_rate: lr,
        accepted: true,
    }];
    let mut aborted_at = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut finite = true;
        for batch in order.chunks(config.batch_size) {
            let mut grad = vec![0.0; flat.len()];
            for &i in batch {
                match unrolled_loss_and_grad(&set.systems[i], &set.targets[i], &params, recon) {
                    Ok((_, g)) => grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    Err(Error::Divergence(_)) => {
                        finite = false;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            let norm = objective_scale / batch.len() as f64;
            if !finite || grad.iter().any(|g| !g.is_finite()) {
                finite = false;
                break;
            }
            for ((p, v), g) in flat.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = config.momentum * *v + g * norm;
                *p -= lr * *v;
            }
            params.set_flat(&flat)?;
        }
        let loss = if finite {
            match set.mean_loss(&params, recon) {
                Ok(l) => l,
                Err(Error::Divergence(_)) => f64::NAN,
                Err(e) => return Err(e),
            }
        } else {
            f64::NAN
        };
        if !loss.is_finite() {
            flat.copy_from_slice(&checkpoint);
            params.set_flat(&flat)?;
            aborted_at = Some(epoch);
            log::warn!("non-finite training loss at epoch {epoch}; keeping the last finite checkpoint");
            break;
        }
        if loss > best {
            flat.copy_from_slice(&checkpoint);
            params.set_flat(&flat)?;
            velocity.iter_mut().for_each(|v| *v = 0.0);
            lr *= 0.5;
            log.push(EpochRecord {
                epoch,
                loss: best,
                learning_rate: lr,
                accepted: false,
            });
        } else {
            checkpoint.copy_from_slice(&flat);
            best = loss;
            log.push(EpochRecord {
                epoch,
                loss,
                learning_rate: lr,
                accepted: true,
            });
        }
    }
    Ok(TrainOutcome {
        params,
        log,
        aborted_at,
    })
}
