//! A minimal reverse-mode tape over flat `f64` tensors.
//!
//! Nodes are appended in evaluation order, so a reverse sweep over the node
//! list is a valid topological order for back-propagation.

use alloc::vec;
use alloc::vec::Vec;

use crate::denoiser::{conv2d_backward, conv2d_forward, ConvShape, DenoiserParams};
use crate::error::{dim_err, Result};
use crate::projector::Geometry;
use crate::recon::{dc_solve, DcSolution, DcSystem, ReconConfig};
use crate::train::dc_backward;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<'s> {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Var,
        shape: ConvShape,
    },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    /// `max(x, 0)`; gradient passes where `x > 0`.
    ClampNonneg(Var),
    /// Unclamped solution of the DC system for prior `prior`.
    DcSolve {
        prior: Var,
        system: &'s DcSystem,
        lambda: f64,
        config: ReconConfig,
    },
    Project {
        input: Var,
        geometry: &'s Geometry,
    },
    BackProject {
        input: Var,
        geometry: &'s Geometry,
    },
    /// Mean of `(x - target)²`, a scalar.
    Mse {
        input: Var,
        target: Vec<f64>,
    },
}

struct Node<'s> {
    value: Vec<f64>,
    op: Op<'s>,
    requires_grad: bool,
}

/// Recorded computation over images, sinograms and parameters.
#[derive(Default)]
pub struct Tape<'s> {
    nodes: Vec<Node<'s>>,
}

/// Gradients of one output with respect to every node that requires them.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl<'s> Tape<'s> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, op: Op<'s>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// An input tensor; `requires_grad` marks trainable parameters or inputs of interest.
    pub fn leaf(&mut self, value: Vec<f64>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, shape: ConvShape) -> Result<Var> {
        let m = shape.width * shape.height;
        if self.value(input).len() != shape.in_ch * m
            || self.value(weight).len() != shape.out_ch * shape.in_ch * shape.kernel * shape.kernel
            || self.value(bias).len() != shape.out_ch
        {
            return Err(dim_err("convolution operand sizes do not match the shape"));
        }
        let mut out = vec![0.0; shape.out_ch * m];
        conv2d_forward(self.value(input), self.value(weight), self.value(bias), shape, &mut out);
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            out,
            Op::Conv {
                input,
                weight,
                bias,
                shape,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|v| v.max(0.0)).collect();
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(dim_err("add operands differ in length"));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(dim_err("sub operands differ in length"));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).iter().map(|v| v * factor).collect();
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, factor), rg)
    }

    pub fn clamp_nonneg(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|v| if *v > 0.0 { *v } else { 0.0 }).collect();
        let rg = self.rg(a);
        self.push(out, Op::ClampNonneg(a), rg)
    }

    /// Records a DC solve. The node's value is the unclamped solution; the
    /// warm start only affects the forward iterate and is not differentiated.
    pub fn dc_solve(
        &mut self,
        prior: Var,
        system: &'s DcSystem,
        lambda: f64,
        config: &ReconConfig,
        warm: Option<&[f64]>,
    ) -> Result<(Var, DcSolution)> {
        let sol = dc_solve(system, self.value(prior), lambda, config, warm)?;
        let rg = self.rg(prior);
        let v = self.push(
            sol.unclamped.clone(),
            Op::DcSolve {
                prior,
                system,
                lambda,
                config: *config,
            },
            rg,
        );
        Ok((v, sol))
    }

    /// `A x` applied to each image channel of `input`.
    pub fn project(&mut self, input: Var, geometry: &'s Geometry) -> Result<Var> {
        let m = geometry.n_pixels();
        let x = self.value(input);
        if x.is_empty() || !x.len().is_multiple_of(m) {
            return Err(dim_err("projector input is not a whole number of image channels"));
        }
        let mut out = Vec::with_capacity(x.len() / m * geometry.n_rays());
        for ch in x.chunks(m) {
            out.extend(geometry.forward_project(ch)?);
        }
        let rg = self.rg(input);
        Ok(self.push(out, Op::Project { input, geometry }, rg))
    }

    /// `Aᵀ y` applied to each sinogram channel of `input`.
    pub fn back_project(&mut self, input: Var, geometry: &'s Geometry) -> Result<Var> {
        let n = geometry.n_rays();
        let y = self.value(input);
        if y.is_empty() || !y.len().is_multiple_of(n) {
            return Err(dim_err(
                "back-projector input is not a whole number of sinogram channels",
            ));
        }
        let mut out = Vec::with_capacity(y.len() / n * geometry.n_pixels());
        for ch in y.chunks(n) {
            out.extend(geometry.back_project(ch)?);
        }
        let rg = self.rg(input);
        Ok(self.push(out, Op::BackProject { input, geometry }, rg))
    }

    pub fn mse(&mut self, input: Var, target: &[f64]) -> Result<Var> {
        let x = self.value(input);
        if x.len() != target.len() {
            return Err(dim_err("loss target differs in length from the estimate"));
        }
        let loss = crate::metrics::mse(x, target);
        let rg = self.rg(input);
        Ok(self.push(
            vec![loss],
            Op::Mse {
                input,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// Records `D(x) = x - s·N(x / s)` with the given parameter leaves
    /// (`(weight, bias)` per layer).
    pub fn denoise(
        &mut self,
        x: Var,
        denoiser: &DenoiserParams,
        param_vars: &[(Var, Var)],
        width: usize,
        height: usize,
    ) -> Result<Var> {
        if param_vars.len() != denoiser.layers.len() {
            return Err(dim_err("one (weight, bias) pair is needed per layer"));
        }
        let mut act = self.scale(x, 1.0 / denoiser.input_scale);
        let n_layers = denoiser.layers.len();
        for (l, (layer, &(w, b))) in denoiser.layers.iter().zip(param_vars).enumerate() {
            let shape = ConvShape {
                in_ch: layer.in_channels,
                out_ch: layer.out_channels,
                kernel: layer.kernel,
                width,
                height,
            };
            act = self.conv2d(act, w, b, shape)?;
            if l + 1 < n_layers {
                act = self.relu(act);
            }
        }
        let noise = self.scale(act, denoiser.input_scale);
        self.sub(x, noise)
    }

    /// Adds the denoiser's weights and biases as trainable leaves.
    pub fn denoiser_leaves(&mut self, denoiser: &DenoiserParams) -> Vec<(Var, Var)> {
        denoiser
            .layers
            .iter()
            .map(|layer| {
                let w = self.leaf(layer.weights.clone(), true);
                let b = self.leaf(layer.bias.clone(), true);
                (w, b)
            })
            .collect()
    }

    /// Back-propagates from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(dim_err("backward() needs a scalar output; use backward_with"));
        }
        self.backward_with(output, vec![1.0])
    }

    /// Back-propagates an arbitrary cotangent `seed` from `output`.
    pub fn backward_with(&self, output: Var, seed: Vec<f64>) -> Result<Gradients> {
        if seed.len() != self.value(output).len() {
            return Err(dim_err("seed length differs from the output"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {}
                Op::Conv {
                    input,
                    weight,
                    bias,
                    shape,
                } => {
                    let mut gi = self.rg(*input).then(|| vec![0.0; self.value(*input).len()]);
                    let mut gw = self.rg(*weight).then(|| vec![0.0; self.value(*weight).len()]);
                    let mut gb = self.rg(*bias).then(|| vec![0.0; self.value(*bias).len()]);
                    conv2d_backward(
                        self.value(*input),
                        self.value(*weight),
                        &g,
                        *shape,
                        gi.as_deref_mut(),
                        gw.as_deref_mut(),
                        gb.as_deref_mut(),
                    );
                    for (v, gv) in [(*input, gi), (*weight, gw), (*bias, gb)] {
                        if let Some(gv) = gv {
                            accumulate(&mut grads, v, &gv);
                        }
                    }
                }
                Op::Relu(a) | Op::ClampNonneg(a) => {
                    let masked: Vec<f64> = self
                        .value(*a)
                        .iter()
                        .zip(&g)
                        .map(|(x, gv)| if *x > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *a, &masked);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    if self.rg(*b) {
                        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                        accumulate(&mut grads, *b, &neg);
                    }
                }
                Op::Scale(a, f) => {
                    let scaled: Vec<f64> = g.iter().map(|v| v * f).collect();
                    accumulate(&mut grads, *a, &scaled);
                }
                Op::DcSolve {
                    prior,
                    system,
                    lambda,
                    config,
                } => {
                    let gz = dc_backward(system, *lambda, &g, config)?;
                    accumulate(&mut grads, *prior, &gz);
                }
                Op::Project { input, geometry } => {
                    let mut gi = Vec::with_capacity(self.value(*input).len());
                    for ch in g.chunks(geometry.n_rays()) {
                        gi.extend(geometry.back_project(ch)?);
                    }
                    accumulate(&mut grads, *input, &gi);
                }
                Op::BackProject { input, geometry } => {
                    let mut gi = Vec::with_capacity(self.value(*input).len());
                    for ch in g.chunks(geometry.n_pixels()) {
                        gi.extend(geometry.forward_project(ch)?);
                    }
                    accumulate(&mut grads, *input, &gi);
                }
                Op::Mse { input, target } => {
                    let x = self.value(*input);
                    let scale = 2.0 * g[0] / x.len() as f64;
                    let gi: Vec<f64> = x.iter().zip(target).map(|(a, t)| scale * (a - t)).collect();
                    accumulate(&mut grads, *input, &gi);
                }
            }
            grads[idx] = Some(g);
        }
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(e, x)| *e += x),
        slot @ None => *slot = Some(g.to_vec()),
    }
}
