//! Central finite-difference gradient checks in double precision.
//!
//! The numeric side only ever evaluates forward passes with tracking
//! disabled, so it is independent of every backward rule it checks.

pub mod suite;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Module, TensorRole};
use crate::tensor::{no_grad, Tensor};

/// Below this gradient norm a tensor is treated as having zero gradient and
/// the absolute difference is reported instead of the relative one.
const ZERO_GRAD_NORM: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates sampled per tensor; every coordinate when `None`.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub rel_err: f64,
    pub coords: usize,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checks: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.checks.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// Norm-wise relative error `|a - n| / max(|a|, |n|)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale < ZERO_GRAD_NORM {
        diff
    } else {
        diff / scale
    }
}

fn coords(n: usize, max: Option<usize>, rng: &mut impl Rng) -> Vec<usize> {
    match max {
        Some(m) if m < n => {
            let mut idx = sample(rng, n, m).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    }
}

fn scalar(loss: &Tensor<f64>) -> Result<f64> {
    loss.item()
}

/// Checks `d f(inputs) / d inputs` for a scalar-valued `f`.
pub fn check_inputs(
    inputs: &[Tensor<f64>],
    f: impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let tracked: Vec<Tensor<f64>> = inputs.iter().map(|t| t.detach().requires_grad()).collect();
    let loss = f(&tracked)?;
    loss.backward()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    for (i, t) in tracked.iter().enumerate() {
        let grad = t.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]);
        let picked = coords(t.numel(), opts.max_coords, &mut rng);
        let mut numeric = Vec::with_capacity(picked.len());
        for &c in &picked {
            let eval = |delta: f64| -> Result<f64> {
                let mut probe: Vec<Tensor<f64>> = inputs.iter().map(|t| t.detach()).collect();
                probe[i].update_data(|d| d[c] += delta);
                no_grad(|| f(&probe)).and_then(|l| scalar(&l))
            };
            numeric.push((eval(opts.step)? - eval(-opts.step)?) / (2.0 * opts.step));
        }
        let analytic: Vec<f64> = picked.iter().map(|&c| grad[c]).collect();
        report.checks.push(TensorCheck {
            name: format!("input{i}"),
            rel_err: relative_error(&analytic, &numeric),
            coords: picked.len(),
            grad_norm: analytic.iter().map(|v| v * v).sum::<f64>().sqrt(),
        });
    }
    Ok(report)
}

/// Checks the gradients of every trainable parameter of `module` for the
/// scalar produced by `loss_fn`.
///
/// `loss_fn` must be deterministic given the module's parameters.
pub fn check_module<M: Module<f64>>(
    module: &mut M,
    mut loss_fn: impl FnMut(&mut M) -> Result<Tensor<f64>>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    crate::nn::zero_grad(module);
    let loss = loss_fn(module)?;
    loss.backward()?;
    drop(loss);

    let mut names = Vec::new();
    module.visit("", &mut |name, role, t| {
        if role == TensorRole::Parameter {
            names.push((name.to_string(), t.numel()));
        }
    });
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    for (name, numel) in names {
        let mut grad = None;
        module.visit("", &mut |n, _, t| {
            if n == name {
                grad = Some(t.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; numel]));
            }
        });
        let grad = grad.ok_or_else(|| Error::MissingGradient(name.clone()))?;
        let picked = coords(numel, opts.max_coords, &mut rng);
        let mut numeric = Vec::with_capacity(picked.len());
        for &c in &picked {
            let mut eval = |delta: f64| -> Result<f64> {
                perturb(module, &name, c, delta);
                let l = no_grad(|| loss_fn(module)).and_then(|l| scalar(&l));
                perturb(module, &name, c, -delta);
                l
            };
            numeric.push((eval(opts.step)? - eval(-opts.step)?) / (2.0 * opts.step));
        }
        let analytic: Vec<f64> = picked.iter().map(|&c| grad[c]).collect();
        report.checks.push(TensorCheck {
            rel_err: relative_error(&analytic, &numeric),
            coords: picked.len(),
            grad_norm: analytic.iter().map(|v| v * v).sum::<f64>().sqrt(),
            name,
        });
    }
    Ok(report)
}

fn perturb<M: Module<f64>>(module: &mut M, name: &str, coord: usize, delta: f64) {
    module.visit_mut("", &mut |n, _, t| {
        if n == name {
            t.update_data(|d| d[coord] += delta);
        }
    });
}

/// Fixed random weights for reducing a tensor-valued output to a scalar.
pub fn projection(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// Random tensor with entries in `[-scale, scale)`.
pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).expect("shape matches data")
}

/// `sum(output * projection)` for a fixed projection matching `output`.
pub fn project(output: &Tensor<f64>, seed: u64) -> Result<Tensor<f64>> {
    Ok(output.mul(&projection(output.shape(), seed))?.sum())
}
