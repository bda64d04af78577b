//! Finite-difference checks of every differentiable layer, each on several
//! random draws.

use std::cell::RefCell;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_inputs, check_module, project, random_tensor, GradCheckOptions, GradCheckReport, TensorCheck};
use crate::config::{ModelConfig, Variant};
use crate::encoder::{Mep, Msa};
use crate::error::Result;
use crate::loss::bce;
use crate::model::TransCC;
use crate::nn::{BatchNorm2d, Conv2d, ConvTranspose2d, LayerNorm, Linear, Module};
use crate::tensor::Tensor;

/// Largest relative error tolerated for a single layer.
pub const LAYER_TOLERANCE: f64 = 1e-4;
/// Largest relative error tolerated for the miniature end-to-end network.
pub const NETWORK_TOLERANCE: f64 = 1e-3;
/// Finite-difference step for the network case. The ReLUs make the loss
/// piecewise smooth, and a smaller step rarely straddles a kink.
pub const NETWORK_STEP: f64 = 1e-6;
pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Outcome of one case over all seeds.
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub tolerance: f64,
    pub seeds: usize,
    pub max_rel_err: f64,
    /// Tensor with the largest error and the seed it occurred at.
    pub worst: Option<(String, u64)>,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

impl fmt::Display for SuiteEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let worst = self.worst.as_ref().map_or(String::new(), |(t, s)| format!("{t} (seed {s})"));
        write!(
            f,
            "{:<16} {:>11.3e} {:>9.0e} {:>5}  {:<4}  {worst}",
            self.name,
            self.max_rel_err,
            self.tolerance,
            self.seeds,
            if self.passed() { "ok" } else { "FAIL" },
        )
    }
}

/// Column header matching [`SuiteEntry`]'s `Display`.
pub const SUITE_HEADER: &str = "case             max rel err tolerance seeds  pass  worst tensor";

type Case = fn(u64) -> Result<GradCheckReport>;

/// Every case, in reporting order.
pub fn cases() -> Vec<(&'static str, f64, Case)> {
    vec![
        ("conv", LAYER_TOLERANCE, conv),
        ("depthwise_conv", LAYER_TOLERANCE, depthwise_conv),
        ("transposed_conv", LAYER_TOLERANCE, transposed_conv),
        ("linear", LAYER_TOLERANCE, linear),
        ("batchnorm", LAYER_TOLERANCE, batchnorm),
        ("layernorm", LAYER_TOLERANCE, layernorm),
        ("softmax", LAYER_TOLERANCE, softmax),
        ("gelu", LAYER_TOLERANCE, gelu),
        ("msa", LAYER_TOLERANCE, msa),
        ("mep", LAYER_TOLERANCE, mep),
        ("bce", LAYER_TOLERANCE, bce_case),
        ("network", NETWORK_TOLERANCE, network),
    ]
}

/// Runs every case on every seed.
pub fn run_suite(seeds: &[u64]) -> Result<Vec<SuiteEntry>> {
    cases().into_iter().map(|(name, tolerance, case)| run_case(name, tolerance, case, seeds)).collect()
}

pub fn run_case(name: &'static str, tolerance: f64, case: Case, seeds: &[u64]) -> Result<SuiteEntry> {
    let mut entry = SuiteEntry {
        name,
        tolerance,
        seeds: seeds.len(),
        max_rel_err: 0.0,
        worst: None,
    };
    for &seed in seeds {
        let report = case(seed)?;
        if let Some(w) = report.worst() {
            if entry.worst.is_none() || w.rel_err > entry.max_rel_err {
                entry.max_rel_err = w.rel_err;
                entry.worst = Some((w.name.clone(), seed));
            }
        }
    }
    Ok(entry)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ 0xa5a5)
}

fn opts(seed: u64) -> GradCheckOptions {
    GradCheckOptions {
        seed,
        ..GradCheckOptions::default()
    }
}

/// Randomises every parameter so that no check runs at a degenerate
/// initial value such as a zero bias or unit gain.
fn randomise<M: Module<f64>>(module: &mut M, rng: &mut impl Rng) {
    module.visit_mut("", &mut |_, _, t| {
        t.update_data(|d| d.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5) + *v * 0.5));
    });
}

/// Input and parameter gradients of `forward` applied to `x`.
fn layer<M: Module<f64>>(
    mut module: M,
    x: Tensor<f64>,
    forward: impl Fn(&mut M, &Tensor<f64>) -> Result<Tensor<f64>>,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut report = check_module(&mut module, |m| project(&forward(m, &x)?, seed), &opts(seed))?;
    let cell = RefCell::new(module);
    let inputs = check_inputs(
        std::slice::from_ref(&x),
        |t| project(&forward(&mut cell.borrow_mut(), &t[0])?, seed),
        &opts(seed),
    )?;
    report.checks.extend(inputs.checks.into_iter().map(|c| TensorCheck { name: "input".into(), ..c }));
    Ok(report)
}

fn conv(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let stride = r.gen_range(1..3);
    let mut m = Conv2d::new(3, 4, 3, stride, 1, 1, &mut r)?;
    randomise(&mut m, &mut r);
    let x = random_tensor(&[2, 3, 6, 5], 1.0, &mut r);
    layer(m, x, |m, x| m.forward(x), seed)
}

fn depthwise_conv(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut m = Conv2d::new(6, 6, 3, 1, 1, 6, &mut r)?;
    randomise(&mut m, &mut r);
    let x = random_tensor(&[2, 6, 4, 5], 1.0, &mut r);
    layer(m, x, |m, x| m.forward(x), seed)
}

fn transposed_conv(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut m = ConvTranspose2d::upsample2(3, 2, &mut r);
    randomise(&mut m, &mut r);
    let x = random_tensor(&[2, 3, 3, 4], 1.0, &mut r);
    layer(m, x, |m, x| m.forward(x), seed)
}

fn linear(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut m = Linear::new(5, 4, &mut r);
    randomise(&mut m, &mut r);
    let x = random_tensor(&[2, 3, 5], 1.0, &mut r);
    layer(m, x, |m, x| m.forward(x), seed)
}

fn batchnorm(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut m = BatchNorm2d::new(3);
    randomise(&mut m, &mut r);
    m.running_var.update_data(|v| v.iter_mut().for_each(|v| *v = v.abs() + 0.5));
    let x = random_tensor(&[3, 3, 4, 4], 1.0, &mut r);
    let train = r.gen_bool(0.5);
    layer(m, x, move |m, x| m.forward(x, train), seed)
}

fn layernorm(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut m = LayerNorm::new(6);
    randomise(&mut m, &mut r);
    let x = random_tensor(&[2, 3, 6], 1.0, &mut r);
    layer(m, x, |m, x| m.forward(x), seed)
}

fn softmax(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let axis = r.gen_range(0..3);
    let x = random_tensor(&[3, 4, 5], 2.0, &mut r);
    check_inputs(&[x], |t| project(&t[0].softmax(axis)?, seed), &opts(seed))
}

fn gelu(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let x = random_tensor(&[4, 10], 4.0, &mut r);
    check_inputs(&[x], |t| project(&t[0].gelu(), seed), &opts(seed))
}

fn msa(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut m = Msa::new(8, 2, &mut r)?;
    randomise(&mut m, &mut r);
    let x = random_tensor(&[2, 5, 8], 1.0, &mut r);
    layer(m, x, |m, x| m.forward(x), seed)
}

fn mep(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut m = Mep::new(4, 2, &mut r)?;
    randomise(&mut m, &mut r);
    let x = random_tensor(&[2, 6, 4], 1.0, &mut r);
    layer(m, x, |m, x| m.forward(x, (2, 3), true), seed)
}

fn bce_case(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let n = 24;
    let pred = Tensor::from_vec(&[2, n / 2], (0..n).map(|_| r.gen_range(0.05..0.95)).collect())?;
    let target = Tensor::from_vec(&[2, n / 2], (0..n).map(|_| if r.gen_bool(0.5) { 1.0 } else { 0.0 }).collect())?;
    check_inputs(&[pred], |t| bce(&t[0], &target), &opts(seed))
}

/// Configuration of the miniature end-to-end network.
pub fn network_config() -> ModelConfig {
    ModelConfig {
        image_size: 32,
        embed_dim: 16,
        num_heads: 2,
        depth: 2,
        mlp_ratio: 2,
        dropout: 0.0,
        fie_channels: vec![2, 3, 4, 4],
        decoder_channels: vec![4, 3, 2, 2],
        skip_channels: vec![3],
        taps: vec![1, 2],
        variant: Variant::Full,
        ..ModelConfig::default()
    }
}

fn network(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut m = TransCC::<f64>::new(&network_config(), seed)?;
    let x = random_tensor(&[2, 1, 32, 32], 1.0, &mut r);
    let target = Tensor::from_vec(&[2, 32, 32], (0..2048).map(|_| if r.gen_bool(0.2) { 1.0 } else { 0.0 }).collect())?;
    let opts = GradCheckOptions {
        max_coords: Some(4),
        step: NETWORK_STEP,
        ..opts(seed)
    };
    check_module(
        &mut m,
        |m| {
            let probs = m.forward(&x, true, &mut ChaCha8Rng::seed_from_u64(0))?;
            bce(&crate::model::vessel_channel(&probs)?, &target)
        },
        &opts,
    )
}
