use rand::Rng;

use super::{he_uniform, join, Module, TensorRole};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const BATCH_NORM_MOMENTUM: f64 = 0.1;
pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const LAYER_NORM_EPS: f64 = 1e-6;

fn param<T: Element>(t: Tensor<T>) -> Tensor<T> {
    t.requires_grad()
}

/// Fully connected layer over the last axis.
#[derive(Clone, Debug)]
pub struct Linear<T: Element = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> Linear<T> {
    pub fn new(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Linear {
            weight: param(he_uniform(&[d_out, d_in], d_in, rng)),
            bias: param(Tensor::zeros(&[d_out])),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.linear(&self.weight, Some(&self.bias))
    }
}

impl<T: Element> Module<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &Tensor<T>)) {
        f(&join(prefix, "weight"), TensorRole::Parameter, &self.weight);
        f(&join(prefix, "bias"), TensorRole::Parameter, &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &mut Tensor<T>)) {
        f(&join(prefix, "weight"), TensorRole::Parameter, &mut self.weight);
        f(&join(prefix, "bias"), TensorRole::Parameter, &mut self.bias);
    }
}

/// Square-kernel 2-D convolution; `groups == in_channels` gives depthwise.
#[derive(Clone, Debug)]
pub struct Conv2d<T: Element = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl<T: Element> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if groups == 0 || !c_in.is_multiple_of(groups) || !c_out.is_multiple_of(groups) {
            return Err(Error::InvalidConfig(format!(
                "groups {groups} must divide channels {c_in} -> {c_out}"
            )));
        }
        let c_in_g = c_in / groups;
        Ok(Conv2d {
            weight: param(he_uniform(&[c_out, c_in_g, kernel, kernel], c_in_g * kernel * kernel, rng)),
            bias: param(Tensor::zeros(&[c_out])),
            stride,
            padding,
            groups,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1] * self.groups
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv2d(&self.weight, Some(&self.bias), self.stride, self.padding, self.groups)
    }
}

impl<T: Element> Module<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &Tensor<T>)) {
        f(&join(prefix, "weight"), TensorRole::Parameter, &self.weight);
        f(&join(prefix, "bias"), TensorRole::Parameter, &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &mut Tensor<T>)) {
        f(&join(prefix, "weight"), TensorRole::Parameter, &mut self.weight);
        f(&join(prefix, "bias"), TensorRole::Parameter, &mut self.bias);
    }
}

/// Transposed convolution with weight `[C_in, C_out, K, K]`, no padding.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d<T: Element = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
}

impl<T: Element> ConvTranspose2d<T> {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, stride: usize, rng: &mut impl Rng) -> Self {
        // Each output pixel sees c_in · (K/s)² inputs.
        let fan_in = (c_in * kernel * kernel / (stride * stride)).max(1);
        ConvTranspose2d {
            weight: param(he_uniform(&[c_in, c_out, kernel, kernel], fan_in, rng)),
            bias: param(Tensor::zeros(&[c_out])),
            stride,
        }
    }

    /// The ×2 upsampling layer used throughout the decoder.
    pub fn upsample2(c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        Self::new(c_in, c_out, 2, 2, rng)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv_transpose2d(&self.weight, Some(&self.bias), self.stride, 0)
    }
}

impl<T: Element> Module<T> for ConvTranspose2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &Tensor<T>)) {
        f(&join(prefix, "weight"), TensorRole::Parameter, &self.weight);
        f(&join(prefix, "bias"), TensorRole::Parameter, &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &mut Tensor<T>)) {
        f(&join(prefix, "weight"), TensorRole::Parameter, &mut self.weight);
        f(&join(prefix, "bias"), TensorRole::Parameter, &mut self.bias);
    }
}

/// Per-channel batch normalisation with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T: Element = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Element> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: param(Tensor::ones(&[channels])),
            beta: param(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            momentum: BATCH_NORM_MOMENTUM,
            eps: BATCH_NORM_EPS,
        }
    }

    /// Training mode normalises with batch statistics and folds them into
    /// the running estimates (unbiased variance); eval mode uses the running
    /// estimates only.
    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let eps = T::from_f64(self.eps);
        if !train {
            let (y, _) = x.batch_norm2d(
                &self.gamma,
                &self.beta,
                Some((self.running_mean.data(), self.running_var.data())),
                eps,
            )?;
            return Ok(y);
        }
        let (y, stats) = x.batch_norm2d(&self.gamma, &self.beta, None, eps)?;
        let stats = stats.expect("training mode returns batch statistics");
        let m = T::from_f64(self.momentum);
        let keep = T::one() - m;
        let unbias = if stats.count > 1 {
            T::from_f64(stats.count as f64 / (stats.count - 1) as f64)
        } else {
            T::one()
        };
        self.running_mean.update_data(|rm| {
            rm.iter_mut().zip(&stats.mean).for_each(|(r, &b)| *r = keep * *r + m * b);
        });
        self.running_var.update_data(|rv| {
            rv.iter_mut().zip(&stats.var).for_each(|(r, &b)| *r = keep * *r + m * b * unbias);
        });
        Ok(y)
    }
}

impl<T: Element> Module<T> for BatchNorm2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &Tensor<T>)) {
        f(&join(prefix, "gamma"), TensorRole::Parameter, &self.gamma);
        f(&join(prefix, "beta"), TensorRole::Parameter, &self.beta);
        f(&join(prefix, "running_mean"), TensorRole::Buffer, &self.running_mean);
        f(&join(prefix, "running_var"), TensorRole::Buffer, &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &mut Tensor<T>)) {
        f(&join(prefix, "gamma"), TensorRole::Parameter, &mut self.gamma);
        f(&join(prefix, "beta"), TensorRole::Parameter, &mut self.beta);
        f(&join(prefix, "running_mean"), TensorRole::Buffer, &mut self.running_mean);
        f(&join(prefix, "running_var"), TensorRole::Buffer, &mut self.running_var);
    }
}

/// Normalisation over the last (embedding) axis.
#[derive(Clone, Debug)]
pub struct LayerNorm<T: Element = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub eps: f64,
}

impl<T: Element> LayerNorm<T> {
    pub fn new(width: usize) -> Self {
        LayerNorm {
            gamma: param(Tensor::ones(&[width])),
            beta: param(Tensor::zeros(&[width])),
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(&self.gamma, &self.beta, T::from_f64(self.eps))
    }
}

impl<T: Element> Module<T> for LayerNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &Tensor<T>)) {
        f(&join(prefix, "gamma"), TensorRole::Parameter, &self.gamma);
        f(&join(prefix, "beta"), TensorRole::Parameter, &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &mut Tensor<T>)) {
        f(&join(prefix, "gamma"), TensorRole::Parameter, &mut self.gamma);
        f(&join(prefix, "beta"), TensorRole::Parameter, &mut self.beta);
    }
}

/// Inverted dropout: kept activations are scaled by `1 / (1 - rate)`.
#[derive(Clone, Copy, Debug)]
pub struct Dropout {
    rate: f64,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidRate(rate));
        }
        Ok(Dropout { rate })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn forward<T: Element>(&self, x: &Tensor<T>, train: bool, rng: &mut impl Rng) -> Result<Tensor<T>> {
        if !train || self.rate == 0.0 {
            return Ok(x.clone());
        }
        let scale = T::from_f64(1.0 / (1.0 - self.rate));
        let mask: Vec<T> = (0..x.numel())
            .map(|_| if rng.gen::<f64>() < self.rate { T::zero() } else { scale })
            .collect();
        x.mul(&Tensor::from_vec(x.shape(), mask)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::parameter_count;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parameter_counts_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::<f32>::new(768, 3072, &mut rng);
        assert_eq!(parameter_count(&lin), 768 * 3072 + 3072);
        assert_eq!(parameter_count(&lin), 2_362_368);
        let conv = Conv2d::<f32>::new(1, 64, 3, 2, 1, 1, &mut rng).unwrap();
        assert_eq!(parameter_count(&conv), 640);
        let dw = Conv2d::<f32>::new(3072, 3072, 3, 1, 1, 3072, &mut rng).unwrap();
        assert_eq!(parameter_count(&dw), 3072 * 9 + 3072);
        assert_eq!(parameter_count(&BatchNorm2d::<f32>::new(8)), 16);
    }

    #[test]
    fn he_uniform_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w: Tensor<f64> = he_uniform(&[64, 27], 27, &mut rng);
        let bound = (6.0f64 / 27.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() < bound));
        let spread = w.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(spread > 0.8 * bound);
    }

    #[test]
    fn invalid_groups_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(Conv2d::<f32>::new(6, 4, 3, 1, 1, 4, &mut rng).is_err());
    }

    #[test]
    fn dropout_rate_validation_and_eval_identity() {
        assert!(matches!(Dropout::new(1.0), Err(Error::InvalidRate(_))));
        assert!(matches!(Dropout::new(-0.1), Err(Error::InvalidRate(_))));
        let d = Dropout::new(0.5).unwrap();
        let x = Tensor::<f32>::from_f64(&[4], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(d.forward(&x, false, &mut rng).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn dropout_is_reproducible_and_unbiased() {
        let d = Dropout::new(0.1).unwrap();
        let x = Tensor::<f64>::from_vec(&[100], (0..100).map(|i| 1.0 + i as f64 / 10.0).collect()).unwrap();
        let a = d.forward(&x, true, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = d.forward(&x, true, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());

        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let trials = 10_000;
        let mut acc = vec![0.0; 100];
        for _ in 0..trials {
            let y = d.forward(&x, true, &mut rng).unwrap();
            acc.iter_mut().zip(y.data()).for_each(|(a, v)| *a += v);
        }
        for (sum, want) in acc.iter().zip(x.data()) {
            let mean = sum / trials as f64;
            assert!((mean - want).abs() / want < 0.02, "mean {mean} vs {want}");
        }
    }

    #[test]
    fn batch_norm_updates_running_stats_only_in_training() {
        let mut bn = BatchNorm2d::<f64>::new(1);
        let x = Tensor::<f64>::from_f64(&[2, 1, 1, 2], &[1.0, 3.0, 5.0, 7.0]).unwrap();
        bn.forward(&x, false).unwrap();
        assert_eq!(bn.running_mean.to_vec(), vec![0.0]);
        bn.forward(&x, true).unwrap();
        assert!((bn.running_mean.to_vec()[0] - 0.4).abs() < 1e-12);
        // unbiased batch var = 20/3
        assert!((bn.running_var.to_vec()[0] - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-12);
    }
}
