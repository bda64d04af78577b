use std::sync::Arc;

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Per-channel batch mean and biased variance from a training-mode
/// batch-norm pass.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Elements reduced per channel.
    pub count: usize,
}

/// Normalised activations and reciprocal std kept for the backward pass.
struct NormSaved<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Element> Tensor<T> {
    /// Batch normalisation over `[B, C, H, W]`, per channel.
    ///
    /// With `running = Some((mean, var))` the given statistics are used
    /// (inference); otherwise batch statistics are computed and returned.
    pub fn batch_norm2d(
        &self,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(Tensor<T>, Option<BatchStats<T>>)> {
        let [batch, channels, h, w] = match *self.shape() {
            [a, b, c, d] => [a, b, c, d],
            _ => return Err(Error::shape("batch_norm2d", format!("expected rank-4, got {:?}", self.shape()))),
        };
        if gamma.shape() != [channels] || beta.shape() != [channels] {
            return Err(Error::shape(
                "batch_norm2d",
                format!("{channels} channels with gamma {:?} beta {:?}", gamma.shape(), beta.shape()),
            ));
        }
        if let Some((m, v)) = running {
            if m.len() != channels || v.len() != channels {
                return Err(Error::shape("batch_norm2d", "running statistics length"));
            }
        }
        let plane = h * w;
        let count = batch * plane;
        let x = self.data();
        let at = |n: usize, c: usize| (n * channels + c) * plane;

        let (mean, var) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => {
                let mut mean = vec![T::zero(); channels];
                let mut var = vec![T::zero(); channels];
                let denom = T::from_f64(count as f64);
                for c in 0..channels {
                    let mut s = T::zero();
                    for n in 0..batch {
                        s += x[at(n, c)..at(n, c) + plane].iter().copied().sum::<T>();
                    }
                    let mu = s / denom;
                    let mut ss = T::zero();
                    for n in 0..batch {
                        for &v in &x[at(n, c)..at(n, c) + plane] {
                            ss += (v - mu) * (v - mu);
                        }
                    }
                    mean[c] = mu;
                    var[c] = ss / denom;
                }
                (mean, var)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, b) = (gamma.data(), beta.data());
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for n in 0..batch {
            for c in 0..channels {
                let base = at(n, c);
                for i in base..base + plane {
                    let xh = (x[i] - mean[c]) * inv_std[c];
                    xhat[i] = xh;
                    out[i] = g[c] * xh + b[c];
                }
            }
        }
        let training = running.is_none();
        let saved = Arc::new(NormSaved { xhat, inv_std });
        let gamma_data = gamma.shared_data();
        let y = Tensor::from_op(
            self.shape().to_vec(),
            out,
            "batch_norm2d",
            &[self, gamma, beta],
            move |dy, needs| {
                let NormSaved { xhat, inv_std } = &*saved;
                let mut sum_dy = vec![T::zero(); channels];
                let mut sum_dy_xhat = vec![T::zero(); channels];
                for n in 0..batch {
                    for c in 0..channels {
                        let base = (n * channels + c) * plane;
                        for i in base..base + plane {
                            sum_dy[c] += dy[i];
                            sum_dy_xhat[c] += dy[i] * xhat[i];
                        }
                    }
                }
                let gx = needs[0].then(|| {
                    let mut gx = vec![T::zero(); dy.len()];
                    let m = T::from_f64(count as f64);
                    for n in 0..batch {
                        for c in 0..channels {
                            let base = (n * channels + c) * plane;
                            let scale = gamma_data[c] * inv_std[c];
                            for i in base..base + plane {
                                gx[i] = if training {
                                    scale * (dy[i] - sum_dy[c] / m - xhat[i] * sum_dy_xhat[c] / m)
                                } else {
                                    scale * dy[i]
                                };
                            }
                        }
                    }
                    gx
                });
                vec![gx, needs[1].then_some(sum_dy_xhat), needs[2].then_some(sum_dy)]
            },
        );
        let stats = training.then_some(BatchStats { mean, var, count });
        Ok((y, stats))
    }

    /// Layer normalisation over the last axis.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        let width = *self.shape().last().expect("rank >= 1");
        if gamma.shape() != [width] || beta.shape() != [width] {
            return Err(Error::shape(
                "layer_norm",
                format!("last axis {width} with gamma {:?} beta {:?}", gamma.shape(), beta.shape()),
            ));
        }
        let x = self.data();
        let rows = x.len() / width;
        let denom = T::from_f64(width as f64);
        let (g, b) = (gamma.data(), beta.data());
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); x.len()];
        for r in 0..rows {
            let row = &x[r * width..(r + 1) * width];
            let mu = row.iter().copied().sum::<T>() / denom;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / denom;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..width {
                let xh = (row[j] - mu) * is;
                xhat[r * width + j] = xh;
                out[r * width + j] = g[j] * xh + b[j];
            }
        }
        let saved = Arc::new(NormSaved { xhat, inv_std });
        let gamma_data = gamma.shared_data();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            "layer_norm",
            &[self, gamma, beta],
            move |dy, needs| {
                let NormSaved { xhat, inv_std } = &*saved;
                let mut gg = vec![T::zero(); width];
                let mut gb = vec![T::zero(); width];
                let mut gx = needs[0].then(|| vec![T::zero(); dy.len()]);
                for r in 0..rows {
                    let dyr = &dy[r * width..(r + 1) * width];
                    let xr = &xhat[r * width..(r + 1) * width];
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..width {
                        gg[j] += dyr[j] * xr[j];
                        gb[j] += dyr[j];
                        let d = dyr[j] * gamma_data[j];
                        s1 += d;
                        s2 += d * xr[j];
                    }
                    if let Some(gx) = gx.as_mut() {
                        for j in 0..width {
                            let d = dyr[j] * gamma_data[j];
                            gx[r * width + j] = inv_std[r] * (d - s1 / denom - xr[j] * s2 / denom);
                        }
                    }
                }
                vec![gx, needs[1].then_some(gg), needs[2].then_some(gb)]
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let x = Tensor::<f64>::full(&[2, 5], 3.25);
        let y = x
            .layer_norm(&Tensor::ones(&[5]), &Tensor::zeros(&[5]), 1e-6)
            .unwrap();
        assert!(y.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_rows_are_standardised() {
        let x = Tensor::<f64>::from_f64(&[2, 4], &[1.0, 2.0, 3.0, 10.0, -5.0, 0.0, 5.0, 2.0]).unwrap();
        let y = x
            .layer_norm(&Tensor::ones(&[4]), &Tensor::zeros(&[4]), 0.0)
            .unwrap()
            .to_vec();
        for row in y.chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_eval_identity() {
        let x = Tensor::<f64>::from_f64(&[1, 2, 1, 2], &[0.5, -1.0, 2.0, 3.0]).unwrap();
        let (y, stats) = x
            .batch_norm2d(
                &Tensor::ones(&[2]),
                &Tensor::zeros(&[2]),
                Some((&[0.0, 0.0], &[1.0, 1.0])),
                0.0,
            )
            .unwrap();
        assert!(stats.is_none());
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn batch_norm_train_standardises_channels() {
        let x = Tensor::<f64>::from_f64(
            &[2, 2, 1, 3],
            &[1.0, 2.0, 3.0, 10.0, 20.0, 60.0, -4.0, 0.0, 7.0, 5.0, 5.5, 6.0],
        )
        .unwrap();
        let (y, stats) = x
            .batch_norm2d(&Tensor::ones(&[2]), &Tensor::zeros(&[2]), None, 1e-12)
            .unwrap();
        let stats = stats.unwrap();
        assert_eq!(stats.count, 6);
        let d = y.to_vec();
        for c in 0..2 {
            let vals: Vec<f64> = (0..2).flat_map(|n| d[(n * 2 + c) * 3..(n * 2 + c) * 3 + 3].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / 6.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-4);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
