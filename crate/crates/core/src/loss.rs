use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Predictions are clamped into `[PROB_FLOOR, 1 - PROB_FLOOR]` before the log.
pub const PROB_FLOOR: f64 = 1e-7;

/// Mean binary cross-entropy of foreground probabilities against `{0, 1}`
/// targets of the same shape. Only `pred` is differentiated; the gradient is
/// zero where the clamp is active.
pub fn bce<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "bce",
            format!("prediction {:?} vs target {:?}", pred.shape(), target.shape()),
        ));
    }
    let lo = T::from_f64(PROB_FLOOR);
    let hi = T::one() - lo;
    let n = T::from_f64(pred.numel() as f64);
    let p = pred.shared_data();
    let y = target.shared_data();
    let mut total = 0.0f64;
    for (&x, &t) in p.iter().zip(y.iter()) {
        let x = x.max(lo).min(hi).as_f64();
        let t = t.as_f64();
        total -= t * x.ln() + (1.0 - t) * (1.0 - x).ln();
    }
    let value = T::from_f64(total / pred.numel() as f64);
    Ok(Tensor::from_op(vec![1], vec![value], "bce", &[pred], move |g, _| {
        let scale = g[0] / n;
        let grad = p
            .iter()
            .zip(y.iter())
            .map(|(&x, &t)| {
                if x < lo || x > hi {
                    T::zero()
                } else {
                    scale * ((T::one() - t) / (T::one() - x) - t / x)
                }
            })
            .collect();
        vec![Some(grad)]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_inputs, GradCheckOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn half_probability_costs_ln2() {
        let p = Tensor::<f64>::full(&[2, 3, 3], 0.5);
        let y = Tensor::from_f64(&[2, 3, 3], &(0..18).map(|i| (i % 2) as f64).collect::<Vec<_>>()).unwrap();
        assert!((bce(&p, &y).unwrap().item().unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let y = Tensor::<f64>::from_f64(&[4], &[0.0, 1.0, 1.0, 0.0]).unwrap();
        assert!(bce(&y, &y).unwrap().item().unwrap() < 1e-5);
    }

    #[test]
    fn hand_computed_pair() {
        let p = Tensor::<f64>::from_f64(&[2], &[0.9, 0.2]).unwrap();
        let y = Tensor::<f64>::from_f64(&[2], &[1.0, 0.0]).unwrap();
        let want = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        let got = bce(&p, &y).unwrap().item().unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.1643).abs() < 1e-4);
    }

    #[test]
    fn shape_mismatch() {
        let p = Tensor::<f32>::zeros(&[2]);
        assert!(bce(&p, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p: Vec<f64> = (0..24).map(|_| rng.gen_range(0.05..0.95)).collect();
            let y: Vec<f64> = (0..24).map(|_| rng.gen_range(0..2) as f64).collect();
            let target = Tensor::from_f64(&[2, 3, 4], &y).unwrap();
            let report = check_inputs(
                &[Tensor::from_f64(&[2, 3, 4], &p).unwrap()],
                |x| bce(&x[0], &target),
                &GradCheckOptions::default(),
            )
            .unwrap();
            assert!(report.max_rel_err() < 1e-5, "{report:?}");
        }
    }
}
