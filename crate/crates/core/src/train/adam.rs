use crate::error::{Error, Result};
use crate::nn::{Module, TensorRole};
use crate::tensor::{Element, Tensor};

pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam<T: Element = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Number of completed steps.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of every parameter of `module`, in visiting order.
    pub fn step(&mut self, module: &mut dyn Module<T>) -> Result<()> {
        let mut params = Vec::new();
        module.visit("", &mut |name, role, t| {
            if role == TensorRole::Parameter {
                params.push((name.to_string(), t.grad()));
            }
        });
        let grads = params
            .into_iter()
            .map(|(name, g)| g.ok_or(Error::MissingGradient(name)))
            .collect::<Result<Vec<_>>>()?;
        self.begin(&grads.iter().map(Tensor::numel).collect::<Vec<_>>())?;
        let mut i = 0;
        module.visit_mut("", &mut |_, role, t| {
            if role == TensorRole::Parameter {
                self.update(i, t, grads[i].data());
                i += 1;
            }
        });
        Ok(())
    }

    /// One update of a list of tensors with explicitly supplied gradients.
    pub fn step_tensors(&mut self, params: &mut [Tensor<T>], grads: &[Vec<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::MissingGradient(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        self.begin(&grads.iter().map(Vec::len).collect::<Vec<_>>())?;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            self.update(i, p, g);
        }
        Ok(())
    }

    fn begin(&mut self, sizes: &[usize]) -> Result<()> {
        if self.m.is_empty() {
            self.m = sizes.iter().map(|&n| vec![T::zero(); n]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != sizes.len() || self.m.iter().zip(sizes).any(|(m, &n)| m.len() != n) {
            return Err(Error::shape("adam", "parameter set changed between steps"));
        }
        self.t += 1;
        Ok(())
    }

    fn update(&mut self, i: usize, param: &mut Tensor<T>, grad: &[T]) {
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (a1, a2) = (T::from_f64(1.0 - self.beta1), T::from_f64(1.0 - self.beta2));
        let c1 = T::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let (lr, eps) = (T::from_f64(self.lr), T::from_f64(self.eps));
        let (m, v) = (&mut self.m[i], &mut self.v[i]);
        param.update_data(|p| {
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grad) {
                *m = b1 * *m + a1 * g;
                *v = b2 * *v + a2 * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        });
    }
}
