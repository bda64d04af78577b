//! Layer primitives with trainable parameters.

mod layers;

pub use layers::{BatchNorm2d, Conv2d, ConvTranspose2d, Dropout, LayerNorm, Linear};

use rand::Rng;

use crate::tensor::{Element, Tensor};

/// Whether a named tensor is trained or is running state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorRole {
    Parameter,
    Buffer,
}

/// Anything that owns named tensors.
pub trait Module<T: Element> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &Tensor<T>));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &mut Tensor<T>));
}

/// `prefix.name`, or `name` when the prefix is empty.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Trainable parameters in visiting order. The returned tensors share
/// gradient slots with the module's own.
pub fn parameters<T: Element>(module: &dyn Module<T>) -> Vec<(String, Tensor<T>)> {
    let mut out = Vec::new();
    module.visit("", &mut |name, role, t| {
        if role == TensorRole::Parameter {
            out.push((name.to_string(), t.clone()));
        }
    });
    out
}

pub fn zero_grad<T: Element>(module: &dyn Module<T>) {
    module.visit("", &mut |_, role, t| {
        if role == TensorRole::Parameter {
            t.zero_grad();
        }
    });
}

/// Number of trainable scalars.
pub fn parameter_count<T: Element>(module: &dyn Module<T>) -> usize {
    let mut n = 0;
    module.visit("", &mut |_, role, t| {
        if role == TensorRole::Parameter {
            n += t.numel();
        }
    });
    n
}

/// He-uniform weights: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn he_uniform<T: Element>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect();
    Tensor::from_vec(shape, data).expect("shape matches data")
}

impl<T: Element, M: Module<T>> Module<T> for Vec<M> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &Tensor<T>)) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &mut Tensor<T>)) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}
