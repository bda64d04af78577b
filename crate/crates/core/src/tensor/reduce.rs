use super::elementwise::axis_split;
use super::{Element, Tensor};
use crate::error::{Error, Result};

impl<T: Element> Tensor<T> {
    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&self) -> Tensor<T> {
        let total: T = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(vec![1], vec![total], "sum", &[self], move |g, _| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = T::from_f64(self.numel() as f64);
        self.sum().scale(T::one() / n)
    }

    /// Sums over `axis`, removing it (a rank-1 input yields shape `[1]`).
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<T>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", format!("axis {axis} for rank {}", shape.len())));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = self.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = &x[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter_map(|(i, &d)| (i != axis).then_some(d))
            .collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok(Tensor::from_op(out_shape, out, "sum_axis", &[self], move |g, _| {
            let mut dx = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                for k in 0..len {
                    dx[(o * len + k) * inner..(o * len + k + 1) * inner]
                        .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(dx)]
        }))
    }
}
