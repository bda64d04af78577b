use super::elementwise::axis_split;
use super::{numel, Element, Tensor};
use crate::error::{Error, Result};

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Gathers `src` (of `shape`) into the axis order `perm`.
fn permute_data<T: Copy>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let strides = contiguous_strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let rank = shape.len();
    let total = src.len();
    let mut out = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    let inner = out_shape[rank - 1];
    let inner_stride = out_strides[rank - 1];
    while out.len() < total {
        let mut o = offset;
        for _ in 0..inner {
            out.push(src[o]);
            o += inner_stride;
        }
        for ax in (0..rank - 1).rev() {
            counter[ax] += 1;
            offset += out_strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            offset -= out_strides[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
    out
}

impl<T: Element> Tensor<T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape()),
            ));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.data().to_vec(),
            "reshape",
            &[self],
            |g, _| vec![Some(g.to_vec())],
        ))
    }

    /// Reorders axes so that output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("{perm:?} for rank {rank}")));
        }
        let shape = self.shape().to_vec();
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = permute_data(self.data(), &shape, perm);
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let grad_shape = out_shape.clone();
        Ok(Tensor::from_op(out_shape, out, "permute", &[self], move |g, _| {
            vec![Some(permute_data(g, &grad_shape, &inverse))]
        }))
    }

    /// Swaps two axes.
    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor<T>> {
        let mut perm: Vec<usize> = (0..self.rank()).collect();
        if a >= perm.len() || b >= perm.len() {
            return Err(Error::shape("transpose", format!("axes {a},{b} for rank {}", perm.len())));
        }
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Joins tensors along `axis`; all other dims must agree.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::shape("concat", format!("axis {axis} for rank {rank}")));
        }
        for p in parts {
            let ok = p.rank() == rank
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?} on axis {axis}", p.shape(), first.shape()),
                ));
            }
        }
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total_len: usize = lens.iter().sum();
        let (outer, _, inner) = axis_split(first.shape(), axis);
        let mut shape = first.shape().to_vec();
        shape[axis] = total_len;
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&lens) {
                out.extend_from_slice(&p.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let lens_bw = lens.clone();
        Ok(Tensor::from_op(shape, out, "concat", parts, move |g, needs| {
            let mut grads: Vec<Option<Vec<T>>> = needs
                .iter()
                .zip(&lens_bw)
                .map(|(&need, &len)| need.then(|| Vec::with_capacity(outer * len * inner)))
                .collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (grad, &len) in grads.iter_mut().zip(&lens_bw) {
                    let chunk = &g[pos..pos + len * inner];
                    if let Some(grad) = grad {
                        grad.extend_from_slice(chunk);
                    }
                    pos += len * inner;
                }
            }
            grads
        }))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, full, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(Tensor::from_op(out_shape, out, "narrow", &[self], move |g, _| {
            let mut dx = vec![T::zero(); outer * full * inner];
            for o in 0..outer {
                let base = (o * full + start) * inner;
                dx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(dx)]
        }))
    }
}
