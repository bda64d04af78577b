use super::elementwise::broadcast_shape;
use super::{gemm, numel, Element, MatRef, Tensor};
use crate::error::{Error, Result};

/// Maps each broadcast batch index to the source batch index of an operand.
fn batch_map(src: &[usize], out: &[usize]) -> Vec<usize> {
    let total = numel(out);
    let offset = out.len() - src.len();
    let mut map = Vec::with_capacity(total);
    for flat in 0..total {
        let mut rem = flat;
        let mut idx = 0;
        let mut stride = 1;
        for ax in (0..out.len()).rev() {
            let coord = rem % out[ax];
            rem /= out[ax];
            if ax >= offset {
                let d = src[ax - offset];
                if d != 1 {
                    idx += coord * stride;
                }
                stride *= d;
            }
        }
        map.push(idx);
    }
    map
}

impl<T: Element> Tensor<T> {
    /// Batched matrix product `[.., M, K] x [.., K, N] -> [.., M, N]` with
    /// broadcast leading dimensions.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", format!("need rank >= 2, got {sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner dims differ: {sa:?} x {sb:?}")));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_shape(ba, bb)
            .ok_or_else(|| Error::shape("matmul", format!("batch dims {ba:?} vs {bb:?}")))?;
        let map_a = batch_map(ba, &batch);
        let map_b = batch_map(bb, &batch);
        let nb = map_a.len();
        let (da, db) = (self.shared_data(), other.shared_data());
        let mut out = vec![T::zero(); nb * m * n];
        for i in 0..nb {
            let a = MatRef::new(&da[map_a[i] * m * k..][..m * k], m, k);
            let b = MatRef::new(&db[map_b[i] * k * n..][..k * n], k, n);
            gemm(a, b, T::zero(), &mut out[i * m * n..(i + 1) * m * n]);
        }
        let mut shape = batch.clone();
        shape.extend([m, n]);
        let (len_a, len_b) = (da.len(), db.len());
        Ok(Tensor::from_op(shape, out, "matmul", &[self, other], move |g, needs| {
            let ga = needs[0].then(|| {
                let mut ga = vec![T::zero(); len_a];
                for i in 0..nb {
                    let dc = MatRef::new(&g[i * m * n..][..m * n], m, n);
                    let b = MatRef::new(&db[map_b[i] * k * n..][..k * n], k, n);
                    gemm(dc, b.t(), T::one(), &mut ga[map_a[i] * m * k..][..m * k]);
                }
                ga
            });
            let gb = needs[1].then(|| {
                let mut gb = vec![T::zero(); len_b];
                for i in 0..nb {
                    let dc = MatRef::new(&g[i * m * n..][..m * n], m, n);
                    let a = MatRef::new(&da[map_a[i] * m * k..][..m * k], m, k);
                    gemm(a.t(), dc, T::one(), &mut gb[map_b[i] * k * n..][..k * n]);
                }
                gb
            });
            vec![ga, gb]
        }))
    }

    /// Affine map over the last axis: `x · weightᵀ + bias` with weight
    /// `[D_out, D_in]`.
    pub fn linear(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let shape = self.shape();
        let d_in = *shape.last().expect("rank >= 1");
        if weight.rank() != 2 || weight.shape()[1] != d_in {
            return Err(Error::shape(
                "linear",
                format!("input {shape:?} with weight {:?}", weight.shape()),
            ));
        }
        let d_out = weight.shape()[0];
        if let Some(b) = bias {
            if b.shape() != [d_out] {
                return Err(Error::shape("linear", format!("bias {:?} for {d_out}", b.shape())));
            }
        }
        let rows = self.numel() / d_in;
        let (dx, dw) = (self.shared_data(), weight.shared_data());
        let mut out = vec![T::zero(); rows * d_out];
        if let Some(b) = bias {
            for row in out.chunks_exact_mut(d_out) {
                row.copy_from_slice(b.data());
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        gemm(
            MatRef::new(&dx, rows, d_in),
            MatRef::new(&dw, d_out, d_in).t(),
            beta,
            &mut out,
        );
        let mut out_shape = shape.to_vec();
        *out_shape.last_mut().expect("rank >= 1") = d_out;
        let zero_bias;
        let bias_ref = match bias {
            Some(b) => b,
            None => {
                zero_bias = Tensor::zeros(&[d_out]);
                &zero_bias
            }
        };
        Ok(Tensor::from_op(
            out_shape,
            out,
            "linear",
            &[self, weight, bias_ref],
            move |g, needs| {
                let dy = MatRef::new(g, rows, d_out);
                let gx = needs[0].then(|| {
                    let mut gx = vec![T::zero(); rows * d_in];
                    gemm(dy, MatRef::new(&dw, d_out, d_in), T::zero(), &mut gx);
                    gx
                });
                let gw = needs[1].then(|| {
                    let mut gw = vec![T::zero(); d_out * d_in];
                    gemm(dy.t(), MatRef::new(&dx, rows, d_in), T::zero(), &mut gw);
                    gw
                });
                let gb = needs[2].then(|| {
                    let mut gb = vec![T::zero(); d_out];
                    for row in g.chunks_exact(d_out) {
                        gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                    gb
                });
                vec![gx, gw, gb]
            },
        ))
    }
}
