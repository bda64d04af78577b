use std::sync::Arc;

use super::{numel, Element, Tensor};
use crate::error::{Error, Result};

/// `tanh(u) = 1 − 2 / (e^{2u} + 1)`.
#[inline]
fn fast_tanh<T: Element>(u: T) -> T {
    let two = T::one() + T::one();
    T::one() - two / ((two * u).exp() + T::one())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryKind {
    fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        }
    }
}

/// Right-aligned broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out_shape`, with 0 on broadcast axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let offset = out_shape.len() - shape.len();
    let mut strides = vec![0; out_shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` over every element of `out_shape`.
fn for_each_broadcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out_shape.len();
    let total = numel(out_shape);
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    // Innermost axis is walked directly; the rest with an odometer.
    let inner = out_shape[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let mut counter = vec![0usize; rank - 1];
    let (mut base_a, mut base_b) = (0usize, 0usize);
    let mut o = 0;
    while o < total {
        let (mut ia, mut ib) = (base_a, base_b);
        for _ in 0..inner {
            f(o, ia, ib);
            o += 1;
            ia += ia_step;
            ib += ib_step;
        }
        for ax in (0..rank - 1).rev() {
            counter[ax] += 1;
            base_a += sa[ax];
            base_b += sb[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            base_a -= sa[ax] * out_shape[ax];
            base_b -= sb[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
}

fn binary<T: Element>(kind: BinaryKind, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let out_shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
        Error::shape(
            kind.name(),
            format!("{:?} and {:?} are not broadcastable", a.shape(), b.shape()),
        )
    })?;
    let (da, db) = (a.shared_data(), b.shared_data());
    let apply = |x: T, y: T| match kind {
        BinaryKind::Add => x + y,
        BinaryKind::Sub => x - y,
        BinaryKind::Mul => x * y,
        BinaryKind::Div => x / y,
    };
    let data: Vec<T> = if a.shape() == b.shape() {
        da.iter().zip(db.iter()).map(|(&x, &y)| apply(x, y)).collect()
    } else {
        let sa = broadcast_strides(a.shape(), &out_shape);
        let sb = broadcast_strides(b.shape(), &out_shape);
        let mut out = vec![T::zero(); numel(&out_shape)];
        for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| out[o] = apply(da[i], db[j]));
        out
    };
    let (shape_a, shape_b, oshape) = (a.shape().to_vec(), b.shape().to_vec(), out_shape.clone());
    Ok(Tensor::from_op(
        out_shape,
        data,
        kind.name(),
        &[a, b],
        move |g, needs| {
            let full_a = |f: &dyn Fn(T, T, T) -> T| -> Vec<T> {
                let sa = broadcast_strides(&shape_a, &oshape);
                let sb = broadcast_strides(&shape_b, &oshape);
                let mut acc = vec![T::zero(); numel(&shape_a)];
                for_each_broadcast(&oshape, &sa, &sb, |o, i, j| acc[i] += f(g[o], da[i], db[j]));
                acc
            };
            let full_b = |f: &dyn Fn(T, T, T) -> T| -> Vec<T> {
                let sa = broadcast_strides(&shape_a, &oshape);
                let sb = broadcast_strides(&shape_b, &oshape);
                let mut acc = vec![T::zero(); numel(&shape_b)];
                for_each_broadcast(&oshape, &sa, &sb, |o, i, j| acc[j] += f(g[o], da[i], db[j]));
                acc
            };
            let ga = needs[0].then(|| match kind {
                BinaryKind::Add | BinaryKind::Sub => reduce_generic(g, &oshape, &shape_a),
                BinaryKind::Mul => full_a(&|g, _x, y| g * y),
                BinaryKind::Div => full_a(&|g, _x, y| g / y),
            });
            let gb = needs[1].then(|| match kind {
                BinaryKind::Add => reduce_generic(g, &oshape, &shape_b),
                BinaryKind::Sub => reduce_generic(g, &oshape, &shape_b)
                    .into_iter()
                    .map(|v| -v)
                    .collect(),
                BinaryKind::Mul => full_b(&|g, x, _y| g * x),
                BinaryKind::Div => full_b(&|g, x, y| -g * x / (y * y)),
            });
            vec![ga, gb]
        },
    ))
}

/// Sums a gradient of `out_shape` down to a broadcast source of `in_shape`.
fn reduce_generic<T: Element>(grad: &[T], out_shape: &[usize], in_shape: &[usize]) -> Vec<T> {
    if out_shape == in_shape {
        return grad.to_vec();
    }
    let s_in = broadcast_strides(in_shape, out_shape);
    let zeros = vec![0; out_shape.len()];
    let mut acc = vec![T::zero(); numel(in_shape)];
    for_each_broadcast(out_shape, &s_in, &zeros, |o, i, _| acc[i] += grad[o]);
    acc
}

/// Applies `f` elementwise; `df(x, y)` is the derivative given input and output.
fn unary<T: Element>(
    x: &Tensor<T>,
    name: &'static str,
    f: impl Fn(T) -> T,
    df: impl Fn(T, T) -> T + Send + Sync + 'static,
) -> Tensor<T> {
    let input = x.shared_data();
    let out: Arc<Vec<T>> = Arc::new(input.iter().map(|&v| f(v)).collect());
    let saved = Arc::clone(&out);
    Tensor::from_op(
        x.shape().to_vec(),
        out.to_vec(),
        name,
        &[x],
        move |g, _| {
            vec![Some(
                g.iter()
                    .zip(input.iter().zip(saved.iter()))
                    .map(|(&g, (&x, &y))| g * df(x, y))
                    .collect(),
            )]
        },
    )
}

const GELU_COEF: f64 = 0.044_715;
// sqrt(2/pi)
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

impl<T: Element> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(BinaryKind::Add, self, other)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(BinaryKind::Sub, self, other)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(BinaryKind::Mul, self, other)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(BinaryKind::Div, self, other)
    }

    pub fn neg(&self) -> Tensor<T> {
        unary(self, "neg", |v| -v, |_, _| -T::one())
    }

    pub fn exp(&self) -> Tensor<T> {
        unary(self, "exp", |v| v.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Tensor<T> {
        unary(self, "log", |v| v.ln(), |x, _| T::one() / x)
    }

    pub fn scale(&self, factor: T) -> Tensor<T> {
        unary(self, "scale", move |v| v * factor, move |_, _| factor)
    }

    pub fn add_scalar(&self, value: T) -> Tensor<T> {
        unary(self, "add_scalar", move |v| v + value, |_, _| T::one())
    }

    pub fn relu(&self) -> Tensor<T> {
        unary(
            self,
            "relu",
            |v| if v > T::zero() { v } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        unary(
            self,
            "sigmoid",
            |v| T::one() / (T::one() + (-v).exp()),
            |_, y| y * (T::one() - y),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor<T> {
        let c = T::from_f64(GELU_COEF);
        let s = T::from_f64(GELU_SCALE);
        let half = T::from_f64(0.5);
        let three = T::from_f64(3.0);
        unary(
            self,
            "gelu",
            move |x| half * x * (T::one() + fast_tanh(s * (x + c * x * x * x))),
            move |x, _| {
                let u = s * (x + c * x * x * x);
                let th = fast_tanh(u);
                let du = s * (T::one() + three * c * x * x);
                half * (T::one() + th) + half * x * (T::one() - th * th) * du
            },
        )
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, lo: T, hi: T) -> Tensor<T> {
        unary(
            self,
            "clamp",
            move |v| v.max(lo).min(hi),
            move |x, _| if x >= lo && x <= hi { T::one() } else { T::zero() },
        )
    }

    /// Softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} for rank {}", shape.len())));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = self.data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = T::neg_infinity();
                for k in 0..len {
                    max = max.max(x[base + k * inner]);
                }
                let mut total = T::zero();
                for k in 0..len {
                    let e = (x[base + k * inner] - max).exp();
                    out[base + k * inner] = e;
                    total += e;
                }
                for k in 0..len {
                    out[base + k * inner] /= total;
                }
            }
        }
        let saved = Arc::new(out.clone());
        Ok(Tensor::from_op(shape, out, "softmax", &[self], move |g, _| {
            let y = &saved;
            let mut dx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut dot = T::zero();
                    for k in 0..len {
                        dot += g[base + k * inner] * y[base + k * inner];
                    }
                    for k in 0..len {
                        let idx = base + k * inner;
                        dx[idx] = y[idx] * (g[idx] - dot);
                    }
                }
            }
            vec![Some(dx)]
        }))
    }
}

/// `(outer, axis_len, inner)` factorisation of a shape around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
