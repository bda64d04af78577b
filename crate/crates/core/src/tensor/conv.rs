//! 2-D convolution and transposed convolution via im2col + GEMM.

use super::{gemm, Element, MatRef, Tensor};
use crate::error::{Error, Result};

/// `floor((size + 2·padding − kernel) / stride) + 1`, or `None` when the
/// kernel does not fit.
pub fn conv_output_size(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    (stride > 0 && padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

/// `(size − 1)·stride − 2·padding + kernel`.
pub fn conv_transpose_output_size(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    ((size - 1) * stride + kernel).checked_sub(2 * padding).filter(|&v| v > 0)
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    /// Output columns `ox` whose tap `kx` lands inside the image, as a
    /// half-open range.
    fn valid_span(&self, k: usize, out: usize, size: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
        let hi = match (size + p).checked_sub(k + 1) {
            Some(last) => (last / s + 1).min(out),
            None => 0,
        };
        (lo.min(hi), hi)
    }

    /// Visits every in-bounds run of taps as
    /// `(col_start, image_start, len)`; consecutive columns step the image
    /// index by `stride`.
    #[inline]
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let k = self.kernel;
        let cols = self.col_cols();
        let x_spans: Vec<(usize, usize)> = (0..k).map(|kx| self.valid_span(kx, self.out_w, self.width)).collect();
        for c in 0..self.channels {
            for ky in 0..k {
                let (oy0, oy1) = self.valid_span(ky, self.out_h, self.height);
                for (kx, &(ox0, ox1)) in x_spans.iter().enumerate() {
                    if ox0 >= ox1 {
                        continue;
                    }
                    let row = (c * k + ky) * k + kx;
                    for oy in oy0..oy1 {
                        let iy = oy * self.stride + ky - self.padding;
                        let ix = ox0 * self.stride + kx - self.padding;
                        f(row * cols + oy * self.out_w + ox0, (c * self.height + iy) * self.width + ix, ox1 - ox0);
                    }
                }
            }
        }
    }

    fn im2col<T: Element>(&self, image: &[T], cols: &mut [T]) {
        cols.fill(T::zero());
        let s = self.stride;
        self.for_each_run(|ci, ii, len| {
            let dst = &mut cols[ci..ci + len];
            if s == 1 {
                dst.copy_from_slice(&image[ii..ii + len]);
            } else {
                dst.iter_mut().zip(image[ii..].iter().step_by(s)).for_each(|(d, &v)| *d = v);
            }
        });
    }

    /// Scatter-adds columns back into an image buffer.
    fn col2im<T: Element>(&self, cols: &[T], image: &mut [T]) {
        let s = self.stride;
        self.for_each_run(|ci, ii, len| {
            let src = &cols[ci..ci + len];
            if s == 1 {
                image[ii..ii + len].iter_mut().zip(src).for_each(|(d, &v)| *d += v);
            } else {
                image[ii..].iter_mut().step_by(s).zip(src).for_each(|(d, &v)| *d += v);
            }
        });
    }
}

fn check_rank4<T: Element>(op: &'static str, t: &Tensor<T>) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::shape(op, format!("expected rank-4, got {:?}", t.shape()))),
    }
}

fn check_bias<T: Element>(op: &'static str, bias: Option<&Tensor<T>>, channels: usize) -> Result<()> {
    match bias {
        Some(b) if b.shape() != [channels] => Err(Error::shape(
            op,
            format!("bias {:?} for {channels} channels", b.shape()),
        )),
        _ => Ok(()),
    }
}

fn bias_grad<T: Element>(g: &[T], batch: usize, channels: usize, plane: usize) -> Vec<T> {
    let mut gb = vec![T::zero(); channels];
    for n in 0..batch {
        for (c, acc) in gb.iter_mut().enumerate() {
            let base = (n * channels + c) * plane;
            *acc += g[base..base + plane].iter().copied().sum::<T>();
        }
    }
    gb
}

impl<T: Element> Tensor<T> {
    /// Grouped cross-correlation. `self` is `[B, C_in, H, W]`, `weight` is
    /// `[C_out, C_in / groups, K, K]`.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Tensor<T>> {
        let [batch, c_in, h, w] = check_rank4("conv2d", self)?;
        let [c_out, c_in_g, kh, kw] = check_rank4("conv2d", weight)?;
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 || c_in_g * groups != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {c_in}, weight {:?}, groups {groups}", weight.shape()),
            ));
        }
        if kh != kw {
            return Err(Error::shape("conv2d", "only square kernels are supported"));
        }
        check_bias("conv2d", bias, c_out)?;
        let (Some(out_h), Some(out_w)) = (
            conv_output_size(h, kh, stride, padding),
            conv_output_size(w, kw, stride, padding),
        ) else {
            return Err(Error::shape("conv2d", format!("kernel {kh} does not fit {h}x{w} with padding {padding}")));
        };
        let geo = Geometry {
            channels: c_in,
            height: h,
            width: w,
            kernel: kh,
            stride,
            padding,
            out_h,
            out_w,
        };
        let c_out_g = c_out / groups;
        let kk_g = c_in_g * kh * kw;
        let plane_out = out_h * out_w;
        let plane_in = c_in * h * w;
        let (x, wt) = (self.shared_data(), weight.shared_data());
        let mut out = vec![T::zero(); batch * c_out * plane_out];
        let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); geo.col_rows() * plane_out] };
        for n in 0..batch {
            let image = &x[n * plane_in..(n + 1) * plane_in];
            let cols_ref: &[T] = if geo.is_pointwise() {
                image
            } else {
                geo.im2col(image, &mut cols);
                &cols
            };
            let out_n = &mut out[n * c_out * plane_out..(n + 1) * c_out * plane_out];
            if let Some(b) = bias {
                for (c, plane) in out_n.chunks_exact_mut(plane_out).enumerate() {
                    plane.iter_mut().for_each(|v| *v = b.data()[c]);
                }
            }
            let beta = if bias.is_some() { T::one() } else { T::zero() };
            for g in 0..groups {
                let wg = MatRef::new(&wt[g * c_out_g * kk_g..(g + 1) * c_out_g * kk_g], c_out_g, kk_g);
                let cg = MatRef::new(&cols_ref[g * kk_g * plane_out..(g + 1) * kk_g * plane_out], kk_g, plane_out);
                gemm(wg, cg, beta, &mut out_n[g * c_out_g * plane_out..(g + 1) * c_out_g * plane_out]);
            }
        }
        let zero_bias;
        let bias_ref = match bias {
            Some(b) => b,
            None => {
                zero_bias = Tensor::zeros(&[c_out]);
                &zero_bias
            }
        };
        Ok(Tensor::from_op(
            vec![batch, c_out, out_h, out_w],
            out,
            "conv2d",
            &[self, weight, bias_ref],
            move |g, needs| {
                let mut gx = needs[0].then(|| vec![T::zero(); batch * plane_in]);
                let mut gw = needs[1].then(|| vec![T::zero(); wt.len()]);
                let mut cols = vec![T::zero(); geo.col_rows() * plane_out];
                let mut dcols = vec![T::zero(); geo.col_rows() * plane_out];
                for n in 0..batch {
                    let image = &x[n * plane_in..(n + 1) * plane_in];
                    let g_n = &g[n * c_out * plane_out..(n + 1) * c_out * plane_out];
                    if let Some(gw) = gw.as_mut() {
                        let cols_ref: &[T] = if geo.is_pointwise() {
                            image
                        } else {
                            geo.im2col(image, &mut cols);
                            &cols
                        };
                        for grp in 0..groups {
                            let dy = MatRef::new(&g_n[grp * c_out_g * plane_out..][..c_out_g * plane_out], c_out_g, plane_out);
                            let cg = MatRef::new(&cols_ref[grp * kk_g * plane_out..][..kk_g * plane_out], kk_g, plane_out);
                            gemm(dy, cg.t(), T::one(), &mut gw[grp * c_out_g * kk_g..][..c_out_g * kk_g]);
                        }
                    }
                    if let Some(gx) = gx.as_mut() {
                        for grp in 0..groups {
                            let dy = MatRef::new(&g_n[grp * c_out_g * plane_out..][..c_out_g * plane_out], c_out_g, plane_out);
                            let wg = MatRef::new(&wt[grp * c_out_g * kk_g..][..c_out_g * kk_g], c_out_g, kk_g);
                            gemm(wg.t(), dy, T::zero(), &mut dcols[grp * kk_g * plane_out..][..kk_g * plane_out]);
                        }
                        let gx_n = &mut gx[n * plane_in..(n + 1) * plane_in];
                        if geo.is_pointwise() {
                            gx_n.copy_from_slice(&dcols);
                        } else {
                            geo.col2im(&dcols, gx_n);
                        }
                    }
                }
                let gb = needs[2].then(|| bias_grad(g, batch, c_out, plane_out));
                vec![gx, gw, gb]
            },
        ))
    }

    /// Transposed convolution (fractionally strided). `self` is
    /// `[B, C_in, H, W]`, `weight` is `[C_in, C_out, K, K]`.
    pub fn conv_transpose2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<T>> {
        let [batch, c_in, h, w] = check_rank4("conv_transpose2d", self)?;
        let [wc_in, c_out, kh, kw] = check_rank4("conv_transpose2d", weight)?;
        if wc_in != c_in || kh != kw || stride == 0 {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("input {:?} with weight {:?}", self.shape(), weight.shape()),
            ));
        }
        check_bias("conv_transpose2d", bias, c_out)?;
        let (Some(out_h), Some(out_w)) = (
            conv_transpose_output_size(h, kh, stride, padding),
            conv_transpose_output_size(w, kw, stride, padding),
        ) else {
            return Err(Error::shape("conv_transpose2d", "output would be empty"));
        };
        // The forward pass of a transposed conv is the input-gradient of a
        // conv from the output geometry back to the input geometry.
        let geo = Geometry {
            channels: c_out,
            height: out_h,
            width: out_w,
            kernel: kh,
            stride,
            padding,
            out_h: h,
            out_w: w,
        };
        let plane_in = c_in * h * w;
        let plane_out = out_h * out_w;
        let rows = geo.col_rows();
        let (x, wt) = (self.shared_data(), weight.shared_data());
        let mut out = vec![T::zero(); batch * c_out * plane_out];
        let mut cols = vec![T::zero(); rows * h * w];
        for n in 0..batch {
            let xn = MatRef::new(&x[n * plane_in..(n + 1) * plane_in], c_in, h * w);
            gemm(MatRef::new(&wt, c_in, rows).t(), xn, T::zero(), &mut cols);
            let out_n = &mut out[n * c_out * plane_out..(n + 1) * c_out * plane_out];
            geo.col2im(&cols, out_n);
            if let Some(b) = bias {
                for (c, plane) in out_n.chunks_exact_mut(plane_out).enumerate() {
                    plane.iter_mut().for_each(|v| *v += b.data()[c]);
                }
            }
        }
        let zero_bias;
        let bias_ref = match bias {
            Some(b) => b,
            None => {
                zero_bias = Tensor::zeros(&[c_out]);
                &zero_bias
            }
        };
        Ok(Tensor::from_op(
            vec![batch, c_out, out_h, out_w],
            out,
            "conv_transpose2d",
            &[self, weight, bias_ref],
            move |g, needs| {
                let mut gx = needs[0].then(|| vec![T::zero(); batch * plane_in]);
                let mut gw = needs[1].then(|| vec![T::zero(); wt.len()]);
                let mut gcols = vec![T::zero(); rows * h * w];
                for n in 0..batch {
                    geo.im2col(&g[n * c_out * plane_out..(n + 1) * c_out * plane_out], &mut gcols);
                    let gc = MatRef::new(&gcols, rows, h * w);
                    if let Some(gx) = gx.as_mut() {
                        gemm(MatRef::new(&wt, c_in, rows), gc, T::zero(), &mut gx[n * plane_in..(n + 1) * plane_in]);
                    }
                    if let Some(gw) = gw.as_mut() {
                        let xn = MatRef::new(&x[n * plane_in..(n + 1) * plane_in], c_in, h * w);
                        gemm(xn, gc.t(), T::one(), gw);
                    }
                }
                let gb = needs[2].then(|| bias_grad(g, batch, c_out, plane_out));
                vec![gx, gw, gb]
            },
        ))
    }
}
