//! 2-D cross-correlation (no kernel flip) via im2col, forward and backward.
//!
//! Weight layout is `c_out x c_in x k x k`; the im2col row index is
//! `(ci * k + ky) * k + kx`, so the flattened weight is directly the
//! `c_out x (c_in k k)` GEMM operand.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    /// Output columns `lo..hi` whose tap `kx` lands inside the input row.
    fn valid_ox(&self, kx: usize) -> (usize, usize) {
        let lo = if self.pad > kx { (self.pad - kx).div_ceil(self.stride) } else { 0 };
        let hi = if self.w + self.pad > kx {
            ((self.w - 1 + self.pad - kx) / self.stride + 1).min(self.out_w())
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (c_in, h, w) = match input {
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::dim(format!("conv input must be c x h x w, got {s:?}"))),
        };
        let (c_out, wc, kh, kw) = match weight {
            [o, i, kh, kw] => (*o, *i, *kh, *kw),
            s => return Err(Error::dim(format!("conv weight must be 4-D, got {s:?}"))),
        };
        if wc != c_in {
            return Err(Error::dim(format!(
                "weight expects {wc} input channels, input has {c_in}"
            )));
        }
        if kh != kw {
            return Err(Error::dim("only square kernels are supported"));
        }
        let g = Self {
            c_in,
            h,
            w,
            c_out,
            k: kh,
            stride,
            pad,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::dim("stride must be >= 1"));
        }
        if self.k == 0 || self.k > self.h + 2 * self.pad || self.k > self.w + 2 * self.pad {
            return Err(Error::dim(format!(
                "kernel {} larger than padded input {}x{} (pad {})",
                self.k, self.h, self.w, self.pad
            )));
        }
        Ok(())
    }

    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h() * self.out_w()
    }

    pub fn input_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    pub fn output_len(&self) -> usize {
        self.c_out * self.out_pixels()
    }
}

/// Fills `cols` (`patch_len x out_pixels`, row-major) from one sample.
fn im2col<T: Scalar>(g: &ConvGeometry, input: &[T], pad_value: T, cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for ci in 0..g.c_in {
        let plane = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = g.valid_ox(kx);
                for oy in 0..oh {
                    let out = &mut dst[oy * ow..(oy + 1) * ow];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h || lo >= hi {
                        out.fill(pad_value);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out[..lo].fill(pad_value);
                    out[hi..].fill(pad_value);
                    let ix0 = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        out[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                    } else {
                        for (o, x) in out[lo..hi].iter_mut().zip(src[ix0..].iter().step_by(g.stride)) {
                            *o = *x;
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `cols` back into an input-shaped gradient; padded taps are dropped.
fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T], grad_input: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for ci in 0..g.c_in {
        let plane = &mut grad_input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = g.valid_ox(kx);
                if lo >= hi {
                    continue;
                }
                let ix0 = lo * g.stride + kx - g.pad;
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w + ix0..(iy as usize + 1) * g.w];
                    for (d, v) in dst.iter_mut().step_by(g.stride).zip(&src[oy * ow + lo..oy * ow + hi]) {
                        *d += *v;
                    }
                }
            }
        }
    }
}

fn forward_sample<T: Scalar>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    pad_value: T,
    cols: &mut [T],
    out: &mut [T],
) {
    im2col(g, input, pad_value, cols);
    let (m, kk, n) = (g.c_out, g.patch_len(), g.out_pixels());
    T::gemm(
        m,
        kk,
        n,
        T::one(),
        weight,
        kk as isize,
        1,
        cols,
        n as isize,
        1,
        T::zero(),
        out,
        n as isize,
        1,
    );
}

/// Single-sample convolution: `c_in x h x w` input, zero padding.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    conv2d_forward_padded(input, weight, stride, pad, T::zero())
}

/// Single-sample convolution with an explicit padding value.
pub fn conv2d_forward_padded<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
    pad_value: T,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, pad)?;
    let mut cols = vec![T::zero(); g.patch_len() * g.out_pixels()];
    let mut out = Tensor::zeros(&[g.c_out, g.out_h(), g.out_w()]);
    forward_sample(&g, input.data(), weight.data(), pad_value, &mut cols, out.data_mut());
    Ok(out)
}

/// Gradients of the single-sample, zero-padded forward map.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, pad)?;
    if grad_out.shape() != [g.c_out, g.out_h(), g.out_w()] {
        return Err(Error::dim(format!(
            "grad_out shape {:?} does not match conv output {:?}",
            grad_out.shape(),
            [g.c_out, g.out_h(), g.out_w()]
        )));
    }
    let batched_in = input.reshape(&[1, g.c_in, g.h, g.w])?;
    let batched_go = grad_out.reshape(&[1, g.c_out, g.out_h(), g.out_w()])?;
    let (gi, gw) = conv2d_batch_backward(&batched_in, weight, &batched_go, stride, pad, T::zero(), true)?;
    let gi = gi.expect("requested").into_reshape(input.shape())?;
    Ok((gi, gw))
}

fn batch_geometry<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(usize, ConvGeometry)> {
    match input.shape() {
        [b, rest @ ..] => Ok((*b, ConvGeometry::new(rest, weight.shape(), stride, pad)?)),
        [] => Err(Error::dim("empty input shape")),
    }
}

/// Batched forward over `b x c_in x h x w`.
pub fn conv2d_batch_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
    pad_value: T,
) -> Result<Tensor<T>> {
    let (b, g) = batch_geometry(input, weight, stride, pad)?;
    let mut cols = vec![T::zero(); g.patch_len() * g.out_pixels()];
    let mut out = Tensor::zeros(&[b, g.c_out, g.out_h(), g.out_w()]);
    let (il, ol) = (g.input_len(), g.output_len());
    for s in 0..b {
        forward_sample(
            &g,
            &input.data()[s * il..(s + 1) * il],
            weight.data(),
            pad_value,
            &mut cols,
            &mut out.data_mut()[s * ol..(s + 1) * ol],
        );
    }
    Ok(out)
}

/// Batched backward. Returns `(grad_input, grad_weight)`; the input gradient
/// is skipped unless requested.
pub fn conv2d_batch_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    pad_value: T,
    want_grad_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>)> {
    let (b, g) = batch_geometry(input, weight, stride, pad)?;
    if grad_out.shape() != [b, g.c_out, g.out_h(), g.out_w()] {
        return Err(Error::dim(format!(
            "grad_out shape {:?} does not match conv output",
            grad_out.shape()
        )));
    }
    let (kk, p) = (g.patch_len(), g.out_pixels());
    let mut cols = vec![T::zero(); kk * p];
    let mut gcols = vec![T::zero(); kk * p];
    let mut grad_w = Tensor::zeros(weight.shape());
    let mut grad_in = want_grad_input.then(|| Tensor::zeros(input.shape()));
    let (il, ol) = (g.input_len(), g.output_len());
    for s in 0..b {
        let go = &grad_out.data()[s * ol..(s + 1) * ol];
        im2col(&g, &input.data()[s * il..(s + 1) * il], pad_value, &mut cols);
        // grad_w += go (c_out x p) * colsᵀ (p x kk)
        T::gemm(
            g.c_out,
            p,
            kk,
            T::one(),
            go,
            p as isize,
            1,
            &cols,
            1,
            p as isize,
            T::one(),
            grad_w.data_mut(),
            kk as isize,
            1,
        );
        if let Some(gi) = grad_in.as_mut() {
            // gcols = Wᵀ (kk x c_out) * go (c_out x p)
            T::gemm(
                kk,
                g.c_out,
                p,
                T::one(),
                weight.data(),
                1,
                kk as isize,
                go,
                p as isize,
                1,
                T::zero(),
                &mut gcols,
                p as isize,
                1,
            );
            col2im(&g, &gcols, &mut gi.data_mut()[s * il..(s + 1) * il]);
        }
    }
    Ok((grad_in, grad_w))
}
