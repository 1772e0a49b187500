//! Raw forward/backward kernels for the convolution family.
//!
//! Convolutions lower to `im2col` + GEMM per sample. Column rows are
//! ordered `(channel, ky, kx)`, matching the flattened kernel layout.

use super::scalar::gemm;
use super::{Scalar, Tensor};
use crate::error::{shape_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// Geometry of a cross-correlation over a `channels × height × width`
    /// image.
    pub fn new(
        op: &'static str,
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if stride == 0 || kernel == 0 {
            return shape_err(op, "kernel size and stride must be positive");
        }
        let (ph, pw) = (height + 2 * padding, width + 2 * padding);
        if kernel > ph || kernel > pw {
            return shape_err(
                op,
                format!("kernel {kernel} exceeds padded input {ph}×{pw}"),
            );
        }
        Ok(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            padding,
            out_h: (ph - kernel) / stride + 1,
            out_w: (pw - kernel) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source coordinate along one axis, or `None` inside the padding.
    #[inline]
    fn source(&self, out: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (out * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

pub(crate) fn im2col<T: Scalar>(g: &ConvGeometry, image: &[T], cols: &mut [T]) {
    let (k, ow, plane) = (g.kernel, g.out_w, g.col_cols());
    for c in 0..g.channels {
        let img = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * plane;
                let dst = &mut cols[row..row + plane];
                for oy in 0..g.out_h {
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    match g.source(oy, ky, g.height) {
                        None => line.fill(T::zero()),
                        Some(iy) => {
                            let src = &img[iy * g.width..(iy + 1) * g.width];
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match g.source(ox, kx, g.width) {
                                    Some(ix) => src[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image.
pub(crate) fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T], image: &mut [T]) {
    let (k, ow, plane) = (g.kernel, g.out_w, g.col_cols());
    for c in 0..g.channels {
        let img = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * plane;
                let src = &cols[row..row + plane];
                for oy in 0..g.out_h {
                    let Some(iy) = g.source(oy, ky, g.height) else {
                        continue;
                    };
                    let dst = &mut img[iy * g.width..(iy + 1) * g.width];
                    for (ox, &v) in src[oy * ow..(oy + 1) * ow].iter().enumerate() {
                        if let Some(ix) = g.source(ox, kx, g.width) {
                            dst[ix] = dst[ix] + v;
                        }
                    }
                }
            }
        }
    }
}

/// Validated shapes for `conv2d(input[N,Cin,H,W], kernel[Cout,Cin,k,k])`.
pub(crate) fn conv2d_geometry<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, ConvGeometry)> {
    let (n, cin, h, w) = input.nchw("conv2d(input)")?;
    let (cout, kcin, kh, kw) = kernel.nchw("conv2d(kernel)")?;
    if kh != kw {
        return shape_err("conv2d(kernel)", format!("kernel must be square, got {kh}×{kw}"));
    }
    if kcin != cin {
        return shape_err(
            "conv2d(kernel)",
            format!("kernel expects {kcin} input channels, input has {cin}"),
        );
    }
    Ok((n, cout, ConvGeometry::new("conv2d", cin, h, w, kh, stride, padding)?))
}

pub(crate) fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (n, cout, g) = conv2d_geometry(input, kernel, stride, padding)?;
    let (rows, plane) = (g.col_rows(), g.col_cols());
    let in_per = g.channels * g.height * g.width;
    let mut cols = vec![T::zero(); rows * plane];
    let mut out = vec![T::zero(); n * cout * plane];
    for s in 0..n {
        im2col(&g, &input.data()[s * in_per..(s + 1) * in_per], &mut cols);
        gemm(
            cout,
            rows,
            plane,
            kernel.data(),
            false,
            &cols,
            false,
            &mut out[s * cout * plane..(s + 1) * cout * plane],
            false,
        );
    }
    Tensor::new([n, cout, g.out_h, g.out_w], out)
}

/// Gradients `(d_input, d_kernel)` of conv2d given the output gradient;
/// either side is skipped when not requested.
pub(crate) fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
    grad_out: &Tensor<T>,
    want: (bool, bool),
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let (n, cout, g) = conv2d_geometry(input, kernel, stride, padding)?;
    let (rows, plane) = (g.col_rows(), g.col_cols());
    let in_per = g.channels * g.height * g.width;
    let mut cols = vec![T::zero(); if want.1 { rows * plane } else { 0 }];
    let mut dcols = vec![T::zero(); if want.0 { rows * plane } else { 0 }];
    let mut d_input = vec![T::zero(); if want.0 { input.numel() } else { 0 }];
    let mut d_kernel = vec![T::zero(); if want.1 { kernel.numel() } else { 0 }];
    for s in 0..n {
        let go = &grad_out.data()[s * cout * plane..(s + 1) * cout * plane];
        if want.1 {
            im2col(&g, &input.data()[s * in_per..(s + 1) * in_per], &mut cols);
            // dK[cout, rows] += dOut[cout, plane] · colsᵀ
            gemm(cout, plane, rows, go, false, &cols, true, &mut d_kernel, true);
        }
        if want.0 {
            // dcols[rows, plane] = Kᵀ · dOut
            gemm(rows, cout, plane, kernel.data(), true, go, false, &mut dcols, false);
            col2im(&g, &dcols, &mut d_input[s * in_per..(s + 1) * in_per]);
        }
    }
    Ok((
        want.0
            .then(|| Tensor::new(input.dims().to_vec(), d_input))
            .transpose()?,
        want.1
            .then(|| Tensor::new(kernel.dims().to_vec(), d_kernel))
            .transpose()?,
    ))
}

/// Output geometry of `conv2d_transpose(input[N,Cin,H,W], kernel[Cin,Cout,k,k])`,
/// expressed as the conv2d geometry over the *output* image whose columns
/// line up with input pixels.
pub(crate) fn conv_transpose_geometry<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, ConvGeometry)> {
    let (n, cin, h, w) = input.nchw("conv2d_transpose(input)")?;
    let (kcin, cout, kh, kw) = kernel.nchw("conv2d_transpose(kernel)")?;
    if kh != kw {
        return shape_err(
            "conv2d_transpose(kernel)",
            format!("kernel must be square, got {kh}×{kw}"),
        );
    }
    if kcin != cin {
        return shape_err(
            "conv2d_transpose(kernel)",
            format!("kernel expects {kcin} input channels, input has {cin}"),
        );
    }
    if stride == 0 {
        return shape_err("conv2d_transpose", "stride must be positive");
    }
    let span = |extent: usize| (extent - 1) * stride + kh;
    let (sh, sw) = (span(h), span(w));
    if sh <= 2 * padding || sw <= 2 * padding {
        return shape_err(
            "conv2d_transpose",
            format!("padding {padding} leaves an empty output"),
        );
    }
    let g = ConvGeometry::new(
        "conv2d_transpose",
        cout,
        sh - 2 * padding,
        sw - 2 * padding,
        kh,
        stride,
        padding,
    )?;
    debug_assert_eq!((g.out_h, g.out_w), (h, w));
    Ok((n, cin, g))
}

pub(crate) fn conv_transpose_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (n, cin, g) = conv_transpose_geometry(input, kernel, stride, padding)?;
    let (rows, plane) = (g.col_rows(), g.col_cols());
    let out_per = g.channels * g.height * g.width;
    let mut cols = vec![T::zero(); rows * plane];
    let mut out = vec![T::zero(); n * out_per];
    for s in 0..n {
        let x = &input.data()[s * cin * plane..(s + 1) * cin * plane];
        // cols[rows, plane] = Kᵀ[rows, cin] · x[cin, plane]
        gemm(rows, cin, plane, kernel.data(), true, x, false, &mut cols, false);
        col2im(&g, &cols, &mut out[s * out_per..(s + 1) * out_per]);
    }
    Tensor::new([n, g.channels, g.height, g.width], out)
}

pub(crate) fn conv_transpose_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
    grad_out: &Tensor<T>,
    want: (bool, bool),
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let (n, cin, g) = conv_transpose_geometry(input, kernel, stride, padding)?;
    let (rows, plane) = (g.col_rows(), g.col_cols());
    let out_per = g.channels * g.height * g.width;
    let mut dcols = vec![T::zero(); rows * plane];
    let mut d_input = vec![T::zero(); if want.0 { input.numel() } else { 0 }];
    let mut d_kernel = vec![T::zero(); if want.1 { kernel.numel() } else { 0 }];
    for s in 0..n {
        im2col(&g, &grad_out.data()[s * out_per..(s + 1) * out_per], &mut dcols);
        if want.0 {
            // dx[cin, plane] = K[cin, rows] · dcols[rows, plane]
            gemm(
                cin,
                rows,
                plane,
                kernel.data(),
                false,
                &dcols,
                false,
                &mut d_input[s * cin * plane..(s + 1) * cin * plane],
                false,
            );
        }
        if want.1 {
            // dK[cin, rows] += x[cin, plane] · dcolsᵀ
            let x = &input.data()[s * cin * plane..(s + 1) * cin * plane];
            gemm(cin, plane, rows, x, false, &dcols, true, &mut d_kernel, true);
        }
    }
    Ok((
        want.0
            .then(|| Tensor::new(input.dims().to_vec(), d_input))
            .transpose()?,
        want.1
            .then(|| Tensor::new(kernel.dims().to_vec(), d_kernel))
            .transpose()?,
    ))
}
