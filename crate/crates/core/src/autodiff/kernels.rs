//! Dense kernels behind the taped ops.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major matrix view with explicit strides.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn max_offset(&self) -> isize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        (self.rows as isize - 1) * self.row_stride + (self.cols as isize - 1) * self.col_stride
    }
}

/// `out[m, n] = beta * out + a[m, k] * b[k, n]`, `out` row-major contiguous.
pub(crate) fn gemm(a: Mat<'_>, b: Mat<'_>, beta: f64, out: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(out.len() >= m * n);
    assert!((a.max_offset() as usize) < a.data.len().max(1));
    assert!((b.max_offset() as usize) < b.data.len().max(1));
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut out[..m * n] {
            *v *= beta;
        }
        return;
    }
    // SAFETY: bounds of every operand were checked against the strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 || weight.len() != 4 || input[1] != weight[1] {
            return Err(Error::shape("conv2d", input, weight));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let (n, cin, h, w) = (input[0], input[1], input[2], input[3]);
        let (cout, kh, kw) = (weight[0], weight[2], weight[3]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape("conv2d", input, weight));
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            padding,
            ho,
            wo,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.cout, self.ho, self.wo]
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.ho * self.wo
    }

    /// Unfold one image into `[cin*kh*kw, ho*wo]`.
    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let p = self.pixels();
        for c in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &x[(c * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], dx: &mut [f64]) {
        let p = self.pixels();
        for c in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &col[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut dx[(c * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    g: &ConvGeom,
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
) -> Tensor {
    let (patch, p) = (g.patch(), g.pixels());
    let mut out = vec![0.0; g.n * g.cout * p];
    let mut col = vec![0.0; patch * p];
    let in_len = g.cin * g.h * g.w;
    for n in 0..g.n {
        g.im2col(&x.data()[n * in_len..(n + 1) * in_len], &mut col);
        let dst = &mut out[n * g.cout * p..(n + 1) * g.cout * p];
        gemm(
            Mat::new(w.data(), g.cout, patch),
            Mat::new(&col, patch, p),
            0.0,
            dst,
        );
        if let Some(b) = bias {
            for (co, bv) in b.data().iter().enumerate() {
                for v in &mut dst[co * p..(co + 1) * p] {
                    *v += bv;
                }
            }
        }
    }
    Tensor::new(g.out_shape(), out).expect("conv output shape")
}

/// Gradients of a convolution w.r.t. input and weight.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &Tensor,
    w: &Tensor,
    grad_out: &[f64],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (patch, p) = (g.patch(), g.pixels());
    let in_len = g.cin * g.h * g.w;
    let mut dx = want_dx.then(|| vec![0.0; g.n * in_len]);
    let mut dw = want_dw.then(|| vec![0.0; g.cout * patch]);
    let mut col = vec![0.0; patch * p];
    for n in 0..g.n {
        let go = &grad_out[n * g.cout * p..(n + 1) * g.cout * p];
        if let Some(dw) = dw.as_mut() {
            g.im2col(&x.data()[n * in_len..(n + 1) * in_len], &mut col);
            gemm(
                Mat::new(go, g.cout, p),
                Mat::new(&col, patch, p).t(),
                1.0,
                dw,
            );
        }
        if let Some(dx) = dx.as_mut() {
            gemm(
                Mat::new(w.data(), g.cout, patch).t(),
                Mat::new(go, g.cout, p),
                0.0,
                &mut col,
            );
            g.col2im(&col, &mut dx[n * in_len..(n + 1) * in_len]);
        }
    }
    (dx, dw)
}
