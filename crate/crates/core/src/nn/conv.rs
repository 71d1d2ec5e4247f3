use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spatial bookkeeping for a square-kernel convolution from an
/// `in_h × in_w` map to an `out_h × out_w` map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(in_h: usize, in_w: usize, kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::Config("kernel and stride must be positive".into()));
        }
        if in_h + 2 * pad < kernel || in_w + 2 * pad < kernel {
            return Err(Error::Config(format!(
                "kernel {kernel} larger than padded input {in_h}x{in_w} (pad {pad})"
            )));
        }
        Ok(Self {
            in_h,
            in_w,
            kernel,
            stride,
            pad,
            out_h: (in_h + 2 * pad - kernel) / stride + 1,
            out_w: (in_w + 2 * pad - kernel) / stride + 1,
        })
    }

    pub fn patch_len(&self, channels: usize) -> usize {
        self.kernel * self.kernel * channels
    }

    pub fn out_positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_positions(&self) -> usize {
        self.in_h * self.in_w
    }

    /// Calls `f(out_row_offset, in_offset)` for every (output position,
    /// kernel tap) pair that lands inside the input. Offsets are in units
    /// of `channels`.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let k = self.kernel;
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let row = oy * self.out_w + ox;
                for ky in 0..k {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.in_h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= self.in_w as isize {
                            continue;
                        }
                        f(row, ky * k + kx, iy as usize * self.in_w + ix as usize);
                    }
                }
            }
        }
    }
}

/// Gathers patches of `input` (`n·in_h·in_w × channels`, row-major) into a
/// `(n·out_h·out_w, k·k·channels)` matrix. Padding reads as zero.
pub fn im2col(input: &[f64], n: usize, channels: usize, geo: &ConvGeometry) -> Array2<f64> {
    let rows = geo.out_positions();
    let cols_len = geo.patch_len(channels);
    let img_len = geo.in_positions() * channels;
    debug_assert_eq!(input.len(), n * img_len);
    let mut cols = Array2::<f64>::zeros((n * rows, cols_len));
    let out = cols.as_slice_mut().unwrap();
    for b in 0..n {
        let src = &input[b * img_len..(b + 1) * img_len];
        let dst = &mut out[b * rows * cols_len..(b + 1) * rows * cols_len];
        geo.for_each_tap(|row, tap, pos| {
            let d = row * cols_len + tap * channels;
            let s = pos * channels;
            dst[d..d + channels].copy_from_slice(&src[s..s + channels]);
        });
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch rows back onto the input grid.
pub fn col2im(cols: ArrayView2<f64>, n: usize, channels: usize, geo: &ConvGeometry) -> Vec<f64> {
    let rows = geo.out_positions();
    let cols_len = geo.patch_len(channels);
    let img_len = geo.in_positions() * channels;
    debug_assert_eq!(cols.dim(), (n * rows, cols_len));
    let cols = cols.as_standard_layout();
    let src_all = cols.as_slice().unwrap();
    let mut out = vec![0.0; n * img_len];
    for b in 0..n {
        let src = &src_all[b * rows * cols_len..(b + 1) * rows * cols_len];
        let dst = &mut out[b * img_len..(b + 1) * img_len];
        geo.for_each_tap(|row, tap, pos| {
            let s = row * cols_len + tap * channels;
            let d = pos * channels;
            for (o, v) in dst[d..d + channels].iter_mut().zip(&src[s..s + channels]) {
                *o += v;
            }
        });
    }
    out
}

/// Strided convolution. `input` is `(n·in_h·in_w, c_in)`, `weight` is
/// `(k·k·c_in, c_out)`. Returns the output `(n·out_h·out_w, c_out)` and the
/// patch matrix needed by the backward pass.
pub fn conv2d_forward(
    input: &[f64],
    n: usize,
    c_in: usize,
    weight: ArrayView2<f64>,
    bias: &Array1<f64>,
    geo: &ConvGeometry,
) -> (Array2<f64>, Array2<f64>) {
    let cols = im2col(input, n, c_in, geo);
    let mut out = cols.dot(&weight);
    out += bias;
    (out, cols)
}

/// Returns `(dW, db, dInput)` for [`conv2d_forward`]; `dW`/`db` are skipped
/// when `need_params` is false (frozen layers).
pub fn conv2d_backward(
    grad_out: ArrayView2<f64>,
    cols: ArrayView2<f64>,
    weight: ArrayView2<f64>,
    n: usize,
    c_in: usize,
    geo: &ConvGeometry,
    need_params: bool,
) -> (Option<(Array2<f64>, Array1<f64>)>, Vec<f64>) {
    let params = need_params.then(|| (cols.t().dot(&grad_out), grad_out.sum_axis(Axis(0))));
    let dcols = grad_out.dot(&weight.t());
    (params, col2im(dcols.view(), n, c_in, geo))
}

/// Transposed convolution, the adjoint of a [`conv2d_forward`] whose geometry
/// maps the large output map onto the small input map. `input` is
/// `(n·geo.out_h·geo.out_w, c_in)`, `weight` is `(c_in, k·k·c_out)`; the
/// result is `(n·geo.in_h·geo.in_w, c_out)`.
pub fn conv_transpose2d_forward(
    input: ArrayView2<f64>,
    n: usize,
    c_out: usize,
    weight: ArrayView2<f64>,
    bias: &Array1<f64>,
    geo: &ConvGeometry,
) -> Array2<f64> {
    let cols = input.dot(&weight);
    let flat = col2im(cols.view(), n, c_out, geo);
    let mut out = Array2::from_shape_vec((n * geo.in_positions(), c_out), flat)
        .expect("col2im length matches geometry");
    out += bias;
    out
}

/// Returns `(dW, db, dInput)` for [`conv_transpose2d_forward`].
pub fn conv_transpose2d_backward(
    grad_out: ArrayView2<f64>,
    input: ArrayView2<f64>,
    weight: ArrayView2<f64>,
    n: usize,
    c_out: usize,
    geo: &ConvGeometry,
    need_input: bool,
) -> (Array2<f64>, Array1<f64>, Option<Array2<f64>>) {
    let go = grad_out.as_standard_layout();
    let dcols = im2col(go.as_slice().unwrap(), n, c_out, geo);
    let dw = input.t().dot(&dcols);
    let db = grad_out.sum_axis(Axis(0));
    let dx = need_input.then(|| dcols.dot(&weight.t()));
    (dw, db, dx)
}
