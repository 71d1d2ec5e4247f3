//! Hand-differentiated building blocks shared by the encoder and decoder.
//!
//! Feature maps are stored channel-last and flattened to `(n·H·W, C)` row
//! matrices so that convolutions reduce to a patch gather plus one GEMM.

mod conv;
mod optim;

pub use conv::{col2im, conv2d_backward, conv2d_forward, conv_transpose2d_backward,
    conv_transpose2d_forward, im2col, ConvGeometry};
pub use optim::{cosine_lr, AdamW, AdamState};

use ndarray::{Array1, Array2, ArrayView2, Axis};

/// `tanh` applied in place.
pub fn tanh_inplace(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.tanh());
}

/// Given `y = tanh(x)` and `dL/dy`, overwrites `grad` with `dL/dx`.
pub fn tanh_backward(y: &[f64], grad: &mut [f64]) {
    for (g, &t) in grad.iter_mut().zip(y) {
        *g *= 1.0 - t * t;
    }
}

/// SiLU (`x · σ(x)`) applied in place.
pub fn silu_inplace(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v *= sigmoid(*v));
}

/// Given pre-activation `x` and `dL/dy`, overwrites `grad` with `dL/dx`.
pub fn silu_backward(x: &[f64], grad: &mut [f64]) {
    for (g, &v) in grad.iter_mut().zip(x) {
        let s = sigmoid(v);
        *g *= s * (1.0 + v * (1.0 - s));
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `x · W + b` for `x: (n, in)`, `W: (in, out)`.
pub fn linear_forward(x: ArrayView2<f64>, w: ArrayView2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut y = x.dot(&w);
    y += b;
    y
}

/// Returns `(dW, db, dx)`; `dx` is skipped when `need_dx` is false.
pub fn linear_backward(
    x: ArrayView2<f64>,
    w: ArrayView2<f64>,
    dy: ArrayView2<f64>,
    need_dx: bool,
) -> (Array2<f64>, Array1<f64>, Option<Array2<f64>>) {
    let dw = x.t().dot(&dy);
    let db = dy.sum_axis(Axis(0));
    let dx = need_dx.then(|| dy.dot(&w.t()));
    (dw, db, dx)
}
