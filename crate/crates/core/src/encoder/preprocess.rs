use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeMode {
    /// Inputs must already have the declared spatial size.
    #[default]
    None,
    /// Half-pixel-centred bilinear interpolation.
    Bilinear,
}

/// Pixel-space recipe applied inside `encode`: optional resize to the
/// declared input size, then per-channel `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    #[serde(default)]
    pub resize: ResizeMode,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Preprocess {
    fn default() -> Self {
        Self {
            resize: ResizeMode::None,
            mean: [0.5; 3],
            std: [0.25; 3],
        }
    }
}

impl Preprocess {
    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config(format!("invalid normalization mean {:?} std {:?}", self.mean, self.std)));
        }
        Ok(())
    }
}

/// One output pixel's four bilinear taps: `(source index, weight)`.
type Taps = [(usize, f64); 4];

/// Precomputed bilinear resampling between two spatial sizes.
#[derive(Debug, Clone)]
pub(crate) struct Bilinear {
    src: (usize, usize),
    dst: (usize, usize),
    taps: Vec<Taps>,
}

impl Bilinear {
    pub(crate) fn new(src: (usize, usize), dst: (usize, usize)) -> Self {
        let axis = |s: usize, d: usize, o: usize| -> (usize, usize, f64) {
            let scale = s as f64 / d as f64;
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(s - 1);
            let hi = (lo + 1).min(s - 1);
            (lo, hi, pos - lo as f64)
        };
        let mut taps = Vec::with_capacity(dst.0 * dst.1);
        for oy in 0..dst.0 {
            let (y0, y1, fy) = axis(src.0, dst.0, oy);
            for ox in 0..dst.1 {
                let (x0, x1, fx) = axis(src.1, dst.1, ox);
                taps.push([
                    (y0 * src.1 + x0, (1.0 - fy) * (1.0 - fx)),
                    (y0 * src.1 + x1, (1.0 - fy) * fx),
                    (y1 * src.1 + x0, fy * (1.0 - fx)),
                    (y1 * src.1 + x1, fy * fx),
                ]);
            }
        }
        Self { src, dst, taps }
    }

    /// Resamples `n` channel-last images of size `src`.
    pub(crate) fn forward(&self, input: &[f64], n: usize) -> Vec<f64> {
        let (src_len, dst_len) = (self.src.0 * self.src.1 * 3, self.dst.0 * self.dst.1 * 3);
        let mut out = vec![0.0; n * dst_len];
        for b in 0..n {
            let src = &input[b * src_len..(b + 1) * src_len];
            let dst = &mut out[b * dst_len..(b + 1) * dst_len];
            for (p, taps) in self.taps.iter().enumerate() {
                for &(s, w) in taps {
                    for c in 0..3 {
                        dst[p * 3 + c] += w * src[s * 3 + c];
                    }
                }
            }
        }
        out
    }

    pub(crate) fn backward(&self, grad: &[f64], n: usize) -> Vec<f64> {
        let (src_len, dst_len) = (self.src.0 * self.src.1 * 3, self.dst.0 * self.dst.1 * 3);
        let mut out = vec![0.0; n * src_len];
        for b in 0..n {
            let g = &grad[b * dst_len..(b + 1) * dst_len];
            let dst = &mut out[b * src_len..(b + 1) * src_len];
            for (p, taps) in self.taps.iter().enumerate() {
                for &(s, w) in taps {
                    for c in 0..3 {
                        dst[s * 3 + c] += w * g[p * 3 + c];
                    }
                }
            }
        }
        out
    }
}

/// Result of preprocessing a batch, kept for the backward pass.
pub(crate) struct Prepared {
    pub data: Vec<f64>,
    pub resample: Option<Bilinear>,
}

impl Preprocess {
    pub(crate) fn apply(&self, images: &Array4<f64>, target: (usize, usize)) -> Result<Prepared> {
        let (n, h, w, _) = images.dim();
        let flat = images.as_standard_layout();
        let flat = flat.as_slice().expect("standard layout");
        let (mut data, resample) = if (h, w) == target {
            (flat.to_vec(), None)
        } else {
            match self.resize {
                ResizeMode::None => {
                    return Err(Error::Dimension(format!(
                        "image size {h}x{w} does not match encoder input {}x{} and no resize is declared",
                        target.0, target.1
                    )))
                }
                ResizeMode::Bilinear => {
                    let r = Bilinear::new((h, w), target);
                    (r.forward(flat, n), Some(r))
                }
            }
        };
        for px in data.chunks_exact_mut(3) {
            for c in 0..3 {
                px[c] = (px[c] - self.mean[c]) / self.std[c];
            }
        }
        Ok(Prepared { data, resample })
    }

    /// Maps a gradient w.r.t. the preprocessed tensor back to raw pixels.
    pub(crate) fn backward(&self, mut grad: Vec<f64>, resample: Option<&Bilinear>, n: usize) -> Vec<f64> {
        for px in grad.chunks_exact_mut(3) {
            for c in 0..3 {
                px[c] /= self.std[c];
            }
        }
        match resample {
            Some(r) => r.backward(&grad, n),
            None => grad,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_preserves_constants_and_identity() {
        let r = Bilinear::new((5, 7), (9, 4));
        let ones = vec![1.0; 5 * 7 * 3];
        assert!(r.forward(&ones, 1).iter().all(|v| (v - 1.0).abs() < 1e-12));

        let id = Bilinear::new((4, 4), (4, 4));
        let x: Vec<f64> = (0..48).map(|i| i as f64).collect();
        assert_eq!(id.forward(&x, 1), x);
    }

    #[test]
    fn bilinear_backward_is_adjoint() {
        let r = Bilinear::new((6, 5), (11, 8));
        let x: Vec<f64> = (0..6 * 5 * 3).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let g: Vec<f64> = (0..11 * 8 * 3).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let lhs: f64 = r.forward(&x, 1).iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = r.backward(&g, 1).iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
