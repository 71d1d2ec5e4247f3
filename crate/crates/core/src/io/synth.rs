//! Procedural toy images: gratings, blobs and a little pixel noise.

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

use crate::tensor::ImageBatch;

/// `count` seeded images of size `height × width`. Image `i` depends only
/// on `(seed, i)`, so prefixes of larger sets agree.
pub fn synthetic_images(count: usize, height: usize, width: usize, seed: u64) -> ImageBatch {
    let mut data = Array4::<f64>::zeros((count, height, width, 3));
    for (i, mut img) in data.outer_iter_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ (i as u64 + 1));
        let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.8));
        let gratings: Vec<_> = (0..3)
            .map(|_| {
                let freq = rng.random_range(0.5..6.0);
                let angle = rng.random_range(0.0..PI);
                let phase = rng.random_range(0.0..2.0 * PI);
                let amp: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.2..0.2));
                (freq * angle.cos(), freq * angle.sin(), phase, amp)
            })
            .collect();
        let blobs: Vec<_> = (0..2)
            .map(|_| {
                let cy = rng.random_range(0.0..1.0);
                let cx = rng.random_range(0.0..1.0);
                let r = rng.random_range(0.08..0.3);
                let amp: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.35..0.35));
                (cy, cx, r, amp)
            })
            .collect();
        for y in 0..height {
            for x in 0..width {
                let v = y as f64 / height as f64;
                let u = x as f64 / width as f64;
                for c in 0..3 {
                    let mut p = base[c];
                    for (fu, fv, phase, amp) in &gratings {
                        p += amp[c] * (2.0 * PI * (fu * u + fv * v) + phase).sin();
                    }
                    for (cy, cx, r, amp) in &blobs {
                        let d2 = (v - cy).powi(2) + (u - cx).powi(2);
                        p += amp[c] * (-d2 / (2.0 * r * r)).exp();
                    }
                    p += rng.random_range(-0.04..0.04);
                    img[[y, x, c]] = p.clamp(0.0, 1.0);
                }
            }
        }
    }
    ImageBatch::from_trusted(data)
}
