//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use embednoise::tensor::EmbeddingBatch;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, d), || rng.sample(StandardNormal))
}

pub fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> EmbeddingBatch {
    EmbeddingBatch::normalized(gaussian(rng, n, d)).unwrap()
}

fn rows(e: &EmbeddingBatch) -> Vec<Vec<f64>> {
    e.view().rows().into_iter().map(|r| r.to_vec()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `-1/n Σ_i log( exp(z_i·a_i/τ) / Σ_j exp(z_i·a_j/τ) )`, written as plain loops.
pub fn naive_contrastive(z: &EmbeddingBatch, za: &EmbeddingBatch, tau: f64) -> f64 {
    let (z, a) = (rows(z), rows(za));
    let n = z.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut denom = 0.0;
        for j in 0..n {
            denom += (dot(&z[i], &a[j]) / tau).exp();
        }
        total += -((dot(&z[i], &a[i]) / tau).exp() / denom).ln();
    }
    total / n as f64
}

/// Mean of the contrastive loss in both directions.
pub fn naive_bidirectional(z: &EmbeddingBatch, za: &EmbeddingBatch, tau: f64) -> f64 {
    0.5 * (naive_contrastive(z, za, tau) + naive_contrastive(za, z, tau))
}

pub fn naive_cosine(z: &EmbeddingBatch, za: &EmbeddingBatch) -> f64 {
    let (z, a) = (rows(z), rows(za));
    let mut total = 0.0;
    for i in 0..z.len() {
        let na = dot(&z[i], &z[i]).sqrt();
        let nb = dot(&a[i], &a[i]).sqrt();
        total += dot(&z[i], &a[i]) / (na * nb);
    }
    1.0 - total / z.len() as f64
}

/// Recall@k by fully sorting every gallery row (score descending, index
/// ascending on ties).
pub fn brute_force_recall(sim: &Array2<f64>, gt: &[BTreeSet<usize>], k: usize) -> f64 {
    let mut hits = 0;
    for (q, truth) in gt.iter().enumerate() {
        let mut order: Vec<usize> = (0..sim.ncols()).collect();
        order.sort_by(|&a, &b| sim[[q, b]].partial_cmp(&sim[[q, a]]).unwrap().then(a.cmp(&b)));
        if order[..k].iter().any(|g| truth.contains(g)) {
            hits += 1;
        }
    }
    100.0 * hits as f64 / gt.len() as f64
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na.max(nb) == 0.0 {
        0.0
    } else {
        diff / na.max(nb)
    }
}
