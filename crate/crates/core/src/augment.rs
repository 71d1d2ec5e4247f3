//! K-augmentation: pairing each noise map with K unrelated images.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::NoiseBatch;
use crate::error::{Error, Result};
use crate::tensor::{ImageBatch, ImageSource};

/// How image order is shuffled within each mini-batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShuffleMode {
    /// No image may stay paired with its own noise.
    #[default]
    Derangement,
    /// Any permutation, fixed points allowed.
    Unconstrained,
}

/// K copies of a noise batch, each paired with a differently shuffled
/// copy of the source images.
#[derive(Debug, Clone)]
pub struct AugmentedBatchSet {
    pub mini_batches: Vec<(NoiseBatch, ImageBatch)>,
    /// `permutations[j][i]` is the image paired with noise `i` in mini-batch `j`.
    pub permutations: Vec<Vec<usize>>,
}

/// Uniform derangement of `0..n` by rejection of uniform permutations.
pub fn sample_derangement<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::DegenerateBatch(format!(
            "a batch of {n} image(s) cannot be shuffled without pairing an image with its own noise"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return Ok(perm);
        }
    }
}

pub fn sample_permutations<R: Rng + ?Sized>(n: usize, k: usize, mode: ShuffleMode, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    if n < 2 {
        return Err(Error::DegenerateBatch(format!("K-augmentation needs at least 2 images, got {n}")));
    }
    (0..k)
        .map(|_| match mode {
            ShuffleMode::Derangement => sample_derangement(n, rng),
            ShuffleMode::Unconstrained => {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(rng);
                Ok(perm)
            }
        })
        .collect()
}

/// K-augmentation with derangement shuffles drawn from `rng_seed`.
pub fn k_augment(noise: &NoiseBatch, images: &ImageBatch, k: usize, rng_seed: u64) -> Result<AugmentedBatchSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    k_augment_with(noise, images, k, ShuffleMode::Derangement, &mut rng)
}

pub fn k_augment_with<R: Rng + ?Sized>(
    noise: &NoiseBatch,
    images: &ImageBatch,
    k: usize,
    mode: ShuffleMode,
    rng: &mut R,
) -> Result<AugmentedBatchSet> {
    if noise.len() != images.len() {
        return Err(Error::Dimension(format!(
            "{} noise maps for {} images",
            noise.len(),
            images.len()
        )));
    }
    let permutations = sample_permutations(images.len(), k, mode, rng)?;
    let mini_batches = permutations
        .iter()
        .map(|perm| (noise.clone(), images.select(perm)))
        .collect();
    Ok(AugmentedBatchSet {
        mini_batches,
        permutations,
    })
}

/// Indices for drawing `n` items from `len`: without replacement when
/// `n <= len`, uniformly with replacement otherwise.
pub fn sample_unrelated_indices<R: Rng + ?Sized>(len: usize, n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(Error::EmptySource("external dataset has no images".into()));
    }
    if n <= len {
        Ok(index::sample(rng, len, n).into_vec())
    } else {
        Ok((0..n).map(|_| rng.random_range(0..len)).collect())
    }
}

/// Draws `n` unrelated clean images from an external source.
pub fn sample_unrelated(external: &dyn ImageSource, n: usize, rng_seed: u64) -> Result<ImageBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let indices = sample_unrelated_indices(external.len(), n, &mut rng)?;
    external.load_batch(&indices)
}
