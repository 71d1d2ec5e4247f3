mod common;

use std::collections::{BTreeMap, BTreeSet};

use embednoise::augment::{k_augment, sample_derangement, sample_permutations, ShuffleMode};
use embednoise::decoder::{compose_adversarial, Decoder, DecoderConfig, NoiseBatch};
use embednoise::eval::{recall_at_k, similarity_matrix, SimilarityMatrix};
use embednoise::io::synthetic_images;
use embednoise::tensor::EmbeddingBatch;
use common::{brute_force_recall, rng, unit_rows};
use ndarray::{Array2, Array4};
use proptest::prelude::*;

fn small_config(d: usize, side: usize, eps: f64) -> DecoderConfig {
    let mut c = DecoderConfig::new(d, side, side);
    c.epsilon = eps;
    c.grid_channels = 4;
    c.hidden_channels = 3;
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn noise_never_exceeds_budget(
        seed in any::<u64>(),
        scale in 0.01f64..500.0,
        d in 2usize..8,
        side in prop::sample::select(vec![4usize, 8, 12]),
        eps in 1e-3f64..0.5,
    ) {
        let mut decoder = Decoder::init(small_config(d, side, eps), seed).unwrap();
        decoder.params_mut().scale(scale);
        let z = unit_rows(&mut rng(seed ^ 1), 3, d);
        let noise = decoder.decode(&z).unwrap();
        prop_assert!(noise.linf() <= eps);
    }

    #[test]
    fn composed_images_stay_in_range_and_budget(seed in any::<u64>(), scale in 0.01f64..500.0) {
        let eps = 16.0 / 255.0;
        let mut decoder = Decoder::init(small_config(4, 8, eps), seed).unwrap();
        decoder.params_mut().scale(scale);
        let noise = decoder.decode(&unit_rows(&mut rng(seed), 3, 4)).unwrap();
        let cleans = synthetic_images(3, 8, 8, seed);
        let adv = compose_adversarial(&noise, &cleans).unwrap();
        for (&a, &c) in adv.view().iter().zip(cleans.view().iter()) {
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!(a <= c + eps && a >= c - eps);
        }
    }

    #[test]
    fn k_augment_preserves_noise_and_avoids_self_pairs(seed in any::<u64>(), n in 2usize..10, k in 1usize..7) {
        let eps = 0.1;
        let noise = NoiseBatch::new(
            Array4::from_shape_fn((n, 4, 4, 3), |(i, y, x, c)| eps * (((i * 31 + y * 7 + x * 3 + c) % 11) as f64 / 10.0 - 0.5)),
            eps,
        ).unwrap();
        let images = synthetic_images(n, 4, 4, seed);
        let set = k_augment(&noise, &images, k, seed).unwrap();
        prop_assert_eq!(set.mini_batches.len(), k);
        prop_assert_eq!(set.permutations.len(), k);
        for ((nb, ib), perm) in set.mini_batches.iter().zip(&set.permutations) {
            prop_assert_eq!(nb.view(), noise.view());
            prop_assert!(perm.iter().enumerate().all(|(i, &p)| i != p));
            let expected = images.select(perm);
            prop_assert_eq!(ib.view(), expected.view());
        }
    }

    #[test]
    fn recall_matches_brute_force_and_grows_with_k(seed in any::<u64>(), q in 1usize..12, g in 10usize..20, ties in any::<bool>()) {
        let mut r = rng(seed);
        let mut data = common::gaussian(&mut r, q, g);
        if ties {
            data.mapv_inplace(|v| (v * 2.0).round());
        }
        let gt: Vec<BTreeSet<usize>> = (0..q).map(|i| [i % g, (i * 7 + 3) % g].into_iter().collect()).collect();
        let sim = SimilarityMatrix { data: data.clone(), query_ids: Vec::new(), gallery_ids: Vec::new() };
        let ks: Vec<usize> = (1..=g).collect();
        let got = recall_at_k(&sim, &gt, &ks).unwrap();
        let mut prev = 0.0;
        for &k in &ks {
            prop_assert_eq!(got[&k], brute_force_recall(&data, &gt, k));
            prop_assert!(got[&k] >= prev);
            prev = got[&k];
        }
        prop_assert_eq!(got[&g], 100.0);
    }
}

#[test]
fn derangements_have_no_fixed_points() {
    let mut r = rng(30);
    for n in 2..50 {
        for _ in 0..20 {
            let p = sample_derangement(n, &mut r).unwrap();
            assert!(p.iter().enumerate().all(|(i, &j)| i != j));
            let mut sorted = p.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        }
    }
}

#[test]
fn derangements_of_four_are_uniform() {
    let mut r = rng(31);
    let trials = 9000;
    let mut counts: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    for _ in 0..trials {
        *counts.entry(sample_derangement(4, &mut r).unwrap()).or_default() += 1;
    }
    assert_eq!(counts.len(), 9);
    let expected = trials as f64 / 9.0;
    let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 8 degrees of freedom, p = 0.001
    assert!(chi2 < 26.12, "chi-square {chi2}");
}

#[test]
fn pairs_always_swap() {
    let mut r = rng(32);
    for _ in 0..100 {
        assert_eq!(sample_derangement(2, &mut r).unwrap(), vec![1, 0]);
    }
}

#[test]
fn degenerate_batches_are_rejected() {
    let mut r = rng(33);
    assert!(sample_derangement(1, &mut r).is_err());
    assert!(sample_permutations(1, 5, ShuffleMode::Derangement, &mut r).is_err());
    assert!(sample_permutations(4, 0, ShuffleMode::Derangement, &mut r).is_err());
}

#[test]
fn ties_rank_lower_gallery_index_first() {
    let q = EmbeddingBatch::new(Array2::from_elem((1, 2), std::f64::consts::FRAC_1_SQRT_2)).unwrap();
    let g = EmbeddingBatch::new(Array2::from_elem((3, 2), std::f64::consts::FRAC_1_SQRT_2)).unwrap();
    let sim = similarity_matrix(&q, &g).unwrap();
    let first: Vec<BTreeSet<usize>> = vec![[0].into()];
    let last: Vec<BTreeSet<usize>> = vec![[2].into()];
    assert_eq!(recall_at_k(&sim, &first, &[1]).unwrap()[&1], 100.0);
    assert_eq!(recall_at_k(&sim, &last, &[1, 2, 3]).unwrap(), BTreeMap::from([(1, 0.0), (2, 0.0), (3, 100.0)]));
}

#[test]
fn identical_adversarial_and_target_give_full_recall() {
    let z = unit_rows(&mut rng(34), 20, 8);
    let sim = similarity_matrix(&z, &z).unwrap();
    let gt: Vec<BTreeSet<usize>> = (0..20).map(|i| [i].into()).collect();
    assert_eq!(recall_at_k(&sim, &gt, &[1]).unwrap()[&1], 100.0);
}
