mod common;

use embednoise::objectives::{bidirectional_infonce, contrastive_loss, cosine_loss, Objective, TemperatureSchedule};
use embednoise::tensor::EmbeddingBatch;
use common::{naive_bidirectional, naive_contrastive, naive_cosine, rng, unit_rows};
use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn losses_match_double_loop_oracles() {
    let mut r = rng(11);
    for _ in 0..200 {
        let n = r.random_range(1..=32);
        let d = r.random_range(2..=16);
        let tau = r.random_range(0.07..2.0);
        let z = unit_rows(&mut r, n, d);
        let za = unit_rows(&mut r, n, d);
        let c = contrastive_loss(&z, &za, tau).unwrap().value;
        let b = bidirectional_infonce(&z, &za, tau).unwrap().value;
        let s = cosine_loss(&z, &za).unwrap().value;
        assert!((c - naive_contrastive(&z, &za, tau)).abs() < 1e-9);
        assert!((b - naive_bidirectional(&z, &za, tau)).abs() < 1e-9);
        assert!((s - naive_cosine(&z, &za)).abs() < 1e-9);
    }
}

#[test]
fn single_pair_has_zero_contrastive_loss() {
    let z = EmbeddingBatch::new(array![[0.6, 0.8]]).unwrap();
    let za = EmbeddingBatch::new(array![[1.0, 0.0]]).unwrap();
    assert!(contrastive_loss(&z, &za, 0.3).unwrap().value.abs() < 1e-12);
    assert!(bidirectional_infonce(&z, &za, 0.3).unwrap().value.abs() < 1e-12);
}

#[test]
fn orthogonal_perfect_pairs_at_unit_temperature() {
    let z = EmbeddingBatch::new(array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
    let want = (1.0 + (-1.0f64).exp()).ln();
    let got = contrastive_loss(&z, &z, 1.0).unwrap().value;
    assert!((got - 0.3132617).abs() < 1e-6);
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn non_unit_rows_are_rejected() {
    let z = EmbeddingBatch::new(array![[2.0, 0.0], [0.0, 1.0]]).unwrap();
    assert!(contrastive_loss(&z, &z, 1.0).is_err());
}

#[test]
fn zero_temperature_is_rejected() {
    let mut r = rng(3);
    let z = unit_rows(&mut r, 3, 4);
    assert!(contrastive_loss(&z, &z, 0.0).is_err());
}

#[test]
fn large_logits_stay_finite() {
    let mut r = rng(4);
    let z = unit_rows(&mut r, 8, 4);
    let za = unit_rows(&mut r, 8, 4);
    let v = contrastive_loss(&z, &za, 1e-3).unwrap().value;
    assert!(v.is_finite());
}

#[test]
fn schedule_endpoints_and_midpoint() {
    let s = TemperatureSchedule::default();
    assert_eq!(s.at(0.0).unwrap(), 1.0);
    assert_eq!(s.at(10_000.0).unwrap(), 0.07);
    assert_eq!(s.at(50_000.0).unwrap(), 0.07);
    assert!((s.at(5_000.0).unwrap() - 0.07f64.sqrt()).abs() < 1e-12);
    assert!((s.at(5_000.0).unwrap() - 0.2645751).abs() < 1e-7);
    assert!(s.at(-1.0).is_err());
    assert!(s.at(f64::NAN).is_err());
}

fn embeddings(n: usize, d: usize) -> impl Strategy<Value = Array2<f64>> {
    proptest::collection::vec(-1.0f64..1.0, n * d).prop_filter_map("zero row", move |v| {
        let a = Array2::from_shape_vec((n, d), v).unwrap();
        a.rows().into_iter().all(|r| r.dot(&r) > 1e-6).then_some(a)
    })
}

fn pair() -> impl Strategy<Value = (Array2<f64>, Array2<f64>, f64)> {
    (1usize..12, 2usize..8)
        .prop_flat_map(|(n, d)| (embeddings(n, d), embeddings(n, d), 0.05f64..2.0))
}

proptest! {
    #[test]
    fn losses_are_bounded((a, b, tau) in pair()) {
        let z = EmbeddingBatch::normalized(a).unwrap();
        let za = EmbeddingBatch::normalized(b).unwrap();
        let n = z.len() as f64;
        for obj in [Objective::Contrastive, Objective::Bidirectional] {
            let v = obj.evaluate(&z, &za, tau).unwrap().value;
            prop_assert!(v >= -1e-12);
            // each term is at most log n + 2/τ
            prop_assert!(v <= n.ln() + 2.0 / tau + 1e-9);
        }
        let c = cosine_loss(&z, &za).unwrap().value;
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&c));
    }

    #[test]
    fn bidirectional_and_cosine_are_symmetric((a, b, tau) in pair()) {
        let z = EmbeddingBatch::normalized(a).unwrap();
        let za = EmbeddingBatch::normalized(b).unwrap();
        let ab = bidirectional_infonce(&z, &za, tau).unwrap().value;
        let ba = bidirectional_infonce(&za, &z, tau).unwrap().value;
        prop_assert!((ab - ba).abs() < 1e-12);
        let ab = cosine_loss(&z, &za).unwrap().value;
        let ba = cosine_loss(&za, &z).unwrap().value;
        prop_assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn joint_row_permutation_leaves_losses_unchanged((a, b, tau) in pair(), seed in any::<u64>()) {
        let z = EmbeddingBatch::normalized(a).unwrap();
        let za = EmbeddingBatch::normalized(b).unwrap();
        let mut order: Vec<usize> = (0..z.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng(seed));
        let zp = z.select(&order);
        let zap = za.select(&order);
        for obj in [Objective::Contrastive, Objective::Bidirectional, Objective::Cosine] {
            let v = obj.evaluate(&z, &za, tau).unwrap().value;
            let w = obj.evaluate(&zp, &zap, tau).unwrap().value;
            prop_assert!((v - w).abs() < 1e-10);
        }
    }

    #[test]
    fn perfect_alignment_minimises_cosine_loss((a, _b, _tau) in pair()) {
        let z = EmbeddingBatch::normalized(a).unwrap();
        prop_assert!(cosine_loss(&z, &z).unwrap().value.abs() < 1e-12);
    }

    #[test]
    fn schedule_is_monotone(t1 in 0.0f64..20_000.0, t2 in 0.0f64..20_000.0) {
        let s = TemperatureSchedule::default();
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        prop_assert!(s.at(lo).unwrap() >= s.at(hi).unwrap());
        prop_assert!(s.at(hi).unwrap() >= 0.07);
    }
}
