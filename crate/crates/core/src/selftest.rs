//! Quick invariant checks run by the `selftest` subcommand.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::augment::{sample_derangement, sample_permutations, ShuffleMode};
use crate::config::RunConfig;
use crate::decoder::{compose_adversarial, Decoder};
use crate::error::{Error, Result};
use crate::eval::{recall_at_k, similarity_matrix};
use crate::io::{level_budget, quantize, quantize_adversarial, synthetic_images};
use crate::objectives::contrastive_loss;
use crate::tensor::{EmbeddingBatch, ImageBatch};
use crate::trainer::{encode_checkpoint, pretrain, Stage, TrainHooks};

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn(&RunConfig, &mut ChaCha8Rng) -> Result<String>;

const CHECKS: [(&str, Check); 9] = [
    ("contrastive-loss-oracle", loss_oracle),
    ("temperature-schedule", schedule),
    ("decoder-budget", decoder_budget),
    ("composition-range", composition),
    ("derangements", derangements),
    ("encoder-unit-norm", encoder_norm),
    ("export-quantization", export_quantization),
    ("recall-oracle", recall_oracle),
    ("training-determinism", training_determinism),
];

pub fn run_checks(config: &RunConfig) -> Vec<CheckResult> {
    CHECKS
        .iter()
        .enumerate()
        .map(|(i, (name, check))| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(i as u64));
            let (passed, detail) = match check(config, &mut rng) {
                Ok(d) => (true, d),
                Err(e) => (false, e.to_string()),
            };
            CheckResult { name, passed, detail }
        })
        .collect()
}

fn fail(msg: String) -> Error {
    Error::Contract(msg)
}

fn random_embeddings(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Result<EmbeddingBatch> {
    EmbeddingBatch::normalized(Array2::from_shape_simple_fn((n, d), || rng.sample::<f64, _>(StandardNormal)))
}

fn loss_oracle(_: &RunConfig, rng: &mut ChaCha8Rng) -> Result<String> {
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(1..12);
        let d = rng.random_range(2..10);
        let tau = rng.random_range(0.05..1.5);
        let z = random_embeddings(rng, n, d)?;
        let za = random_embeddings(rng, n, d)?;
        let got = contrastive_loss(&z, &za, tau)?.value;
        let (zv, av) = (z.view(), za.view());
        let mut want = 0.0;
        for i in 0..n {
            let dot = |j: usize| (0..d).map(|c| zv[[i, c]] * av[[j, c]]).sum::<f64>() / tau;
            let denom: f64 = (0..n).map(|j| dot(j).exp()).sum();
            want -= (dot(i).exp() / denom).ln();
        }
        worst = worst.max((got - want / n as f64).abs());
    }
    if worst > 1e-9 {
        return Err(fail(format!("deviation {worst:e} from double-loop oracle")));
    }
    Ok(format!("max deviation {worst:.1e}"))
}

fn schedule(config: &RunConfig, _: &mut ChaCha8Rng) -> Result<String> {
    let s = config.train_config(Stage::Pretrain).temperature;
    if s.at(0.0)? != s.tau0 || s.at(s.horizon as f64)? != s.tau_final {
        return Err(fail("schedule endpoints off".into()));
    }
    let mut prev = f64::INFINITY;
    for t in (0..=s.horizon).step_by((s.horizon as usize / 100).max(1)) {
        let v = s.at_step(t);
        if v > prev {
            return Err(fail(format!("temperature rises at step {t}")));
        }
        prev = v;
    }
    Ok(format!("{} -> {} over {} steps", s.tau0, s.tau_final, s.horizon))
}

fn decoder_budget(config: &RunConfig, rng: &mut ChaCha8Rng) -> Result<String> {
    let dc = config.train_config(Stage::Pretrain).decoder_config();
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let mut decoder = Decoder::init(dc, rng.random())?;
        decoder.params_mut().scale(rng.random_range(0.1..50.0));
        let z = random_embeddings(rng, 4, dc.embed_dim)?;
        worst = worst.max(decoder.decode(&z)?.linf());
    }
    if worst > dc.epsilon {
        return Err(fail(format!("noise reached {worst} > {}", dc.epsilon)));
    }
    Ok(format!("max |noise| {worst:.5} <= {:.5}", dc.epsilon))
}

fn composition(config: &RunConfig, rng: &mut ChaCha8Rng) -> Result<String> {
    let dc = config.train_config(Stage::Pretrain).decoder_config();
    let mut decoder = Decoder::init(dc, rng.random())?;
    decoder.params_mut().scale(20.0);
    let noise = decoder.decode(&random_embeddings(rng, 4, dc.embed_dim)?)?;
    let cleans = synthetic_images(4, dc.height, dc.width, rng.random());
    let adv = compose_adversarial(&noise, &cleans)?;
    let eps = dc.epsilon;
    let mut dev = 0.0f64;
    for (&a, &c) in adv.view().iter().zip(cleans.view().iter()) {
        if !(0.0..=1.0).contains(&a) || a > c + eps || a < c - eps {
            return Err(fail(format!("composed value {a} outside [0, 1] or beyond {c} +/- {eps}")));
        }
        dev = dev.max((a - c).abs());
    }
    Ok(format!("max deviation {dev:.5}"))
}

fn derangements(config: &RunConfig, rng: &mut ChaCha8Rng) -> Result<String> {
    for _ in 0..200 {
        let n = rng.random_range(2..40);
        let p = sample_derangement(n, rng)?;
        if p.iter().enumerate().any(|(i, &j)| i == j) {
            return Err(fail(format!("fixed point in {p:?}")));
        }
    }
    if sample_derangement(2, rng)? != [1, 0] {
        return Err(fail("n=2 did not swap".into()));
    }
    let k = config.pretrain.train.k;
    let perms = sample_permutations(8, k, ShuffleMode::Derangement, rng)?;
    if perms.len() != k {
        return Err(fail(format!("{} permutations for K={k}", perms.len())));
    }
    Ok(format!("200 shuffles fixed-point free, K={k}"))
}

fn encoder_norm(config: &RunConfig, rng: &mut ChaCha8Rng) -> Result<String> {
    let encoder = config.train_config(Stage::Pretrain).build_primary()?;
    let (h, w, _) = encoder.input_shape();
    let z = encoder.encode(&synthetic_images(8, h, w, rng.random()))?;
    let dev = z.max_norm_deviation();
    if dev > 1e-9 {
        return Err(fail(format!("row norm deviates by {dev:e}")));
    }
    Ok(format!("max norm deviation {dev:.1e}"))
}

fn export_quantization(config: &RunConfig, rng: &mut ChaCha8Rng) -> Result<String> {
    let eps = config.model.epsilon;
    let budget = level_budget(eps);
    let clean = Array3::from_shape_simple_fn((8, 8, 3), || rng.random::<f64>());
    let adv = clean.mapv(|c| (c + eps * if rng.random::<bool>() { 1.0 } else { -1.0 }).clamp(0.0, 1.0));
    let q = quantize_adversarial(adv.view(), clean.view(), eps)?;
    let worst = q
        .iter()
        .zip(clean.iter())
        .map(|(&a, &c)| (a as i32 - quantize(c) as i32).abs())
        .max()
        .unwrap_or(0);
    if worst > budget {
        return Err(fail(format!("{worst} levels > {budget}")));
    }
    Ok(format!("max {worst} of {budget} levels"))
}

fn recall_oracle(_: &RunConfig, rng: &mut ChaCha8Rng) -> Result<String> {
    for _ in 0..20 {
        let q = random_embeddings(rng, 6, 4)?;
        let g = random_embeddings(rng, 6, 4)?;
        let gt: Vec<_> = (0..6).map(|i| [i].into_iter().collect()).collect();
        let sim = similarity_matrix(&q, &g)?;
        let got = recall_at_k(&sim, &gt, &[1, 3])?;
        for (&k, &v) in &got {
            let hits = (0..6)
                .filter(|&i| {
                    let mut order: Vec<usize> = (0..6).collect();
                    order.sort_by(|&a, &b| sim.data[[i, b]].total_cmp(&sim.data[[i, a]]).then(a.cmp(&b)));
                    order[..k].contains(&i)
                })
                .count();
            if (v - 100.0 * hits as f64 / 6.0).abs() > 1e-12 {
                return Err(fail(format!("R@{k} {v} disagrees with brute force")));
            }
        }
    }
    Ok("20 random instances agree".into())
}

fn training_determinism(config: &RunConfig, rng: &mut ChaCha8Rng) -> Result<String> {
    let mut train = config.train_config(Stage::Pretrain);
    train.steps = 2;
    train.batch_size = 8;
    train.k = 2;
    let encoder = train.build_primary()?;
    let data: ImageBatch = synthetic_images(16, train.image_height, train.image_width, rng.random());
    let a = pretrain(&train, &encoder, &data, TrainHooks::default())?;
    let b = pretrain(&train, &encoder, &data, TrainHooks::default())?;
    if encode_checkpoint(&a.checkpoint) != encode_checkpoint(&b.checkpoint) {
        return Err(fail("two identical runs produced different checkpoints".into()));
    }
    Ok("two 2-step runs bitwise identical".into())
}
