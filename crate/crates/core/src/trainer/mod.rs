//! Pre-training and fine-tuning of the noise decoder.

mod checkpoint;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_expecting, save_checkpoint};

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{k_augment_with, sample_unrelated_indices, ShuffleMode};
use crate::decoder::{compose_adversarial, compose_with_mask, Decoder, DecoderConfig, DecoderParams, DEFAULT_EPSILON};
use crate::encoder::{Encoder, EncoderSpec, SurrogateEnsemble};
use crate::error::{Error, Result};
use crate::nn::{cosine_lr, AdamState, AdamW};
use crate::objectives::{ensemble_loss_with_grad, LossValue, Objective, TemperatureSchedule};
use crate::tensor::{ImageBatch, ImageSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

/// Hyperparameters of one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub objective: Objective,
    pub epsilon: f64,
    /// Mini-batches per step in K-augmentation.
    pub k: usize,
    pub batch_size: usize,
    /// Optimizer updates (pre-training).
    pub steps: u64,
    /// Passes over the downstream dataset (fine-tuning).
    pub epochs: u64,
    pub learning_rate: f64,
    pub lr_floor: f64,
    pub optimizer: AdamW,
    /// Pre-training temperature schedule.
    pub temperature: TemperatureSchedule,
    /// Fine-tuning temperature.
    pub fixed_tau: f64,
    pub seed: u64,
    pub shuffle: ShuffleMode,
    pub image_height: usize,
    pub image_width: usize,
    pub embed_dim: usize,
    pub grid_channels: usize,
    pub hidden_channels: usize,
    /// Write a checkpoint every this many steps (0 disables).
    pub checkpoint_every: u64,
    /// Assert the noise budget every this many steps (0 disables).
    pub budget_check_every: u64,
    pub primary: EncoderSpec,
    pub auxiliaries: Vec<EncoderSpec>,
    pub ensemble_weights: Option<Vec<f64>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Pretrain,
            objective: Objective::Contrastive,
            epsilon: DEFAULT_EPSILON,
            k: 5,
            batch_size: 64,
            steps: 2000,
            epochs: 20,
            learning_rate: 1e-4,
            lr_floor: 1e-6,
            optimizer: AdamW::default(),
            temperature: TemperatureSchedule::default(),
            fixed_tau: 0.07,
            seed: 0,
            shuffle: ShuffleMode::Derangement,
            image_height: 32,
            image_width: 32,
            embed_dim: 32,
            grid_channels: 32,
            hidden_channels: 16,
            checkpoint_every: 0,
            budget_check_every: 50,
            primary: EncoderSpec::Toy { seed: 0 },
            auxiliaries: Vec::new(),
            ensemble_weights: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0 && self.lr_floor >= 0.0) {
            return Err(Error::Config("learning rates must be finite and nonnegative".into()));
        }
        if !(self.fixed_tau.is_finite() && self.fixed_tau > 0.0) {
            return Err(Error::Config(format!("fixed_tau must be positive, got {}", self.fixed_tau)));
        }
        self.temperature.validate()?;
        self.decoder_config().validate()?;
        if self.stage == Stage::Pretrain && !self.auxiliaries.is_empty() {
            return Err(Error::Config(
                "pre-training uses the primary encoder only; auxiliaries are a fine-tuning option".into(),
            ));
        }
        Ok(())
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            embed_dim: self.embed_dim,
            height: self.image_height,
            width: self.image_width,
            epsilon: self.epsilon,
            grid_channels: self.grid_channels,
            hidden_channels: self.hidden_channels,
        }
    }

    /// SHA-256 over the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn build_primary(&self) -> Result<Encoder> {
        self.primary.build((self.image_height, self.image_width), self.embed_dim)
    }

    pub fn build_ensemble(&self) -> Result<SurrogateEnsemble> {
        let shape = (self.image_height, self.image_width);
        let aux = self
            .auxiliaries
            .iter()
            .map(|s| s.build(shape, self.embed_dim))
            .collect::<Result<Vec<_>>>()?;
        SurrogateEnsemble::new(self.build_primary()?, aux, self.ensemble_weights.clone())
    }

    pub fn learning_rate_at(&self, step: u64, total_steps: u64) -> f64 {
        cosine_lr(self.learning_rate, self.lr_floor.min(self.learning_rate), step, total_steps)
    }
}

/// Position of the deterministic random stream: every draw is a pure
/// function of `(seed, step)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub decoder: Decoder,
    pub optimizer: AdamState,
    /// Optimizer updates applied in `stage`.
    pub step: u64,
    pub stage: Stage,
    pub config_fingerprint: String,
    pub rng: RngState,
}

impl Checkpoint {
    /// Freshly initialised decoder for `config`.
    pub fn fresh(config: &TrainConfig, fingerprint: String) -> Result<Self> {
        let decoder = Decoder::init(config.decoder_config(), stream_seed(config.seed, Stream::Init, 0))?;
        let optimizer = AdamState::new(decoder.params().slices().iter().map(|s| s.len()));
        Ok(Self {
            decoder,
            optimizer,
            step: 0,
            stage: config.stage,
            config_fingerprint: fingerprint,
            rng: RngState {
                seed: config.seed,
                step: 0,
            },
        })
    }

    /// A warning message when `expected` differs from the stored fingerprint.
    pub fn fingerprint_warning(&self, expected: &str) -> Option<String> {
        (self.config_fingerprint != expected).then(|| {
            format!(
                "checkpoint was produced by config {} but the current config is {}",
                self.config_fingerprint, expected
            )
        })
    }
}

#[derive(Clone, Copy)]
enum Stream {
    Init = 1,
    Data = 2,
    Augment = 3,
    External = 4,
}

/// SplitMix64 finalizer over `(seed, stream, index)`.
fn stream_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    let mut x = seed
        ^ (stream as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// One line of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub lr: f64,
    pub tau: f64,
    pub loss: f64,
}

/// Append-only tab-separated loss log (`step lr tau loss`).
pub struct LossLog {
    writer: BufWriter<File>,
}

impl LossLog {
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut writer = BufWriter::new(file);
        if fresh {
            writeln!(writer, "step\tlr\ttau\tloss")?;
        }
        Ok(Self { writer })
    }

    pub fn append(&mut self, r: &LogRecord) -> Result<()> {
        writeln!(self.writer, "{}\t{:e}\t{}\t{}", r.step, r.lr, r.tau, r.loss)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush()?;
        Ok(())
    }
}

/// Side outputs of a training run.
#[derive(Default)]
pub struct TrainHooks {
    pub log: Option<LossLog>,
    /// Periodic checkpoints go here as `<stage>-step<N>.ckpt`.
    pub checkpoint_dir: Option<PathBuf>,
    /// Fingerprint stamped into checkpoints; defaults to the train config's.
    pub fingerprint: Option<String>,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<LogRecord>,
}

/// Result of a single pre-training update.
#[derive(Debug, Clone)]
pub struct StepReport {
    /// Mean over the K mini-batch losses.
    pub loss: LossValue,
    pub minibatch_losses: Vec<f64>,
    pub lr: f64,
    pub tau: f64,
}

/// One pre-training update: encode, decode, K-augment, compose, evaluate
/// the objective on each mini-batch, average the K gradients and apply a
/// single optimizer step.
pub fn pretrain_step(
    ckpt: &mut Checkpoint,
    encoder: &Encoder,
    images: &ImageBatch,
    config: &TrainConfig,
    total_steps: u64,
) -> Result<StepReport> {
    let t = ckpt.step;
    let tau = config.temperature.at_step(t);
    let lr = config.learning_rate_at(t, total_steps);
    let k = config.k;

    let z = encoder.encode(images)?;
    let (noise, tape) = ckpt.decoder.decode_with_tape(&z)?;
    check_budget(config, t, noise.linf(), noise.epsilon())?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, Stream::Augment, t));
    let augmented = k_augment_with(&noise, images, k, config.shuffle, &mut rng)?;

    let mut grad_noise = Array4::<f64>::zeros(noise.view().dim());
    let mut losses = Vec::with_capacity(k);
    for (noise, shuffled) in &augmented.mini_batches {
        let (adversarial, mask) = compose_with_mask(noise, shuffled)?;
        let (z_adv, enc_tape) = encoder.encode_with_tape(&adversarial)?;
        let (loss, d_adv) = config.objective.evaluate_with_grad(&z, &z_adv, tau)?;
        let d_pixels = encoder.backward(&enc_tape, d_adv.view())?;
        grad_noise.zip_mut_with(&(d_pixels * &mask), |g, d| *g += d / k as f64);
        losses.push(loss.value);
    }
    let mean = losses.iter().sum::<f64>() / k as f64;
    if !mean.is_finite() {
        return Err(Error::Diverged {
            step: t,
            detail: format!("loss {mean} (mini-batch losses {losses:?}, tau {tau}, lr {lr})"),
        });
    }
    let grads = ckpt.decoder.backward(&tape, grad_noise.view())?;
    apply_update(ckpt, config, &grads, lr)?;
    Ok(StepReport {
        loss: LossValue {
            value: mean,
            batch_size: images.len(),
            per_sample_terms: None,
        },
        minibatch_losses: losses,
        lr,
        tau,
    })
}

fn apply_update(ckpt: &mut Checkpoint, config: &TrainConfig, grads: &DecoderParams, lr: f64) -> Result<()> {
    if grads.slices().iter().any(|s| s.iter().any(|v| !v.is_finite())) {
        return Err(Error::Diverged {
            step: ckpt.step,
            detail: "non-finite gradient".into(),
        });
    }
    let grad_slices = grads.slices();
    let mut params = ckpt.decoder.params_mut().slices_mut();
    config.optimizer.step(&mut ckpt.optimizer, &mut params, &grad_slices, lr);
    ckpt.step += 1;
    ckpt.rng.step = ckpt.step;
    Ok(())
}

fn check_budget(config: &TrainConfig, step: u64, linf: f64, epsilon: f64) -> Result<()> {
    if config.budget_check_every > 0 && step.is_multiple_of(config.budget_check_every) && linf > epsilon {
        return Err(Error::Internal(format!(
            "noise magnitude {linf} exceeds budget {epsilon} at step {step}"
        )));
    }
    Ok(())
}

/// Indices of the batch used at `step`: epochs are independent seeded
/// shuffles of the dataset, split into `len / batch` full batches.
fn batch_indices(seed: u64, stream: Stream, len: usize, batch: usize, step: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let per_epoch = (len / batch).max(1) as u64;
    let epoch = step / per_epoch;
    let offset = (step % per_epoch) as usize * batch;
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(seed, stream, epoch)));
    order[offset..offset + batch].to_vec()
}

/// Runs pre-training from scratch.
pub fn pretrain(config: &TrainConfig, encoder: &Encoder, dataset: &dyn ImageSource, hooks: TrainHooks) -> Result<TrainOutcome> {
    let fingerprint = hooks.fingerprint.clone().unwrap_or_else(|| config.fingerprint());
    let start = Checkpoint::fresh(config, fingerprint)?;
    resume_pretrain(config, encoder, dataset, start, hooks)
}

/// Continues pre-training from `ckpt` up to `config.steps` updates.
pub fn resume_pretrain(
    config: &TrainConfig,
    encoder: &Encoder,
    dataset: &dyn ImageSource,
    mut ckpt: Checkpoint,
    mut hooks: TrainHooks,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_encoder(config, encoder)?;
    if dataset.len() < 2 {
        return Err(Error::EmptySource(format!(
            "pre-training needs at least 2 images, dataset has {}",
            dataset.len()
        )));
    }
    let batch = config.batch_size.min(dataset.len());
    let mut history = Vec::new();
    while ckpt.step < config.steps {
        let t = ckpt.step;
        let images = dataset.load_batch(&batch_indices(config.seed, Stream::Data, dataset.len(), batch, t))?;
        let report = pretrain_step(&mut ckpt, encoder, &images, config, config.steps)?;
        let record = LogRecord {
            step: t,
            lr: report.lr,
            tau: report.tau,
            loss: report.loss.value,
        };
        log_progress(&mut hooks, &record, config.steps)?;
        history.push(record);
        maybe_checkpoint(&hooks, config, &ckpt)?;
    }
    if let Some(log) = hooks.log.as_mut() {
        log.flush()?;
    }
    Ok(TrainOutcome { checkpoint: ckpt, history })
}

fn check_encoder(config: &TrainConfig, encoder: &Encoder) -> Result<()> {
    if encoder.embed_dim() != config.embed_dim {
        return Err(Error::Dimension(format!(
            "encoder embed_dim {} does not match config {}",
            encoder.embed_dim(),
            config.embed_dim
        )));
    }
    Ok(())
}

fn log_progress(hooks: &mut TrainHooks, record: &LogRecord, total: u64) -> Result<()> {
    if let Some(log) = hooks.log.as_mut() {
        log.append(record)?;
    }
    if record.step.is_multiple_of(100) || record.step + 1 == total {
        log::info!(
            "step {}/{} loss {:.5} tau {:.4} lr {:.3e}",
            record.step + 1,
            total,
            record.loss,
            record.tau,
            record.lr
        );
    }
    Ok(())
}

fn maybe_checkpoint(hooks: &TrainHooks, config: &TrainConfig, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = &hooks.checkpoint_dir {
        if config.checkpoint_every > 0 && ckpt.step.is_multiple_of(config.checkpoint_every) {
            let stage = match ckpt.stage {
                Stage::Pretrain => "pretrain",
                Stage::Finetune => "finetune",
            };
            save_checkpoint(ckpt, &dir.join(format!("{stage}-step{:08}.ckpt", ckpt.step)))?;
        }
    }
    Ok(())
}

/// Fine-tunes `init` on a downstream dataset, pairing each noise map with
/// an image drawn from `external` and scoring against the ensemble at the
/// fixed temperature.
pub fn finetune(
    config: &TrainConfig,
    init: &Checkpoint,
    dataset: &dyn ImageSource,
    external: &dyn ImageSource,
    ensemble: &SurrogateEnsemble,
    mut hooks: TrainHooks,
) -> Result<TrainOutcome> {
    config.validate()?;
    if config.stage != Stage::Finetune {
        return Err(Error::Config("finetune called with a pre-training config".into()));
    }
    check_compatible(config, init.decoder.config())?;
    check_encoder(config, ensemble.primary())?;
    if dataset.len() < 2 {
        return Err(Error::EmptySource(format!(
            "fine-tuning needs at least 2 images, dataset has {}",
            dataset.len()
        )));
    }
    if external.is_empty() {
        return Err(Error::EmptySource("external dataset of unrelated images is empty".into()));
    }
    let batch = config.batch_size.min(dataset.len());
    let total = config.epochs * (dataset.len() / batch).max(1) as u64;
    if total == 0 {
        return Ok(TrainOutcome {
            checkpoint: init.clone(),
            history: Vec::new(),
        });
    }
    let fingerprint = hooks.fingerprint.clone().unwrap_or_else(|| config.fingerprint());
    let mut ckpt = Checkpoint {
        decoder: init.decoder.clone(),
        optimizer: AdamState::new(init.decoder.params().slices().iter().map(|s| s.len())),
        step: 0,
        stage: Stage::Finetune,
        config_fingerprint: fingerprint,
        rng: RngState {
            seed: config.seed,
            step: 0,
        },
    };
    let mut history = Vec::new();
    while ckpt.step < total {
        let t = ckpt.step;
        let lr = config.learning_rate_at(t, total);
        let targets = dataset.load_batch(&batch_indices(config.seed, Stream::Data, dataset.len(), batch, t))?;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, Stream::External, t));
        let cleans = external.load_batch(&sample_unrelated_indices(external.len(), batch, &mut rng)?)?;

        let z = ensemble.primary().encode(&targets)?;
        let (noise, tape) = ckpt.decoder.decode_with_tape(&z)?;
        check_budget(config, t, noise.linf(), noise.epsilon())?;
        let (adversarial, mask) = compose_with_mask(&noise, &cleans)?;
        let (loss, d_adv) = ensemble_loss_with_grad(ensemble, &targets, &adversarial, config.objective, config.fixed_tau)?;
        if !loss.value.is_finite() {
            return Err(Error::Diverged {
                step: t,
                detail: format!("fine-tuning loss {}", loss.value),
            });
        }
        let grads = ckpt.decoder.backward(&tape, (d_adv * &mask).view())?;
        apply_update(&mut ckpt, config, &grads, lr)?;
        let record = LogRecord {
            step: t,
            lr,
            tau: config.fixed_tau,
            loss: loss.value,
        };
        log_progress(&mut hooks, &record, total)?;
        history.push(record);
        maybe_checkpoint(&hooks, config, &ckpt)?;
    }
    if let Some(log) = hooks.log.as_mut() {
        log.flush()?;
    }
    Ok(TrainOutcome { checkpoint: ckpt, history })
}

fn check_compatible(config: &TrainConfig, decoder: &DecoderConfig) -> Result<()> {
    let wanted = config.decoder_config();
    if (wanted.embed_dim, wanted.height, wanted.width, wanted.grid_channels, wanted.hidden_channels)
        != (decoder.embed_dim, decoder.height, decoder.width, decoder.grid_channels, decoder.hidden_channels)
    {
        return Err(Error::Dimension(format!(
            "checkpoint decoder {decoder:?} is incompatible with configured {wanted:?}"
        )));
    }
    if wanted.epsilon != decoder.epsilon {
        return Err(Error::Config(format!(
            "checkpoint budget {} differs from configured {}",
            decoder.epsilon, wanted.epsilon
        )));
    }
    Ok(())
}

/// `x′ = clamp(cleans + F(E(targets)), 0, 1)`; no weights are touched.
pub fn generate_attack(decoder: &Decoder, encoder: &Encoder, targets: &ImageBatch, cleans: &ImageBatch) -> Result<ImageBatch> {
    if targets.len() != cleans.len() {
        return Err(Error::Dimension(format!(
            "{} targets but {} clean images",
            targets.len(),
            cleans.len()
        )));
    }
    let cfg = decoder.config();
    if cleans.spatial() != (cfg.height, cfg.width) {
        return Err(Error::Dimension(format!(
            "clean images are {:?}, decoder produces {}x{}",
            cleans.spatial(),
            cfg.height,
            cfg.width
        )));
    }
    let noise = decoder.decode(&encoder.encode(targets)?)?;
    compose_adversarial(&noise, cleans)
}
