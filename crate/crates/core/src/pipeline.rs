//! The stages behind each subcommand, sharing one [`RunConfig`].
//!
//! Output layout under the run directory:
//! `pretrain.ckpt`, `finetune.ckpt`, `*-loss.tsv`, `attack/adv_*.png` with
//! `attack/index.tsv`, `eval.json` / `eval.csv`, and one
//! `<command>.manifest.json` per invocation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::config::{Command, RunConfig};
use crate::encoder::{Encoder, EncoderSpec};
use crate::error::{Error, Result};
use crate::eval::{
    classification_asr, ground_truth_from_ids, retrieval_report, EvalReport, ReportMetadata, RetrievalInputs,
};
use crate::io::{export_adversarial_png_named, read_embeddings, read_png, write_report};
use crate::tensor::{EmbeddingBatch, ImageBatch};
use crate::trainer::{
    finetune, generate_attack, load_checkpoint_expecting, pretrain, resume_pretrain,
    save_checkpoint, LossLog, Stage, TrainHooks,
};

pub const PRETRAIN_CHECKPOINT: &str = "pretrain.ckpt";
pub const FINETUNE_CHECKPOINT: &str = "finetune.ckpt";
pub const ATTACK_DIR: &str = "attack";
pub const ATTACK_INDEX: &str = "index.tsv";
pub const EVAL_REPORT: &str = "eval";
pub const EVAL_BASELINE_REPORT: &str = "eval-clean";

/// Offset separating the clean-image draw from training streams.
const ATTACK_SEED_SALT: u64 = 0x00A7_7AC4;

/// Provenance record written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: Command,
    pub config_fingerprint: String,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
    pub timings_secs: BTreeMap<String, f64>,
    pub artifacts: Vec<PathBuf>,
    pub summary: String,
}

/// What a command produced.
#[derive(Debug, Clone)]
pub struct StageOutput {
    pub artifacts: Vec<PathBuf>,
    pub summary: String,
    pub timings: BTreeMap<String, f64>,
}

impl StageOutput {
    fn new(summary: String) -> Self {
        Self {
            artifacts: Vec::new(),
            summary,
            timings: BTreeMap::new(),
        }
    }
}

/// Runs `command` and writes its manifest. Returns the output and the
/// manifest path.
pub fn run(config: &RunConfig, command: Command) -> Result<(StageOutput, PathBuf)> {
    let out = config.out();
    fs::create_dir_all(&out)?;
    let start = Instant::now();
    let mut output = match command {
        Command::Pretrain => run_pretrain(config)?,
        Command::Finetune => run_finetune(config)?,
        Command::Attack => run_attack(config)?,
        Command::Eval => run_eval(config)?,
        Command::Selftest => run_selftest(config)?,
    };
    output.timings.insert("total".into(), start.elapsed().as_secs_f64());
    let manifest = Manifest {
        command,
        config_fingerprint: config.fingerprint(),
        seed: config.seed,
        versions: BTreeMap::from([
            ("embednoise".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ("manifest".to_string(), "1".to_string()),
        ]),
        timings_secs: output.timings.clone(),
        artifacts: output.artifacts.clone(),
        summary: output.summary.clone(),
    };
    let path = out.join(format!("{}.manifest.json", command.name()));
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Internal(e.to_string()))?;
    fs::write(&path, json + "\n")?;
    Ok((output, path))
}

fn open_log(path: &Path) -> Result<LossLog> {
    if path.exists() {
        fs::remove_file(path)?;
    }
    LossLog::open(path)
}

pub fn run_pretrain(config: &RunConfig) -> Result<StageOutput> {
    let out = config.out();
    let train = config.train_config(Stage::Pretrain);
    let encoder = train.build_primary()?;
    let data = config.pretrain.data.open(&config.base_dir, config.image_size())?;
    let fingerprint = config.fingerprint();
    let log_path = out.join("pretrain-loss.tsv");
    let hooks = TrainHooks {
        log: Some(open_log(&log_path)?),
        checkpoint_dir: (train.checkpoint_every > 0).then(|| out.join("checkpoints")),
        fingerprint: Some(fingerprint.clone()),
    };
    if let Some(dir) = &hooks.checkpoint_dir {
        fs::create_dir_all(dir)?;
    }
    let start = Instant::now();
    let outcome = match &config.pretrain.resume {
        Some(path) => {
            let (ckpt, _) = load_checkpoint_expecting(&config.resolve(path), &fingerprint)?;
            if ckpt.stage != Stage::Pretrain {
                return Err(Error::Config("resume checkpoint is not a pre-training checkpoint".into()));
            }
            resume_pretrain(&train, &encoder, data.images.as_ref(), ckpt, hooks)?
        }
        None => pretrain(&train, &encoder, data.images.as_ref(), hooks)?,
    };
    let elapsed = start.elapsed().as_secs_f64();
    let ckpt_path = out.join(PRETRAIN_CHECKPOINT);
    save_checkpoint(&outcome.checkpoint, &ckpt_path)?;
    let last = outcome.history.last().map_or(f64::NAN, |r| r.loss);
    let mut output = StageOutput::new(format!(
        "pre-trained {} steps, final loss {last:.5}",
        outcome.checkpoint.step
    ));
    output.timings.insert("train".into(), elapsed);
    output.artifacts = vec![ckpt_path, log_path];
    Ok(output)
}

pub fn run_finetune(config: &RunConfig) -> Result<StageOutput> {
    let section = config
        .finetune
        .as_ref()
        .ok_or_else(|| Error::Config("no [finetune] section in the run config".into()))?;
    let out = config.out();
    let fingerprint = config.fingerprint();
    let init_path = section
        .init
        .as_ref()
        .map(|p| config.resolve(p))
        .unwrap_or_else(|| out.join(PRETRAIN_CHECKPOINT));
    let (init, _) = load_checkpoint_expecting(&init_path, &fingerprint)?;
    let train = config.train_config(Stage::Finetune);
    let ensemble = train.build_ensemble()?;
    let size = config.image_size();
    let data = section.data.open(&config.base_dir, size)?;
    let external = section.external.open(&config.base_dir, size)?;
    let log_path = out.join("finetune-loss.tsv");
    let hooks = TrainHooks {
        log: Some(open_log(&log_path)?),
        checkpoint_dir: (train.checkpoint_every > 0).then(|| out.join("checkpoints")),
        fingerprint: Some(fingerprint),
    };
    if let Some(dir) = &hooks.checkpoint_dir {
        fs::create_dir_all(dir)?;
    }
    let start = Instant::now();
    let outcome = finetune(&train, &init, data.images.as_ref(), external.images.as_ref(), &ensemble, hooks)?;
    let elapsed = start.elapsed().as_secs_f64();
    let ckpt_path = out.join(FINETUNE_CHECKPOINT);
    save_checkpoint(&outcome.checkpoint, &ckpt_path)?;
    let last = outcome.history.last().map_or(f64::NAN, |r| r.loss);
    let mut output = StageOutput::new(format!(
        "fine-tuned {} steps, final loss {last:.5}",
        outcome.checkpoint.step
    ));
    output.timings.insert("train".into(), elapsed);
    output.artifacts = vec![ckpt_path, log_path];
    Ok(output)
}

/// Checkpoint used by `attack`: explicit path, else the fine-tuned decoder
/// when a fine-tuning stage is configured, else the pre-trained one.
pub fn attack_checkpoint_path(config: &RunConfig) -> PathBuf {
    match (&config.attack.checkpoint, &config.finetune) {
        (Some(p), _) => config.resolve(p),
        (None, Some(_)) => config.out().join(FINETUNE_CHECKPOINT),
        (None, None) => config.out().join(PRETRAIN_CHECKPOINT),
    }
}

/// One row of `attack/index.tsv`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttackEntry {
    pub name: String,
    pub target_index: usize,
    pub clean_index: usize,
    pub target_id: String,
    pub clean_id: String,
}

pub fn run_attack(config: &RunConfig) -> Result<StageOutput> {
    let fingerprint = config.fingerprint();
    let ckpt_path = attack_checkpoint_path(config);
    let (ckpt, _) = load_checkpoint_expecting(&ckpt_path, &fingerprint)?;
    let decoder = &ckpt.decoder;
    let dc = decoder.config();
    let size = config.image_size();
    if (dc.height, dc.width, dc.embed_dim) != (size.0, size.1, config.model.embed_dim) {
        return Err(Error::Dimension(format!(
            "checkpoint {} decodes {}-d embeddings to {}x{} noise, config expects {}-d and {}x{}",
            ckpt_path.display(),
            dc.embed_dim,
            dc.height,
            dc.width,
            config.model.embed_dim,
            size.0,
            size.1
        )));
    }
    let encoder = config.train_config(Stage::Pretrain).build_primary()?;
    let targets_src = config.attack.targets.open(&config.base_dir, size)?;
    let cleans_src = config.attack.cleans.open(&config.base_dir, size)?;
    let n = targets_src.images.len();
    let target_index: Vec<usize> = (0..n).collect();
    let targets = targets_src.images.load_batch(&target_index)?;

    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(config.seed ^ ATTACK_SEED_SALT);
    let clean_index = crate::augment::sample_unrelated_indices(cleans_src.images.len(), n, &mut rng)?;
    let cleans = cleans_src.images.load_batch(&clean_index)?;

    let start = Instant::now();
    let adversarial = generate_attack(decoder, &encoder, &targets, &cleans)?;
    let entries: Vec<AttackEntry> = (0..n)
        .map(|i| AttackEntry {
            name: format!("adv_{i:05}"),
            target_index: i,
            clean_index: clean_index[i],
            target_id: targets_src.ids[i].clone(),
            clean_id: cleans_src.ids[clean_index[i]].clone(),
        })
        .collect();
    let dir = config.out().join(ATTACK_DIR);
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    let names: Vec<String> = entries.iter().map(|e| e.name.clone()).collect();
    let mut artifacts = export_adversarial_png_named(&adversarial, &cleans, dc.epsilon, &dir, &names)?;
    let index_path = dir.join(ATTACK_INDEX);
    write_attack_index(&index_path, &fingerprint, &entries)?;
    artifacts.push(index_path);
    let mut output = StageOutput::new(format!("exported {n} adversarial images to {}", dir.display()));
    output.timings.insert("attack".into(), start.elapsed().as_secs_f64());
    output.artifacts = artifacts;
    Ok(output)
}

fn write_attack_index(path: &Path, fingerprint: &str, entries: &[AttackEntry]) -> Result<()> {
    let mut text = format!("# config_fingerprint {fingerprint}\nname\ttarget_index\tclean_index\ttarget_id\tclean_id\n");
    for e in entries {
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            e.name, e.target_index, e.clean_index, e.target_id, e.clean_id
        ));
    }
    fs::write(path, text)?;
    Ok(())
}

/// Reads `attack/index.tsv`, returning the stamped fingerprint and rows.
pub fn read_attack_index(path: &Path) -> Result<(String, Vec<AttackEntry>)> {
    let bad = |reason: String| Error::Load {
        path: path.to_path_buf(),
        reason,
    };
    let text = fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
    let mut lines = text.lines();
    let fingerprint = lines
        .next()
        .and_then(|l| l.strip_prefix("# config_fingerprint "))
        .ok_or_else(|| bad("missing fingerprint line".into()))?
        .to_string();
    lines.next();
    let mut entries = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(bad(format!("malformed row: {line}")));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("{s}: {e}")));
        entries.push(AttackEntry {
            name: f[0].to_string(),
            target_index: num(f[1])?,
            clean_index: num(f[2])?,
            target_id: f[3].to_string(),
            clean_id: f[4].to_string(),
        });
    }
    Ok((fingerprint, entries))
}

fn stack_rows(parts: &[&EmbeddingBatch]) -> Result<EmbeddingBatch> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    let joined: Array2<f64> = concatenate(Axis(0), &views).map_err(|e| Error::Dimension(e.to_string()))?;
    EmbeddingBatch::new(joined)
}

/// Evaluates the exported images.
///
/// The adversarial images are re-read from disk and encoded by the victim
/// encoder. Caption embeddings come from `eval.text_embeddings` when given;
/// otherwise each target's own embedding stands in for its caption. The
/// image gallery holds the adversarial images followed by the distractors.
/// The classification check offers each sample `eval.classes` target
/// embeddings and counts hits on its own target.
pub fn run_eval(config: &RunConfig) -> Result<StageOutput> {
    let out = config.out();
    let fingerprint = config.fingerprint();
    let dir = out.join(ATTACK_DIR);
    let (stamped, entries) = read_attack_index(&dir.join(ATTACK_INDEX))?;
    if stamped != fingerprint {
        log::warn!("attack outputs were produced by config {stamped} but the current config is {fingerprint}");
    }
    if entries.is_empty() {
        return Err(Error::EmptySource("attack index lists no images".into()));
    }
    let size = config.image_size();
    let spec = config.resolve_spec(config.eval.encoder.as_ref().unwrap_or(&config.model.primary));
    let victim = build_victim(&spec, size, config.model.embed_dim)?;

    let start = Instant::now();
    let adv_images: Vec<_> = entries
        .iter()
        .map(|e| read_png(&dir.join(format!("{}.png", e.name))))
        .collect::<Result<_>>()?;
    let adv = ImageBatch::stack(&adv_images)?;
    let targets_src = config.attack.targets.open(&config.base_dir, size)?;
    let cleans_src = config.attack.cleans.open(&config.base_dir, size)?;
    let targets = targets_src
        .images
        .load_batch(&entries.iter().map(|e| e.target_index).collect::<Vec<_>>())?;
    let cleans = cleans_src
        .images
        .load_batch(&entries.iter().map(|e| e.clean_index).collect::<Vec<_>>())?;
    let target_ids: Vec<String> = entries.iter().map(|e| e.target_id.clone()).collect();

    let z_adv = victim.encode(&adv)?;
    let z_clean = victim.encode(&cleans)?;
    let z_target = victim.encode(&targets)?;

    let (texts, text_ids) = match &config.eval.text_embeddings {
        Some(path) => read_embeddings(&config.resolve(path))?,
        None => (z_target.clone(), target_ids.clone()),
    };
    let (distractors, distractor_ids) = match &config.eval.distractors {
        Some(src) => {
            let opened = src.open(&config.base_dir, size)?;
            let all: Vec<usize> = (0..opened.images.len()).collect();
            let z = victim.encode(&opened.images.load_batch(&all)?)?;
            (Some(z), opened.ids.iter().map(|id| format!("distractor:{id}")).collect())
        }
        None => (None, Vec::new()),
    };

    let mut sizes = BTreeMap::from([
        ("adversarial".to_string(), entries.len()),
        ("texts".to_string(), texts.len()),
        ("distractors".to_string(), distractor_ids.len()),
    ]);
    sizes.insert("classes".to_string(), config.eval.classes);
    let metadata = ReportMetadata {
        config_fingerprint: fingerprint,
        dataset_sizes: sizes,
    };

    let report = |queries: &EmbeddingBatch| -> Result<EvalReport> {
        let mut parts = vec![queries];
        if let Some(d) = &distractors {
            parts.push(d);
        }
        let gallery = stack_rows(&parts)?;
        let gallery_ids: Vec<String> = target_ids.iter().chain(&distractor_ids).cloned().collect();
        let text_truth = ground_truth_from_ids(&target_ids, &text_ids);
        let image_truth = ground_truth_from_ids(&text_ids, &gallery_ids);
        let mut r = retrieval_report(
            &RetrievalInputs {
                adv_images: queries,
                texts: &texts,
                image_gallery: &gallery,
                text_truth: &text_truth,
                image_truth: &image_truth,
            },
            metadata.clone(),
        )?;
        r.classification_asr = Some(toy_classification(queries, &z_target, config.eval.classes)?);
        Ok(r)
    };
    let adv_report = report(&z_adv)?;
    let clean_report = report(&z_clean)?;
    let elapsed = start.elapsed().as_secs_f64();

    let (json, csv) = write_report(&adv_report, &out.join(EVAL_REPORT))?;
    let (bjson, bcsv) = write_report(&clean_report, &out.join(EVAL_BASELINE_REPORT))?;
    let mean_cos = |z: &EmbeddingBatch| -> Result<f64> {
        let c = z.rowwise_cosine(&z_target)?;
        Ok(c.iter().sum::<f64>() / c.len() as f64)
    };
    let summary = format!(
        "adversarial: {} cos {:.4}\nclean:       {} cos {:.4}",
        adv_report.summary(),
        mean_cos(&z_adv)?,
        clean_report.summary(),
        mean_cos(&z_clean)?
    );
    let mut output = StageOutput::new(summary);
    output.timings.insert("eval".into(), elapsed);
    output.artifacts = vec![json, csv, bjson, bcsv];
    Ok(output)
}

fn build_victim(spec: &EncoderSpec, size: (usize, usize), embed_dim: usize) -> Result<Encoder> {
    match spec {
        EncoderSpec::Toy { .. } => spec.build(size, embed_dim),
        EncoderSpec::Adapter { config } => crate::encoder::load_external_encoder(config),
    }
}

/// Candidate set for sample `i`: `classes` consecutive target embeddings
/// arranged so that the correct one sits at position `i % classes`.
fn toy_classification(queries: &EmbeddingBatch, targets: &EmbeddingBatch, classes: usize) -> Result<f64> {
    let n = targets.len();
    if n < classes {
        return Err(Error::Config(format!(
            "classification check needs at least {classes} targets, got {n}"
        )));
    }
    let mut candidates = Vec::with_capacity(n);
    let mut gt = Vec::with_capacity(n);
    for i in 0..n {
        let g = i % classes;
        let rows: Vec<usize> = (0..classes).map(|j| (i + n + j - g) % n).collect();
        candidates.push(targets.select(&rows));
        gt.push(g);
    }
    classification_asr(queries, &candidates, &gt)
}

pub fn run_selftest(config: &RunConfig) -> Result<StageOutput> {
    let start = Instant::now();
    let results = crate::selftest::run_checks(config);
    let passed = results.iter().filter(|r| r.passed).count();
    let mut lines: Vec<String> = results
        .iter()
        .map(|r| format!("{} {:<28} {}", if r.passed { "ok  " } else { "FAIL" }, r.name, r.detail))
        .collect();
    lines.push(format!("selftest: {passed}/{} invariant checks passed", results.len()));
    let summary = lines.join("\n");
    if passed != results.len() {
        return Err(Error::Contract(summary));
    }
    let mut output = StageOutput::new(summary);
    output.timings.insert("selftest".into(), start.elapsed().as_secs_f64());
    Ok(output)
}
