//! Run configuration files.
//!
//! One TOML document drives every subcommand. Relative paths are resolved
//! against the directory holding the file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::ShuffleMode;
use crate::encoder::EncoderSpec;
use crate::error::{Error, Result};
use crate::io::{load_dataset, synthetic_images, DatasetKind};
use crate::nn::AdamW;
use crate::objectives::{Objective, TemperatureSchedule};
use crate::tensor::ImageSource;
use crate::trainer::{Stage, TrainConfig};

/// Configuration shipped with the crate: synthetic data, toy encoder.
pub const TOY_CONFIG: &str = include_str!("../configs/toy.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Pretrain,
    Finetune,
    Attack,
    Eval,
    Selftest,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Pretrain => "pretrain",
            Command::Finetune => "finetune",
            Command::Attack => "attack",
            Command::Eval => "eval",
            Command::Selftest => "selftest",
        }
    }
}

/// Where images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic { count: usize, seed: u64 },
    Directory { path: PathBuf },
    ShardedArchive { path: PathBuf },
}

/// An opened source together with per-image identifiers.
pub struct OpenedSource {
    pub images: Box<dyn ImageSource>,
    pub ids: Vec<String>,
}

impl DataSource {
    pub fn open(&self, base: &Path, (height, width): (usize, usize)) -> Result<OpenedSource> {
        match self {
            DataSource::Synthetic { count, seed } => {
                if *count == 0 {
                    return Err(Error::EmptySource(format!("synthetic source with seed {seed} has count 0")));
                }
                Ok(OpenedSource {
                    images: Box::new(synthetic_images(*count, height, width, *seed)),
                    ids: (0..*count).map(|i| format!("syn{seed}-{i:05}")).collect(),
                })
            }
            DataSource::Directory { path } => open_on_disk(&base.join(path), DatasetKind::Directory, (height, width)),
            DataSource::ShardedArchive { path } => {
                open_on_disk(&base.join(path), DatasetKind::ShardedArchive, (height, width))
            }
        }
    }
}

fn open_on_disk(path: &Path, kind: DatasetKind, (h, w): (usize, usize)) -> Result<OpenedSource> {
    let handle = load_dataset(path, kind)?.with_resize(h, w);
    let ids = handle.ids();
    Ok(OpenedSource {
        images: Box::new(handle),
        ids,
    })
}

/// Settings shared by every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub embed_dim: usize,
    pub epsilon: f64,
    pub grid_channels: usize,
    pub hidden_channels: usize,
    pub primary: EncoderSpec,
    pub auxiliaries: Vec<EncoderSpec>,
    pub ensemble_weights: Option<Vec<f64>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            image_height: t.image_height,
            image_width: t.image_width,
            embed_dim: t.embed_dim,
            epsilon: t.epsilon,
            grid_channels: t.grid_channels,
            hidden_channels: t.hidden_channels,
            primary: t.primary,
            auxiliaries: t.auxiliaries,
            ensemble_weights: t.ensemble_weights,
        }
    }
}

/// Optimisation settings of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub objective: Objective,
    pub k: usize,
    pub batch_size: usize,
    pub steps: u64,
    pub epochs: u64,
    pub learning_rate: f64,
    pub lr_floor: f64,
    pub optimizer: AdamW,
    pub temperature: TemperatureSchedule,
    pub fixed_tau: f64,
    pub shuffle: ShuffleMode,
    pub checkpoint_every: u64,
    pub budget_check_every: u64,
}

impl Default for StageConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            objective: t.objective,
            k: t.k,
            batch_size: t.batch_size,
            steps: t.steps,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            lr_floor: t.lr_floor,
            optimizer: t.optimizer,
            temperature: t.temperature,
            fixed_tau: t.fixed_tau,
            shuffle: t.shuffle,
            checkpoint_every: t.checkpoint_every,
            budget_check_every: t.budget_check_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub data: DataSource,
    /// Continue from this pre-training checkpoint instead of starting fresh.
    #[serde(default)]
    pub resume: Option<PathBuf>,
    #[serde(default)]
    pub train: StageConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    /// Downstream images whose embeddings drive the decoder.
    pub data: DataSource,
    /// Unrelated images that carry the noise.
    pub external: DataSource,
    /// Starting checkpoint; defaults to the pre-training output.
    #[serde(default)]
    pub init: Option<PathBuf>,
    #[serde(default)]
    pub train: StageConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    /// Decoder checkpoint; defaults to the latest stage output.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    pub targets: DataSource,
    pub cleans: DataSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Victim encoder; defaults to the primary surrogate.
    pub encoder: Option<EncoderSpec>,
    /// Clean images padding the retrieval gallery.
    pub distractors: Option<DataSource>,
    /// Precomputed caption embeddings; ids of the form `<target id>#<n>`.
    pub text_embeddings: Option<PathBuf>,
    /// Candidate labels per sample in the classification check.
    pub classes: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            encoder: None,
            distractors: None,
            text_embeddings: None,
            classes: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Set by the command line; not part of the fingerprint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<Command>,
    #[serde(default)]
    pub seed: u64,
    /// Not part of the fingerprint.
    pub out_dir: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub finetune: Option<FinetuneSection>,
    pub attack: AttackSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl RunConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(config_err)?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base)
    }

    /// The bundled configuration, rooted at the current directory.
    pub fn toy() -> Self {
        Self::parse(TOY_CONFIG, Path::new(".")).expect("bundled configuration is valid")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config(Stage::Pretrain).validate()?;
        if self.finetune.is_some() {
            self.train_config(Stage::Finetune).validate()?;
        }
        if self.eval.classes < 2 {
            return Err(Error::Config("eval.classes must be at least 2".into()));
        }
        Ok(())
    }

    /// Content hash over everything except the command and output directory.
    pub fn fingerprint(&self) -> String {
        let mut canonical = self.clone();
        canonical.command = None;
        canonical.out_dir = PathBuf::new();
        let json = serde_json::to_vec(&canonical).expect("run configuration serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.model.image_height, self.model.image_width)
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        self.base_dir.join(path)
    }

    /// Makes adapter config paths absolute relative to the run config.
    pub fn resolve_spec(&self, spec: &EncoderSpec) -> EncoderSpec {
        match spec {
            EncoderSpec::Toy { seed } => EncoderSpec::Toy { seed: *seed },
            EncoderSpec::Adapter { config } => EncoderSpec::Adapter {
                config: self.resolve(config),
            },
        }
    }

    /// Output directory, resolved against the config location.
    pub fn out(&self) -> PathBuf {
        self.resolve(&self.out_dir)
    }

    /// Training configuration for `stage`. The fine-tuning stage falls back
    /// to defaults when the section is absent.
    pub fn train_config(&self, stage: Stage) -> TrainConfig {
        let s = match stage {
            Stage::Pretrain => self.pretrain.train.clone(),
            Stage::Finetune => self.finetune.as_ref().map(|f| f.train.clone()).unwrap_or_default(),
        };
        let m = &self.model;
        TrainConfig {
            stage,
            objective: s.objective,
            epsilon: m.epsilon,
            k: s.k,
            batch_size: s.batch_size,
            steps: s.steps,
            epochs: s.epochs,
            learning_rate: s.learning_rate,
            lr_floor: s.lr_floor,
            optimizer: s.optimizer,
            temperature: s.temperature,
            fixed_tau: s.fixed_tau,
            seed: self.seed,
            shuffle: s.shuffle,
            image_height: m.image_height,
            image_width: m.image_width,
            embed_dim: m.embed_dim,
            grid_channels: m.grid_channels,
            hidden_channels: m.hidden_channels,
            checkpoint_every: s.checkpoint_every,
            budget_check_every: s.budget_check_every,
            primary: self.resolve_spec(&m.primary),
            auxiliaries: match stage {
                Stage::Pretrain => Vec::new(),
                Stage::Finetune => m.auxiliaries.iter().map(|s| self.resolve_spec(s)).collect(),
            },
            ensemble_weights: match stage {
                Stage::Pretrain => None,
                Stage::Finetune => m.ensemble_weights.clone(),
            },
        }
    }
}
