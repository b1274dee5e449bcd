//! Run configuration: every section in one TOML file.
//!
//! ```toml
//! seed = 7
//! out_dir = "runs/a"
//!
//! [corpus]
//! pretrain_pairs = 512
//!
//! [training]
//! pretrain_steps = 2000
//!
//! [training.codec]
//! steps = 3000
//!
//! [losses.weights]
//! pixel = 4.0
//! ```
//!
//! Missing keys take their defaults and unknown keys are rejected. The
//! seeds of the corpus, encoder and inference sections are derived from the
//! top-level `seed` and may not be set directly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::conditioning::EncoderConfig;
use crate::data::CorpusConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::pipeline::{InferenceConfig, ModelConfig, Stage, TrainConfig};
use crate::rng::derive_seed;
use crate::transformer::TransformerConfig;
use crate::vq::{VqConfig, VqTrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub codec: VqTrainConfig,
    pub pretrain_steps: u64,
    pub finetune_steps: u64,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let (p, f) = (TrainConfig::pretrain(0), TrainConfig::finetune(0));
        Self { codec: VqTrainConfig::default(), pretrain_steps: p.steps, finetune_steps: f.steps, batch_size: p.batch_size, lr: p.lr }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Root of every artifact; relative paths resolve against the working
    /// directory.
    pub out_dir: Option<PathBuf>,
    pub corpus: CorpusConfig,
    pub codec: VqConfig,
    pub encoder: EncoderConfig,
    pub transformer: TransformerConfig,
    pub training: TrainingConfig,
    pub losses: LossConfig,
    pub inference: InferenceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let cfg = Self {
            seed: 0,
            out_dir: None,
            corpus: CorpusConfig::default(),
            codec: VqConfig::default(),
            encoder: EncoderConfig::default(),
            transformer: TransformerConfig::default(),
            training: TrainingConfig::default(),
            losses: LossConfig::default(),
            inference: InferenceConfig::default(),
        };
        cfg.with_seed(0)
    }
}

const DERIVED_SEEDS: [&str; 3] = ["corpus", "encoder", "inference"];

impl RunConfig {
    /// Parses a config file body. Errors name the offending key.
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        for section in DERIVED_SEEDS {
            if table.get(section).and_then(|s| s.get("seed")).is_some() {
                return Err(Error::Config(format!("unknown field `{section}.seed`: section seeds derive from the top-level `seed`")));
            }
        }
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.set_seed(cfg.seed);
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Sets the master seed and every seed derived from it.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.corpus.seed = derive_seed(seed, "corpus");
        self.encoder.seed = derive_seed(seed, "encoder");
        self.inference.seed = derive_seed(seed, "inference");
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.set_seed(seed);
        self
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { codec: self.codec.clone(), encoder: self.encoder.clone(), transformer: self.transformer.clone() }
    }

    /// Seed of a model-building or training consumer.
    pub fn stage_seed(&self, stage: Stage) -> u64 {
        derive_seed(self.seed, stage.name())
    }

    pub fn train_config(&self, stage: Stage) -> TrainConfig {
        let t = &self.training;
        let seed = self.stage_seed(stage);
        match stage {
            Stage::Finetune => TrainConfig { steps: t.finetune_steps, batch_size: t.batch_size, lr: t.lr, ..TrainConfig::finetune(seed) },
            _ => TrainConfig { steps: t.pretrain_steps, batch_size: t.batch_size, lr: t.lr, ..TrainConfig::pretrain(seed) },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model_config().validate()?;
        self.train_config(Stage::Pretrain).validate()?;
        self.train_config(Stage::Finetune).validate()?;
        if self.training.codec.steps == 0 || self.training.codec.batch_size == 0 {
            return Err(Error::Config("codec training needs positive steps and batch size".into()));
        }
        self.losses.validate(self.encoder.channels.len())?;
        self.inference.validate()?;
        if self.corpus.resolution != self.codec.resolution {
            return Err(Error::Config(format!(
                "corpus resolution {} differs from codec resolution {}",
                self.corpus.resolution, self.codec.resolution
            )));
        }
        if self.corpus.num_styles() != self.transformer.num_styles {
            return Err(Error::Config(format!(
                "corpus has {} styles, transformer has {} anchors",
                self.corpus.num_styles(),
                self.transformer.num_styles
            )));
        }
        let (a, b) = self.inference.anchors;
        if a == b || a.max(b) >= self.transformer.num_styles {
            return Err(Error::Config(format!("inference anchors ({a}, {b}) must be two distinct styles")));
        }
        Ok(())
    }
}
