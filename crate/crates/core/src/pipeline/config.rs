use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentConfig, DEFAULT_RATE};
use crate::model::ModelConfig;
use crate::momentum::{DEFAULT_MOMENTUM, DEFAULT_QUEUE_CAPACITY};
use crate::numerics::DEFAULT_LEARNING_RATE;
use crate::objectives::{TaskFlags, DEFAULT_TEMPERATURE};
use crate::{Error, Result};

pub const DEFAULT_FINETUNE_TEMPERATURE: f64 = 0.1;

/// Selection rates of the input corruptions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Rates {
    pub token_mask: f64,
    pub sentence_shuffle: f64,
    pub frame_shuffle: f64,
    pub frame_mask: f64,
    pub full_mask: f64,
}

impl Default for Rates {
    fn default() -> Self {
        Self {
            token_mask: DEFAULT_RATE,
            sentence_shuffle: DEFAULT_RATE,
            frame_shuffle: DEFAULT_RATE,
            frame_mask: DEFAULT_RATE,
            full_mask: DEFAULT_RATE,
        }
    }
}

/// Fine-tuning and evaluation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Temperature of the in-batch retrieval contrast. Scores are cosines,
    /// so this sits well below the pre-training temperature.
    pub temperature: f64,
    /// Negatives per query in the retrieval protocol.
    pub negatives: usize,
    pub beam: usize,
    pub max_caption_len: usize,
    /// Class counts for the classification heads.
    pub plot_classes: usize,
    pub top_cate_classes: usize,
    pub leaf_cate_classes: usize,
    /// Evaluation split; the training data is used when absent.
    pub eval_data: Option<PathBuf>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 16,
            learning_rate: DEFAULT_LEARNING_RATE,
            temperature: DEFAULT_FINETUNE_TEMPERATURE,
            negatives: 100,
            beam: 5,
            max_caption_len: 16,
            plot_classes: 4,
            top_cate_classes: 4,
            leaf_cate_classes: 8,
            eval_data: None,
        }
    }
}

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Task preset (`M1`..`M6`) applied before any explicit `[tasks]` keys.
    pub preset: Option<String>,
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Total optimizer steps; when 0, `epochs` full passes are run.
    pub steps: u64,
    pub epochs: u64,
    pub temperature: f64,
    pub momentum: f64,
    pub queue_capacity: usize,
    /// Queue-based losses stay off until every queue holds this many
    /// entries.
    pub min_negatives: usize,
    /// Fill the queues with key-network encodings of the whole dataset
    /// before the first step.
    pub prefill_queues: bool,
    /// Write an intermediate checkpoint every this many steps (0: never).
    pub checkpoint_every: u64,
    /// Store optimizer state, key network and queues in checkpoints.
    pub include_queues: bool,
    pub model: ModelConfig,
    pub tasks: TaskFlags,
    pub rates: Rates,
    pub finetune: FinetuneConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            preset: None,
            seed: 0,
            data: None,
            batch_size: 16,
            learning_rate: DEFAULT_LEARNING_RATE,
            steps: 0,
            epochs: 1,
            temperature: DEFAULT_TEMPERATURE,
            momentum: DEFAULT_MOMENTUM,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            min_negatives: 16,
            prefill_queues: true,
            checkpoint_every: 0,
            include_queues: false,
            model: ModelConfig::default(),
            tasks: TaskFlags::default(),
            rates: Rates::default(),
            finetune: FinetuneConfig::default(),
        }
    }
}

/// Overlay `over` onto `base`, recursing into tables.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl TrainConfig {
    /// Parse the `key = value` / `[section]` text format. A `preset` key
    /// selects the task flags first; explicit keys then override it.
    /// Unknown keys are rejected.
    pub fn from_str(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let mut base = Self::default();
        if let Some(p) = user.get("preset") {
            let name = p
                .as_str()
                .ok_or_else(|| Error::Config("`preset` must be a string".into()))?;
            base.tasks = TaskFlags::preset(name)?;
        }
        let mut table = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut table, user);
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a config file. Relative data paths are taken relative to the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::format(path, msg),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data, &mut cfg.finetune.eval_data].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.augment_config().validate()?;
        if self.batch_size == 0 || self.finetune.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.temperature > 0.0) || !(self.finetune.temperature > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1], got {}", self.momentum)));
        }
        if self.queue_capacity == 0 {
            return Err(Error::Config("queue_capacity must be positive".into()));
        }
        if self.min_negatives == 0 {
            return Err(Error::Config("min_negatives must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.finetune.learning_rate > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.finetune.beam == 0 {
            return Err(Error::Config("beam must be at least 1".into()));
        }
        if !self.tasks.any() {
            return Err(Error::Config("every pre-training task is disabled".into()));
        }
        Ok(())
    }

    /// Corruption rates, with the corruption of a disabled task switched off.
    pub fn augment_config(&self) -> AugmentConfig {
        let gate = |on: bool, r: f64| if on { r } else { 0.0 };
        AugmentConfig {
            token_mask_rate: gate(self.tasks.mlm, self.rates.token_mask),
            sentence_shuffle_rate: gate(self.tasks.msom, self.rates.sentence_shuffle),
            frame_shuffle_rate: gate(self.tasks.mfom, self.rates.frame_shuffle),
            frame_mask_rate: gate(self.tasks.intra_mfm, self.rates.frame_mask),
            full_mask_rate: gate(self.tasks.msg, self.rates.full_mask),
        }
    }
}
