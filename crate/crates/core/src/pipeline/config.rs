use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribution::Variant;
use crate::error::{Error, Result};
use crate::model::{Activation, ModelConfig};
use crate::selection::SelectionConfig;
use crate::training::{FinetuneConfig, TrainConfig};
use crate::world::{CorpusMix, SuiteSizes, WorldSizes};

/// Model dimensions; vocabulary and context length come from the world.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub num_kv_heads: usize,
    pub intermediate_size: usize,
    pub max_seq_len: usize,
    pub activation: Activation,
}

impl Default for ModelShape {
    fn default() -> Self {
        let d = ModelConfig::desk(0, 20);
        Self {
            num_layers: d.num_layers,
            hidden_size: d.hidden_size,
            num_heads: d.num_heads,
            head_dim: d.head_dim,
            num_kv_heads: d.num_kv_heads,
            intermediate_size: d.intermediate_size,
            max_seq_len: d.max_seq_len,
            activation: d.activation,
        }
    }
}

impl ModelShape {
    pub fn with_vocab(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            num_layers: self.num_layers,
            hidden_size: self.hidden_size,
            num_heads: self.num_heads,
            head_dim: self.head_dim,
            num_kv_heads: self.num_kv_heads,
            intermediate_size: self.intermediate_size,
            vocab_size,
            max_seq_len: self.max_seq_len,
            activation: self.activation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub mix: CorpusMix,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            steps: 3000,
            lr: 3e-3,
            batch_size: 64,
            weight_decay: 0.01,
            label_smoothing: 0.0,
            mix: CorpusMix::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreSection {
    pub variant: Variant,
    /// Exact-effect samples drawn from each score decile.
    pub taylor_per_decile: usize,
}

impl Default for ScoreSection {
    fn default() -> Self {
        Self {
            variant: Variant::Max,
            taylor_per_decile: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub random_seeds: usize,
    pub bootstrap_samples: usize,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            random_seeds: 10,
            bootstrap_samples: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub steps: usize,
    pub batch_size: usize,
    /// One fine-tuning run per learning rate and strategy.
    pub lrs: Vec<f64>,
    pub eval_every: usize,
    pub budget_fraction: f64,
    pub bottom_seed: u64,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 8,
            lrs: vec![1e-4, 3e-4, 5e-4],
            eval_every: 50,
            budget_fraction: 0.1,
            bottom_seed: 7,
        }
    }
}

impl FinetuneSection {
    pub fn run_config(&self, lr: f64, seed: u64) -> FinetuneConfig {
        FinetuneConfig {
            steps: self.steps,
            lr,
            batch_size: self.batch_size,
            weight_decay: 0.0,
            seed,
            eval_every: self.eval_every,
        }
    }
}

/// Everything a pipeline run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds the world, initialization, batches and every random draw.
    pub seed: u64,
    pub world: WorldSizes,
    pub suite: SuiteSizes,
    pub model: ModelShape,
    pub pretrain: PretrainSection,
    pub score: ScoreSection,
    pub selection: SelectionConfig,
    pub ablation: AblationSection,
    pub finetune: FinetuneSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            world: WorldSizes::default(),
            suite: SuiteSizes::default(),
            model: ModelShape::default(),
            pretrain: PretrainSection::default(),
            score: ScoreSection::default(),
            selection: SelectionConfig::default(),
            ablation: AblationSection::default(),
            finetune: FinetuneSection::default(),
        }
    }
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    /// Parses `text`, then applies `key.path=value` overrides. Values are read
    /// as TOML literals, falling back to plain strings.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("config: {e}")))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))?;
            let value = parse_literal(raw.trim());
            set_path(&mut table, key.trim(), value)?;
        }
        let cfg: RunConfig = table.try_into().map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.selection.validate()?;
        if self.pretrain.batch_size == 0 || self.finetune.batch_size == 0 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        if !(self.pretrain.lr > 0.0) {
            return Err(Error::Config(format!("pretraining lr {} must be positive", self.pretrain.lr)));
        }
        if self.finetune.lrs.iter().any(|lr| !(*lr > 0.0)) {
            return Err(Error::Config("fine-tuning lrs must be positive".into()));
        }
        if self.ablation.random_seeds < 2 {
            return Err(Error::Config("at least two random-mask seeds are needed".into()));
        }
        Ok(())
    }

    /// Digest of the canonical serialization; stamped into every artifact.
    pub fn hash(&self) -> String {
        sha_hex(serde_json::to_string(self).expect("config serializes").as_bytes())[..16].to_string()
    }

    /// Digest of the settings that determine the trained model.
    pub fn model_key(&self) -> String {
        let key = serde_json::json!({
            "seed": self.seed,
            "world": self.world,
            "model": self.model,
            "pretrain": self.pretrain,
        });
        sha_hex(key.to_string().as_bytes())[..16].to_string()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.pretrain.steps,
            lr: self.pretrain.lr,
            batch_size: self.pretrain.batch_size,
            weight_decay: self.pretrain.weight_decay,
            seed: self.seed,
            eval_every: 0,
            label_smoothing: self.pretrain.label_smoothing,
            choices: Vec::new(),
        }
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, prefix) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in prefix {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path '{key}': '{p}' is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
