use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data::{load_task_stream, synth4, TaskStream};
use crate::diagnostics::PcaBasis;
use crate::error::{contract, Error, Result};
use crate::metrics::ForgetVariant;
use crate::prompt_pool::PoolTrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SeqFt,
    Individual,
    Multitask,
    SharedPrompts,
    TaskSpecificPrompts,
    Pp,
    PpTf,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::SeqFt,
        Method::Individual,
        Method::Multitask,
        Method::SharedPrompts,
        Method::TaskSpecificPrompts,
        Method::Pp,
        Method::PpTf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::SeqFt => "seq_ft",
            Method::Individual => "individual",
            Method::Multitask => "multitask",
            Method::SharedPrompts => "shared_prompts",
            Method::TaskSpecificPrompts => "task_specific_prompts",
            Method::Pp => "pp",
            Method::PpTf => "pp_tf",
        }
    }

    /// Whether the backbone stays frozen and only prompt parameters train.
    pub fn is_prompt_method(self) -> bool {
        matches!(
            self,
            Method::SharedPrompts | Method::TaskSpecificPrompts | Method::Pp | Method::PpTf
        )
    }

    pub fn uses_pool(self) -> bool {
        matches!(self, Method::Pp | Method::PpTf)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::Contract(format!("unknown method '{s}' (expected one of {known:?})"))
            })
    }
}

/// Backbone size; the vocabulary size comes from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneShape {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_encoder: usize,
    pub n_decoder: usize,
    pub max_positions: usize,
}

impl Default for BackboneShape {
    fn default() -> Self {
        let c = BackboneConfig::desk(0);
        Self {
            d_model: c.d_model,
            n_heads: c.n_heads,
            d_ff: c.d_ff,
            n_encoder: c.n_encoder,
            n_decoder: c.n_decoder,
            max_positions: c.max_positions,
        }
    }
}

impl BackboneShape {
    pub fn with_vocab(&self, vocab_size: usize) -> BackboneConfig {
        BackboneConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            n_encoder: self.n_encoder,
            n_decoder: self.n_decoder,
            vocab_size,
            max_positions: self.max_positions,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolSettings {
    pub size: usize,
    pub prompt_len: usize,
    #[serde(flatten)]
    pub train: PoolTrainConfig,
}

impl Default for PoolSettings {
    fn default() -> Self {
        Self {
            size: 20,
            prompt_len: 4,
            train: PoolTrainConfig::default(),
        }
    }
}

/// Multitask pre-training of the backbone before it is frozen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WarmupConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub examples_per_task: usize,
    /// Longest descriptor / padding prefix, in positions.
    pub max_prefix: usize,
    /// Share of warm-up examples that map a padded input to itself.
    pub copy_fraction: f64,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 16,
            learning_rate: 2e-3,
            seed: 1_000_003,
            examples_per_task: 2048,
            max_prefix: 20,
            copy_fraction: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// `synth4` or `jsonl:DIR`.
    pub tasks: String,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    /// Seed for synthetic generation; the run seed when absent.
    pub seed: Option<u64>,
    /// Optional permutation of the stream.
    pub order: Option<Vec<usize>>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            tasks: "synth4".into(),
            train: 512,
            validation: 64,
            test: 64,
            seed: None,
            order: None,
        }
    }
}

impl DataConfig {
    pub fn load(&self, run_seed: u64) -> Result<TaskStream> {
        let stream = if self.tasks == "synth4" {
            synth4((self.train, self.validation, self.test), self.seed.unwrap_or(run_seed))?
        } else if let Some(dir) = self.tasks.strip_prefix("jsonl:") {
            load_task_stream(&PathBuf::from(dir))?
        } else {
            return contract(format!("unknown task source '{}' (synth4 or jsonl:DIR)", self.tasks));
        };
        match &self.order {
            Some(order) => stream.permuted(order),
            None => Ok(stream),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub method: Method,
    pub use_er: bool,
    pub buffer_capacity: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Share of each batch drawn from the replay buffer once it holds data.
    pub replay_mix: f64,
    pub patience: usize,
    pub seed: u64,
    pub prompt_lr: f64,
    pub finetune_lr: f64,
    pub pool: PoolSettings,
    pub backbone: BackboneShape,
    pub warmup: WarmupConfig,
    pub data: DataConfig,
    /// Generation limit as a multiple of the longest training target.
    pub max_len_factor: f64,
    pub diag_queries_per_task: usize,
    pub pca_basis: PcaBasis,
    pub forget_variant: ForgetVariant,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::PpTf,
            use_er: false,
            buffer_capacity: 64,
            epochs: 5,
            batch_size: 16,
            replay_mix: 0.25,
            patience: 2,
            seed: 0,
            prompt_lr: 0.03,
            finetune_lr: 1e-3,
            pool: PoolSettings::default(),
            backbone: BackboneShape::default(),
            warmup: WarmupConfig::default(),
            data: DataConfig::default(),
            max_len_factor: 1.5,
            diag_queries_per_task: 64,
            pca_basis: PcaBasis::PerStage,
            forget_variant: ForgetVariant::Printed,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.use_er && self.buffer_capacity == 0 {
            return contract("experience replay needs a buffer capacity above 0");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return contract("epochs, batch_size and patience must be at least 1");
        }
        if !(0.0..1.0).contains(&self.replay_mix) {
            return contract(format!("replay_mix {} must lie in [0, 1)", self.replay_mix));
        }
        if self.use_er && replay_count(self.replay_mix, self.batch_size) >= self.batch_size {
            return contract("replay_mix leaves no room for new examples in a batch");
        }
        if !(self.prompt_lr > 0.0 && self.finetune_lr > 0.0) {
            return contract("learning rates must be positive");
        }
        if self.pool.prompt_len == 0 || self.pool.size == 0 {
            return contract("pool size and prompt length must be at least 1");
        }
        if !(self.max_len_factor > 0.0) {
            return contract("max_len_factor must be positive");
        }
        self.pool.train.validate(self.pool.size)?;
        self.backbone.with_vocab(FIRST_VOCAB_FLOOR).validate()
    }
}

const FIRST_VOCAB_FLOOR: usize = 16;

/// Replay examples per batch: `⌈mix · batch⌉`.
pub fn replay_count(mix: f64, batch: usize) -> usize {
    (mix * batch as f64).ceil() as usize
}
