use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{BackboneShape, WarmupConfig};
use super::batch_step;
use crate::backbone::{Backbone, BackboneConfig, BACKBONE_GROUPS};
use crate::checkpoint::{self, Record};
use crate::data::{synth4, TaskStream, Vocabulary, MAX_TASKS, PAD};
use crate::error::{contract, Error, Result};
use crate::tensor::{Adam, AdamConfig, ParamStore, Tape, TrainScope};

/// A backbone ready for continual learning, with the vocabulary it was trained on.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub vocab: Vocabulary,
    pub backbone: Backbone,
    pub store: ParamStore,
}

/// One warm-up item: token ids in, target ids (ending in EOS) out.
struct WarmItem {
    tokens: Vec<u32>,
    target: Vec<u32>,
}

/// Characters the warm-up corpus uses.
pub fn warmup_vocabulary(cfg: &WarmupConfig, stream: &TaskStream) -> Result<Vocabulary> {
    let corpus = synth4((cfg.examples_per_task, 1, 1), cfg.seed)?;
    let chars = corpus
        .vocabulary()
        .chars()
        .iter()
        .chain(stream.vocabulary().chars())
        .copied()
        .collect::<Vec<_>>();
    Ok(Vocabulary::from_chars(chars))
}

/// Multitask pre-training on the synthetic generators.
///
/// Half the items (by `copy_fraction`) carry `r ∈ [0, R]` PAD tokens before
/// the input and ask for the input back; the rest carry their task's
/// descriptor repeated `r ∈ [1, R]` times and ask for the task target. A
/// frozen copy can then be steered to any task by a learned prefix.
pub fn warmup(cfg: &WarmupConfig, shape: &BackboneShape, stream: &TaskStream) -> Result<Pretrained> {
    if cfg.batch_size == 0 || cfg.examples_per_task == 0 {
        return contract("warm-up batch size and corpus size must be positive");
    }
    let corpus = synth4((cfg.examples_per_task, 1, 1), cfg.seed)?;
    if corpus.len() > MAX_TASKS {
        return contract("too many warm-up tasks");
    }
    let vocab = warmup_vocabulary(cfg, stream)?;
    let bb_cfg = shape.with_vocab(vocab.len());
    bb_cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let backbone = Backbone::init(bb_cfg, &mut store, &mut rng)?;
    backbone.set_trainable(&mut store, &TrainScope::All)?;

    let mut adam = Adam::new(AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    });
    for step in 0..cfg.steps {
        let items: Vec<WarmItem> = (0..cfg.batch_size)
            .map(|_| {
                let t = rng.gen_range(0..corpus.len());
                let task = &corpus.tasks[t];
                let ex = &task.train[rng.gen_range(0..task.train.len())];
                let body = vocab.encode(&ex.input);
                if rng.gen_bool(cfg.copy_fraction) {
                    let r = rng.gen_range(0..=cfg.max_prefix);
                    let mut tokens = vec![PAD; r];
                    tokens.extend(&body);
                    WarmItem {
                        tokens,
                        target: vocab.encode_target(&ex.input),
                    }
                } else {
                    let r = rng.gen_range(1..=cfg.max_prefix.max(1));
                    let mut tokens = vec![task.descriptor(); r];
                    tokens.extend(&body);
                    WarmItem {
                        tokens,
                        target: vocab.encode_target(&ex.target),
                    }
                }
            })
            .collect();
        let loss = |tape: &mut Tape, s: &ParamStore, it: &WarmItem| {
            Ok((backbone.lm_loss_tape(tape, s, None, &it.tokens, &it.target)?, Vec::new()))
        };
        batch_step(&mut store, &mut adam, &items, loss, 0, step)?;
    }
    backbone.set_trainable(&mut store, &TrainScope::None)?;
    Ok(Pretrained {
        vocab,
        backbone,
        store,
    })
}

fn config_record(c: &BackboneConfig) -> Record {
    Record::vector(
        "meta.backbone",
        [c.d_model, c.n_heads, c.d_ff, c.n_encoder, c.n_decoder, c.vocab_size, c.max_positions]
            .iter()
            .map(|&v| v as f64)
            .collect(),
    )
}

impl Pretrained {
    pub fn records(&self) -> Vec<Record> {
        let mut out = vec![
            Record::vector(
                "meta.vocab",
                self.vocab.chars().iter().map(|&c| c as u32 as f64).collect(),
            ),
            config_record(self.backbone.config()),
        ];
        out.extend(checkpoint::store_records(&self.store, &BACKBONE_GROUPS));
        out
    }

    pub fn from_records(records: &[Record]) -> Result<Self> {
        let meta = |name: &str| {
            records
                .iter()
                .find(|r| r.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing {name}")))
        };
        let chars = meta("meta.vocab")?
            .data
            .iter()
            .map(|&v| char::from_u32(v as u32).ok_or_else(|| Error::Checkpoint(format!("bad codepoint {v}"))))
            .collect::<Result<Vec<char>>>()?;
        let vocab = Vocabulary::from_chars(chars);
        let c = &meta("meta.backbone")?.data;
        if c.len() != 7 {
            return Err(Error::Checkpoint("meta.backbone must hold 7 values".into()));
        }
        let u = |i: usize| c[i] as usize;
        let cfg = BackboneConfig {
            d_model: u(0),
            n_heads: u(1),
            d_ff: u(2),
            n_encoder: u(3),
            n_decoder: u(4),
            vocab_size: u(5),
            max_positions: u(6),
        };
        if cfg.vocab_size != vocab.len() {
            return Err(Error::Checkpoint(format!(
                "backbone vocabulary {} vs stored characters {}",
                cfg.vocab_size,
                vocab.len()
            )));
        }
        let mut store = ParamStore::new();
        let backbone_records: Vec<Record> = records
            .iter()
            .filter(|r| BACKBONE_GROUPS.contains(&checkpoint::group_of(&r.name)))
            .cloned()
            .collect();
        checkpoint::load_into(&mut store, &backbone_records, &[])?;
        let backbone = Backbone::bind(cfg, &store)?;
        Ok(Self {
            vocab,
            backbone,
            store,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write(path, &self.records())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_records(&checkpoint::read(path)?)
    }

    /// Whether every character of `stream` is in the vocabulary.
    pub fn covers(&self, stream: &TaskStream) -> bool {
        let v = stream.vocabulary();
        v.chars().iter().all(|c| self.vocab.chars().binary_search(c).is_ok())
    }
}
