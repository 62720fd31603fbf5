//! Sequential training over a task stream for every method, with replay,
//! early stopping and per-stage evaluation.

mod artifacts;
mod config;
mod replay;
mod warmup;

pub use artifacts::{read_snapshots, write_artifacts, write_diagnostics, RunSummary, SNAPSHOTS_FILE};
pub use config::{
    replay_count, BackboneShape, DataConfig, Method, PoolSettings, RunConfig, WarmupConfig,
};
pub use replay::{early_stop_check, ReplayBuffer, StopDecision};
pub use warmup::{warmup, warmup_vocabulary, Pretrained};

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{greedy_generate, Backbone, PromptedInput};
use crate::data::{Example, Split, TaskStream, Vocabulary};
use crate::diagnostics::{snapshot_keys, DriftSnapshot, PcaBasis};
use crate::error::{contract, Error, Result};
use crate::metrics::{corpus_bleu, BleuConfig, MetricsMatrix};
use crate::prompt_pool::{
    assign_tasks, compute_query, inference_select, pp_loss, pptf_loss, select_topk, PromptPool,
    QueryEncoder, POOL_GROUP,
};
use crate::tensor::{Adam, AdamConfig, Gradients, ParamId, ParamStore, Tape, Tensor, TrainScope, Var};

pub const PROMPT_GROUP: &str = "prompts";

const SEED_POOL: u64 = 0x706f_6f6c;
const SEED_ASSIGN: u64 = 0x6173_7367;
const SEED_PROMPTS: u64 = 0x7072_6f6d;
const SEED_MULTITASK: u64 = 0x6d75_6c74;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream seed derived from a run seed and a tag.
pub fn sub_seed(seed: u64, tag: u64) -> u64 {
    splitmix(seed ^ splitmix(tag))
}

/// One optimizer step over `items`, each on its own tape with its loss
/// scaled by `1/|items|`. Returns the mean loss and every selected pool index.
pub(crate) fn batch_step<T, F>(
    store: &mut ParamStore,
    adam: &mut Adam,
    items: &[T],
    loss: F,
    task: usize,
    step: usize,
) -> Result<(f64, BTreeSet<usize>)>
where
    F: Fn(&mut Tape, &ParamStore, &T) -> Result<(Var, Vec<usize>)>,
{
    let scale = 1.0 / items.len() as f64;
    let mut grads = Gradients::default();
    let mut total = 0.0;
    let mut selected = BTreeSet::new();
    for it in items {
        let mut tape = Tape::new();
        let (l, sel) = loss(&mut tape, store, it)?;
        let v = tape.scalar(l);
        if !v.is_finite() {
            return Err(Error::Numeric { task, step, value: v });
        }
        total += v;
        selected.extend(sel);
        let scaled = tape.scale(l, scale);
        grads.merge(tape.backward(scaled)?);
    }
    adam.step(store, &grads)?;
    Ok((total * scale, selected))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub step: usize,
    pub task: usize,
    pub loss: f64,
    pub selected: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    TaskStart(usize),
    TaskEnd(usize),
}

/// Called at every task boundary with the live parameters.
pub type Observer<'a> = &'a mut dyn FnMut(Stage, &ParamStore, Option<&PromptPool>);

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub config: RunConfig,
    pub task_names: Vec<String>,
    pub val: MetricsMatrix,
    pub test: MetricsMatrix,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub pool: Option<PromptPool>,
    pub snapshots: Vec<DriftSnapshot>,
    pub events: Vec<Event>,
    pub backbone_before: BTreeMap<String, u64>,
    pub backbone_after: BTreeMap<String, u64>,
    /// Epochs run per task, after early stopping.
    pub epochs_run: Vec<usize>,
}

#[derive(Clone, Debug)]
enum PromptParams {
    None,
    Shared(ParamId),
    PerTask(Vec<ParamId>),
}

/// Everything besides the live parameters that a method needs to compute
/// losses and predictions.
struct Learner<'a> {
    method: Method,
    bb: &'a Backbone,
    vocab: &'a Vocabulary,
    pool: Option<PromptPool>,
    prompts: PromptParams,
    queries: HashMap<String, Vec<f64>>,
    cfg: &'a RunConfig,
    /// Task id → position in the stream.
    position: HashMap<usize, usize>,
    max_len: usize,
}

impl Learner<'_> {
    fn pos(&self, ex: &Example) -> Result<usize> {
        self.position
            .get(&ex.task)
            .copied()
            .ok_or_else(|| Error::Index(format!("example of unknown task {}", ex.task)))
    }

    fn query(&self, ex: &Example) -> Result<&[f64]> {
        self.queries
            .get(&ex.input)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Internal(format!("no cached query for '{}'", ex.input)))
    }

    fn tokens(&self, ex: &Example) -> Vec<u32> {
        let body = self.vocab.encode(&ex.input);
        if self.method == Method::Multitask {
            let mut t = vec![Vocabulary::descriptor(ex.task)];
            t.extend(body);
            t
        } else {
            body
        }
    }

    fn pool(&self) -> Result<&PromptPool> {
        self.pool.as_ref().ok_or_else(|| Error::Internal("method has no pool".into()))
    }

    fn train_loss(&self, tape: &mut Tape, store: &ParamStore, ex: &Example) -> Result<(Var, Vec<usize>)> {
        let tokens = self.tokens(ex);
        let target = self.vocab.encode_target(&ex.target);
        let ptc = &self.cfg.pool.train;
        match (&self.prompts, self.method) {
            (_, Method::Pp) => {
                let (l, sel) = pp_loss(tape, self.pool()?, store, self.bb, self.query(ex)?, &tokens, &target, ptc)?;
                Ok((l, sel.indices))
            }
            (_, Method::PpTf) => {
                let pos = self.pos(ex)?;
                let (l, sel) =
                    pptf_loss(tape, self.pool()?, store, self.bb, self.query(ex)?, &tokens, &target, pos, ptc)?;
                Ok((l, sel.indices))
            }
            (PromptParams::Shared(id), _) => {
                let p = tape.param(store, *id);
                Ok((self.bb.lm_loss_tape(tape, store, Some(p), &tokens, &target)?, Vec::new()))
            }
            (PromptParams::PerTask(ids), _) => {
                let p = tape.param(store, ids[self.pos(ex)?]);
                Ok((self.bb.lm_loss_tape(tape, store, Some(p), &tokens, &target)?, Vec::new()))
            }
            (PromptParams::None, _) => Ok((self.bb.lm_loss_tape(tape, store, None, &tokens, &target)?, Vec::new())),
        }
    }

    /// The prompted input for `ex`. With `training`, pool selection follows
    /// the training path (masked for teacher forcing); otherwise the whole
    /// pool competes.
    fn input(&self, store: &ParamStore, ex: &Example, training: bool) -> Result<PromptedInput> {
        let token_ids = self.tokens(ex);
        let prompt_vectors = match &self.prompts {
            PromptParams::Shared(id) => store.get(*id).data().to_vec(),
            PromptParams::PerTask(ids) => store.get(ids[self.pos(ex)?]).data().to_vec(),
            PromptParams::None if self.method.uses_pool() => {
                let pool = self.pool()?;
                let k = self.cfg.pool.train.k;
                let q = self.query(ex)?;
                let sel = if training && self.method == Method::PpTf {
                    let allowed = pool.assigned_to(self.pos(ex)?)?;
                    select_topk(&pool.keys_matrix(store), q, k, Some(&allowed))?
                } else {
                    inference_select(pool, store, q, k)?
                };
                pool.prompt_block(store, &sel.indices)
            }
            PromptParams::None => Vec::new(),
        };
        Ok(PromptedInput {
            prompt_vectors,
            token_ids,
        })
    }

    /// Negative mean LM loss on `examples`, higher is better.
    fn validation_score(&self, store: &ParamStore, examples: &[Example]) -> Result<f64> {
        let mut total = 0.0;
        for ex in examples {
            let input = self.input(store, ex, true)?;
            total += self.bb.lm_loss_value(store, &input, &self.vocab.encode_target(&ex.target))?;
        }
        Ok(-total / examples.len() as f64)
    }

    fn predict(&self, store: &ParamStore, ex: &Example) -> Result<String> {
        let input = self.input(store, ex, false)?;
        Ok(self.vocab.decode(&greedy_generate(self.bb, store, &input, self.max_len)?))
    }

    fn bleu(&self, store: &ParamStore, examples: &[Example]) -> Result<f64> {
        let hyps = examples
            .iter()
            .map(|ex| self.predict(store, ex))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<String> = examples.iter().map(|e| e.target.clone()).collect();
        corpus_bleu(&hyps, &refs, &BleuConfig::default())
    }

    fn snapshot(&self, store: &ParamStore, stage: String, stream: &TaskStream, basis: Option<&DriftSnapshot>) -> Result<DriftSnapshot> {
        let pool = self.pool()?;
        let mut queries = Vec::new();
        let mut labels = Vec::new();
        for (pos, task) in stream.tasks.iter().enumerate() {
            for ex in task.train.iter().take(self.cfg.diag_queries_per_task) {
                queries.extend_from_slice(self.query(ex)?);
                labels.push(pos);
            }
        }
        let key_tasks = pool.assignment.clone().unwrap_or_else(|| vec![Vec::new(); pool.m]);
        let fixed = match (self.cfg.pca_basis, basis) {
            (PcaBasis::Fixed, Some(b)) => Some(&b.pca),
            _ => None,
        };
        snapshot_keys(stage, &pool.keys_matrix(store), key_tasks, &queries, &labels, pool.d, fixed)
    }
}

fn uniform_tensor(rows: usize, d: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let bound = 0.5 / (d as f64).sqrt();
    Tensor::new(vec![rows, d], (0..rows * d).map(|_| rng.gen_range(-bound..bound)).collect())
}

fn check_stream(stream: &TaskStream) -> Result<HashMap<usize, usize>> {
    stream.validate()?;
    if stream.is_empty() {
        return contract("task stream is empty");
    }
    if let Some(t) = stream.tasks.iter().find(|t| t.id >= crate::data::MAX_TASKS) {
        return contract(format!("task id {} exceeds the descriptor range", t.id));
    }
    Ok(stream.tasks.iter().enumerate().map(|(p, t)| (t.id, p)).collect())
}

fn max_len(cfg: &RunConfig, stream: &TaskStream) -> usize {
    ((cfg.max_len_factor * stream.max_target_chars() as f64).ceil() as usize).max(1)
}

/// Builds the method's parameters on top of the pretrained store.
fn prepare<'a>(
    cfg: &'a RunConfig,
    stream: &TaskStream,
    pre: &'a Pretrained,
    store: &mut ParamStore,
) -> Result<Learner<'a>> {
    let position = check_stream(stream)?;
    if !pre.covers(stream) {
        return contract("pretrained vocabulary does not cover the task stream");
    }
    let bb = &pre.backbone;
    let d = bb.d_model();
    let n = stream.len();
    let m = cfg.pool.size;
    let l = cfg.pool.prompt_len;
    let method = cfg.method;
    bb.set_trainable(
        store,
        if method.is_prompt_method() { &TrainScope::None } else { &TrainScope::All },
    )?;

    let mut prompt_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, SEED_PROMPTS));
    let prompts = match method {
        Method::SharedPrompts => {
            let id = store.add("prompts.shared", PROMPT_GROUP, uniform_tensor(m * l, d, &mut prompt_rng)?);
            store.get_mut(id).set_requires_grad(true);
            PromptParams::Shared(id)
        }
        Method::TaskSpecificPrompts => {
            let per = m / n;
            if per == 0 {
                return contract(format!("pool of {m} cannot give each of {n} tasks a prompt"));
            }
            let ids = (0..n)
                .map(|t| Ok(store.add(format!("prompts.task.{t}"), PROMPT_GROUP, uniform_tensor(per * l, d, &mut prompt_rng)?)))
                .collect::<Result<Vec<_>>>()?;
            PromptParams::PerTask(ids)
        }
        _ => PromptParams::None,
    };

    let mut queries = HashMap::new();
    let mut pool = None;
    if method.uses_pool() {
        let enc = QueryEncoder::new(bb, &pre.store);
        for ex in stream.tasks.iter().flat_map(|t| t.all()) {
            if !queries.contains_key(&ex.input) {
                queries.insert(ex.input.clone(), compute_query(&enc, &pre.vocab.encode(&ex.input))?);
            }
        }
        let per_task = cfg.diag_queries_per_task.max(1);
        let init: Vec<Vec<f64>> = stream
            .tasks
            .iter()
            .flat_map(|t| t.train.iter().take(per_task))
            .map(|ex| queries[&ex.input].clone())
            .collect();
        let mut p = PromptPool::init(store, m, l, d, sub_seed(cfg.seed, SEED_POOL), Some(&init))?;
        if method == Method::PpTf {
            p.assignment = Some(assign_tasks(m, n, cfg.pool.train.shared_fraction, sub_seed(cfg.seed, SEED_ASSIGN))?);
        }
        store.set_group_trainable(POOL_GROUP, true);
        pool = Some(p);
    }

    Ok(Learner {
        method,
        bb,
        vocab: &pre.vocab,
        pool,
        prompts,
        queries,
        cfg,
        position,
        max_len: max_len(cfg, stream),
    })
}

fn learning_rate(cfg: &RunConfig) -> f64 {
    if cfg.method.is_prompt_method() {
        cfg.prompt_lr
    } else {
        cfg.finetune_lr
    }
}

/// Trains one task with early stopping and restores the best epoch.
fn train_task(
    learner: &Learner<'_>,
    store: &mut ParamStore,
    task_pos: usize,
    train: &[Example],
    validation: &[Example],
    buffer: Option<&ReplayBuffer>,
    rng: &mut ChaCha8Rng,
    events: &mut Vec<Event>,
) -> Result<usize> {
    let cfg = learner.cfg;
    let mut adam = Adam::new(AdamConfig {
        learning_rate: learning_rate(cfg),
        ..AdamConfig::default()
    });
    let trainable = store.trainable_ids();
    let replay = match buffer {
        Some(b) if !b.is_empty() => replay_count(cfg.replay_mix, cfg.batch_size),
        _ => 0,
    };
    let fresh = cfg.batch_size - replay;
    let mut history = Vec::new();
    let mut best = store.snapshot(&trainable);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(fresh) {
            let mut batch: Vec<Example> = chunk.iter().map(|&i| train[i].clone()).collect();
            if replay > 0 {
                if let Some(b) = buffer {
                    batch.extend(b.sample(replay, rng)?);
                }
            }
            let step = events.len();
            let (loss, selected) =
                batch_step(store, &mut adam, &batch, |t, s, ex| learner.train_loss(t, s, ex), task_pos, step)?;
            events.push(Event {
                step,
                task: task_pos,
                loss,
                selected: selected.into_iter().collect(),
            });
        }
        let score = learner.validation_score(store, validation)?;
        history.push(score);
        let (decision, best_epoch) = early_stop_check(&history, cfg.patience)?;
        if best_epoch == epoch {
            best = store.snapshot(&trainable);
        }
        if decision == StopDecision::Stop {
            break;
        }
    }
    store.restore(&best);
    Ok(history.len())
}

/// Trains the stream's tasks in order, evaluating every task seen so far on
/// validation and test after each one.
pub fn run_sequential(
    stream: &TaskStream,
    cfg: &RunConfig,
    pre: &Pretrained,
    mut observer: Option<Observer<'_>>,
) -> Result<RunOutput> {
    cfg.validate()?;
    if matches!(cfg.method, Method::Multitask | Method::Individual) {
        return contract(format!("run_sequential does not handle method {}", cfg.method));
    }
    let mut store = pre.store.clone();
    let learner = prepare(cfg, stream, pre, &mut store)?;
    let backbone_before = pre.backbone.checksums(&store);
    let n = stream.len();
    let mut val = MetricsMatrix::new(n);
    let mut test = MetricsMatrix::new(n);
    let mut events = Vec::new();
    let mut epochs_run = Vec::new();
    let mut snapshots = Vec::new();
    let mut buffer = if cfg.use_er { Some(ReplayBuffer::new(cfg.buffer_capacity)?) } else { None };
    if learner.pool.is_some() {
        snapshots.push(learner.snapshot(&store, "init".into(), stream, None)?);
    }

    for (i, task) in stream.tasks.iter().enumerate() {
        if let Some(obs) = observer.as_mut() {
            obs(Stage::TaskStart(i), &store, learner.pool.as_ref());
        }
        if let PromptParams::PerTask(ids) = &learner.prompts {
            for (t, &id) in ids.iter().enumerate() {
                store.get_mut(id).set_requires_grad(t == i);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, task.id as u64 + 1));
        let ran = train_task(&learner, &mut store, i, &task.train, &task.validation, buffer.as_ref(), &mut rng, &mut events)?;
        epochs_run.push(ran);
        if let Some(b) = buffer.as_mut() {
            b.insert(task.id, &task.train, &mut rng);
        }
        for (j, earlier) in stream.tasks[..=i].iter().enumerate() {
            val.set(i, j, learner.bleu(&store, earlier.split(Split::Validation))?)?;
            test.set(i, j, learner.bleu(&store, earlier.split(Split::Test))?)?;
        }
        if learner.pool.is_some() {
            let snap = learner.snapshot(&store, format!("after_task_{i}"), stream, snapshots.first())?;
            snapshots.push(snap);
        }
        if let Some(obs) = observer.as_mut() {
            obs(Stage::TaskEnd(i), &store, learner.pool.as_ref());
        }
    }

    let backbone_after = pre.backbone.checksums(&store);
    Ok(RunOutput {
        config: cfg.clone(),
        task_names: stream.tasks.iter().map(|t| t.name.clone()).collect(),
        val,
        test,
        pool: learner.pool.clone(),
        store,
        backbone: pre.backbone.clone(),
        snapshots,
        events,
        backbone_before,
        backbone_after,
        epochs_run,
    })
}

fn replicate_final(n: usize, finals: &[f64]) -> Result<MetricsMatrix> {
    let mut m = MetricsMatrix::new(n);
    for i in 0..n {
        for (j, &v) in finals.iter().enumerate().take(i + 1) {
            m.set(i, j, v)?;
        }
    }
    Ok(m)
}

/// One full fine-tune per task, each from the pretrained weights.
///
/// Row `i` of each matrix repeats the independent final scores of tasks `0..=i`.
pub fn run_individual(stream: &TaskStream, cfg: &RunConfig, pre: &Pretrained) -> Result<RunOutput> {
    cfg.validate()?;
    if cfg.method != Method::Individual {
        return contract("run_individual needs method individual");
    }
    check_stream(stream)?;
    let single = RunConfig {
        method: Method::SeqFt,
        use_er: false,
        ..cfg.clone()
    };
    let mut val = Vec::new();
    let mut test = Vec::new();
    let mut events = Vec::new();
    let mut epochs_run = Vec::new();
    let mut last = None;
    for (pos, task) in stream.tasks.iter().enumerate() {
        let one = TaskStream::new(vec![task.clone()])?;
        let mut out = run_sequential(&one, &single, pre, None)?;
        val.push(out.val.get(0, 0).unwrap_or(0.0));
        test.push(out.test.get(0, 0).unwrap_or(0.0));
        let offset = events.len();
        for mut e in out.events.drain(..) {
            e.step += offset;
            e.task = pos;
            events.push(e);
        }
        epochs_run.extend(out.epochs_run.iter().copied());
        last = Some(out);
    }
    let last = last.ok_or_else(|| Error::Contract("task stream is empty".into()))?;
    let n = stream.len();
    Ok(RunOutput {
        config: cfg.clone(),
        task_names: stream.tasks.iter().map(|t| t.name.clone()).collect(),
        val: replicate_final(n, &val)?,
        test: replicate_final(n, &test)?,
        store: last.store,
        backbone: pre.backbone.clone(),
        pool: None,
        snapshots: Vec::new(),
        events,
        backbone_before: last.backbone_before,
        backbone_after: last.backbone_after,
        epochs_run,
    })
}

/// One model on the union of all tasks with balanced task sampling and
/// descriptor-prefixed inputs.
pub fn run_multitask(stream: &TaskStream, cfg: &RunConfig, pre: &Pretrained) -> Result<RunOutput> {
    cfg.validate()?;
    if cfg.method != Method::Multitask {
        return contract("run_multitask needs method multitask");
    }
    let mut store = pre.store.clone();
    let learner = prepare(cfg, stream, pre, &mut store)?;
    let backbone_before = pre.backbone.checksums(&store);
    let n = stream.len();
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, SEED_MULTITASK));
    let mut adam = Adam::new(AdamConfig {
        learning_rate: cfg.finetune_lr,
        ..AdamConfig::default()
    });
    let trainable = store.trainable_ids();
    let total: usize = stream.tasks.iter().map(|t| t.train.len()).sum();
    let steps_per_epoch = total.div_ceil(cfg.batch_size);
    let validation: Vec<Example> = stream.tasks.iter().flat_map(|t| t.validation.iter().cloned()).collect();
    let mut events = Vec::new();
    let mut history = Vec::new();
    let mut best = store.snapshot(&trainable);
    for epoch in 0..cfg.epochs {
        for _ in 0..steps_per_epoch {
            let batch: Vec<Example> = (0..cfg.batch_size)
                .map(|_| {
                    let t = &stream.tasks[rng.gen_range(0..n)];
                    t.train[rng.gen_range(0..t.train.len())].clone()
                })
                .collect();
            let step = events.len();
            let (loss, _) = batch_step(&mut store, &mut adam, &batch, |t, s, ex| learner.train_loss(t, s, ex), 0, step)?;
            events.push(Event {
                step,
                task: 0,
                loss,
                selected: Vec::new(),
            });
        }
        history.push(learner.validation_score(&store, &validation)?);
        let (decision, best_epoch) = early_stop_check(&history, cfg.patience)?;
        if best_epoch == epoch {
            best = store.snapshot(&trainable);
        }
        if decision == StopDecision::Stop {
            break;
        }
    }
    store.restore(&best);
    let val = stream
        .tasks
        .iter()
        .map(|t| learner.bleu(&store, &t.validation))
        .collect::<Result<Vec<_>>>()?;
    let test = stream
        .tasks
        .iter()
        .map(|t| learner.bleu(&store, &t.test))
        .collect::<Result<Vec<_>>>()?;
    Ok(RunOutput {
        config: cfg.clone(),
        task_names: stream.tasks.iter().map(|t| t.name.clone()).collect(),
        val: replicate_final(n, &val)?,
        test: replicate_final(n, &test)?,
        store: store.clone(),
        backbone: pre.backbone.clone(),
        pool: None,
        snapshots: Vec::new(),
        events,
        backbone_before,
        backbone_after: pre.backbone.checksums(&store),
        epochs_run: vec![history.len()],
    })
}

/// Dispatches on the configured method.
pub fn run(stream: &TaskStream, cfg: &RunConfig, pre: &Pretrained, observer: Option<Observer<'_>>) -> Result<RunOutput> {
    match cfg.method {
        Method::Individual => run_individual(stream, cfg, pre),
        Method::Multitask => run_multitask(stream, cfg, pre),
        _ => run_sequential(stream, cfg, pre, observer),
    }
}

/// Scores a trained model on `examples` with plain inputs: no descriptor,
/// no prompts.
pub fn bleu_plain(out: &RunOutput, pre: &Pretrained, stream: &TaskStream, examples: &[Example]) -> Result<f64> {
    let limit = max_len(&out.config, stream);
    let hyps = examples
        .iter()
        .map(|ex| {
            let input = PromptedInput::plain(pre.vocab.encode(&ex.input));
            Ok(pre.vocab.decode(&greedy_generate(&out.backbone, &out.store, &input, limit)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<String> = examples.iter().map(|e| e.target.clone()).collect();
    corpus_bleu(&hyps, &refs, &BleuConfig::default())
}
