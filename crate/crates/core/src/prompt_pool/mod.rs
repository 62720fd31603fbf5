//! A pool of (key, prompt) pairs with query-key selection.
//!
//! Each pair lives in the store as two parameters, `pool.key.{i}` (d) and
//! `pool.prompt.{i}` (L × d), so a training step only places the selected
//! pairs on the tape and the optimizer never sees the rest.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, PromptedInput};
use crate::checkpoint::Record;
use crate::error::{contract, shape_err, Error, Result};
use crate::tensor::{cosine_similarity, ParamId, ParamStore, Tape, Tensor, Var};

pub const POOL_GROUP: &str = "pool";

/// How the similarity term enters the loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    /// `λ·Σ(1 − sim)`: minimizing pulls selected keys toward the query.
    #[default]
    Pull,
    /// `+λ·Σ sim`, exactly as the loss is usually printed.
    Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolTrainConfig {
    pub k: usize,
    pub lambda: f64,
    pub shared_fraction: f64,
    pub sim_mode: SimMode,
}

impl Default for PoolTrainConfig {
    fn default() -> Self {
        Self {
            k: 4,
            lambda: 0.1,
            shared_fraction: 0.2,
            sim_mode: SimMode::Pull,
        }
    }
}

impl PoolTrainConfig {
    pub fn validate(&self, m: usize) -> Result<()> {
        if self.k == 0 || self.k > m {
            return contract(format!("top-k {} must lie in 1..={m}", self.k));
        }
        if !(self.lambda >= 0.0) {
            return contract(format!("lambda {} must be non-negative", self.lambda));
        }
        if !(0.0..1.0).contains(&self.shared_fraction) {
            return contract(format!("shared_fraction {} must lie in [0, 1)", self.shared_fraction));
        }
        Ok(())
    }
}

/// Pool index → sorted task ids that may select it during teacher-forced training.
pub type Assignment = Vec<Vec<usize>>;

#[derive(Clone, Debug)]
pub struct PromptPool {
    pub m: usize,
    pub prompt_len: usize,
    pub d: usize,
    keys: Vec<ParamId>,
    prompts: Vec<ParamId>,
    pub assignment: Option<Assignment>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionResult {
    pub indices: Vec<usize>,
    pub similarities: Vec<f64>,
    pub query: Vec<f64>,
}

/// Frozen copy of the backbone encoder used to embed examples for selection.
#[derive(Clone, Debug)]
pub struct QueryEncoder {
    bb: Backbone,
    store: ParamStore,
}

impl QueryEncoder {
    pub fn new(bb: &Backbone, store: &ParamStore) -> Self {
        let mut copy = store.clone();
        copy.set_trainable(&crate::tensor::TrainScope::None)
            .expect("scope none is always valid");
        Self {
            bb: bb.clone(),
            store: copy,
        }
    }

    pub fn d(&self) -> usize {
        self.bb.d_model()
    }
}

/// Mean of the final encoder states over token positions, with no prompts.
pub fn compute_query(enc: &QueryEncoder, tokens: &[u32]) -> Result<Vec<f64>> {
    if tokens.is_empty() {
        return contract("query input must contain at least one token");
    }
    let d = enc.d();
    let h = enc.bb.encode(&enc.store, &PromptedInput::plain(tokens.to_vec()))?;
    let n = tokens.len() as f64;
    let mut q = vec![0.0; d];
    for row in h.chunks(d) {
        q.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    q.iter_mut().for_each(|v| *v /= n);
    Ok(q)
}

impl PromptPool {
    /// Adds a pool to `store`. Prompts are drawn from U(±0.5/√d); keys copy
    /// `init_queries` (sampled without replacement while enough remain, else
    /// with replacement) or use the same uniform draw when none are given.
    pub fn init(
        store: &mut ParamStore,
        m: usize,
        prompt_len: usize,
        d: usize,
        seed: u64,
        init_queries: Option<&[Vec<f64>]>,
    ) -> Result<Self> {
        if m == 0 || prompt_len == 0 || d == 0 {
            return contract(format!("pool needs M, L, d >= 1 (got {m}, {prompt_len}, {d})"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 0.5 / (d as f64).sqrt();
        let uniform = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        let key_data: Vec<Vec<f64>> = match init_queries {
            Some(qs) if !qs.is_empty() => {
                if let Some(bad) = qs.iter().find(|q| q.len() != d) {
                    return shape_err("init_pool", format!("query of length {} vs d {d}", bad.len()));
                }
                let picks: Vec<usize> = if qs.len() >= m {
                    rand::seq::index::sample(&mut rng, qs.len(), m).into_vec()
                } else {
                    (0..m).map(|_| rng.gen_range(0..qs.len())).collect()
                };
                picks.into_iter().map(|i| qs[i].clone()).collect()
            }
            Some(_) => return contract("init_examples is empty"),
            None => (0..m).map(|_| uniform(d, &mut rng)).collect(),
        };
        let mut keys = Vec::with_capacity(m);
        let mut prompts = Vec::with_capacity(m);
        for (i, k) in key_data.into_iter().enumerate() {
            let p = uniform(prompt_len * d, &mut rng);
            keys.push(store.add(format!("pool.key.{i}"), POOL_GROUP, Tensor::new(vec![d], k)?));
            prompts.push(store.add(
                format!("pool.prompt.{i}"),
                POOL_GROUP,
                Tensor::new(vec![prompt_len, d], p)?,
            ));
        }
        Ok(Self {
            m,
            prompt_len,
            d,
            keys,
            prompts,
            assignment: None,
        })
    }

    /// Re-attaches to pool parameters already in `store`.
    pub fn bind(store: &ParamStore, assignment: Option<Assignment>) -> Result<Self> {
        let mut keys = Vec::new();
        while let Some(id) = store.find(&format!("pool.key.{}", keys.len())) {
            keys.push(id);
        }
        if keys.is_empty() {
            return Err(Error::Checkpoint("no pool parameters found".into()));
        }
        let d = store.get(keys[0]).len();
        let prompts = (0..keys.len())
            .map(|i| {
                store
                    .find(&format!("pool.prompt.{i}"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing pool.prompt.{i}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let prompt_len = store.get(prompts[0]).shape()[0];
        Ok(Self {
            m: keys.len(),
            prompt_len,
            d,
            keys,
            prompts,
            assignment,
        })
    }

    pub fn key_id(&self, i: usize) -> ParamId {
        self.keys[i]
    }

    pub fn prompt_id(&self, i: usize) -> ParamId {
        self.prompts[i]
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.keys.iter().chain(&self.prompts).copied().collect()
    }

    /// Parameter ids of pair `i`.
    pub fn pair_ids(&self, i: usize) -> [ParamId; 2] {
        [self.keys[i], self.prompts[i]]
    }

    /// All keys as an `M × d` row-major matrix.
    pub fn keys_matrix(&self, store: &ParamStore) -> Vec<f64> {
        self.keys.iter().flat_map(|&id| store.get(id).data().iter().copied()).collect()
    }

    /// Selected prompts concatenated in the given order, `(|idx|·L) × d`.
    pub fn prompt_block(&self, store: &ParamStore, indices: &[usize]) -> Vec<f64> {
        indices
            .iter()
            .flat_map(|&i| store.get(self.prompts[i]).data().iter().copied())
            .collect()
    }

    /// Pool indices teacher-forced training may use for `task`.
    pub fn assigned_to(&self, task: usize) -> Result<Vec<usize>> {
        let a = self
            .assignment
            .as_ref()
            .ok_or_else(|| Error::Contract("pool has no task assignment".into()))?;
        Ok((0..self.m).filter(|&i| a[i].contains(&task)).collect())
    }

    /// Indices owned by `task` alone.
    pub fn exclusive_to(&self, task: usize) -> Vec<usize> {
        match &self.assignment {
            Some(a) => (0..self.m).filter(|&i| a[i] == [task]).collect(),
            None => Vec::new(),
        }
    }

    pub fn assignment_records(&self) -> Vec<Record> {
        match &self.assignment {
            Some(a) => a
                .iter()
                .enumerate()
                .map(|(i, ts)| Record::vector(format!("assign.{i}"), ts.iter().map(|&t| t as f64).collect()))
                .collect(),
            None => Vec::new(),
        }
    }

    pub fn assignment_from_records(records: &[Record]) -> Option<Assignment> {
        let mut out: Vec<Vec<usize>> = Vec::new();
        while let Some(r) = records.iter().find(|r| r.name == format!("assign.{}", out.len())) {
            out.push(r.data.iter().map(|&t| t as usize).collect());
        }
        (!out.is_empty()).then_some(out)
    }
}

/// Top-`k` candidates by cosine similarity to `query`, descending, ties to the
/// lower index. `keys` is `M × d` row-major.
pub fn select_topk(
    keys: &[f64],
    query: &[f64],
    k: usize,
    candidate_mask: Option<&[usize]>,
) -> Result<SelectionResult> {
    let d = query.len();
    if d == 0 || keys.len() % d != 0 {
        return shape_err("select_topk", format!("{} key values for d = {d}", keys.len()));
    }
    if k == 0 {
        return contract("k must be at least 1");
    }
    let m = keys.len() / d;
    let candidates: Vec<usize> = match candidate_mask {
        Some([]) => return contract("candidate mask is empty"),
        Some(mask) => {
            if let Some(&bad) = mask.iter().find(|&&i| i >= m) {
                return Err(Error::Index(format!("mask index {bad} outside pool of {m}")));
            }
            let mut c = mask.to_vec();
            c.sort_unstable();
            c.dedup();
            c
        }
        None => (0..m).collect(),
    };
    let mut scored = candidates
        .into_iter()
        .map(|i| {
            let sim = cosine_similarity(query, &keys[i * d..(i + 1) * d])?;
            // -0.0 and 0.0 must tie; NaN ranks last
            Ok((i, if sim.is_nan() { f64::NEG_INFINITY } else { sim + 0.0 }))
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(SelectionResult {
        indices: scored.iter().map(|s| s.0).collect(),
        similarities: scored.iter().map(|s| s.1).collect(),
        query: query.to_vec(),
    })
}

/// Whole-pool selection used at evaluation time; no task id is involved.
pub fn inference_select(pool: &PromptPool, store: &ParamStore, query: &[f64], k: usize) -> Result<SelectionResult> {
    select_topk(&pool.keys_matrix(store), query, k, None)
}

/// Splits the pool into `n` near-equal exclusive groups plus
/// `⌊shared_fraction·M⌋` pairs each owned by two adjacent tasks.
///
/// The shared pairs are drawn at random; the rest are dealt out in index order
/// as contiguous blocks. Shared pairs cycle over the boundaries (0,1), (1,2), ...
pub fn assign_tasks(m: usize, n: usize, shared_fraction: f64, seed: u64) -> Result<Assignment> {
    if n == 0 {
        return contract("task count must be at least 1");
    }
    if m < n {
        return contract(format!("pool of {m} cannot cover {n} tasks"));
    }
    if !(0.0..1.0).contains(&shared_fraction) {
        return contract(format!("shared_fraction {shared_fraction} must lie in [0, 1)"));
    }
    let shared = if n == 1 {
        0
    } else {
        ((shared_fraction * m as f64).floor() as usize).min(m - n)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut rng);
    let mut shared_idx = order[..shared].to_vec();
    shared_idx.sort_unstable();
    let exclusive: Vec<usize> = (0..m).filter(|i| !shared_idx.contains(i)).collect();

    let mut out = vec![Vec::new(); m];
    let (base, extra) = (exclusive.len() / n, exclusive.len() % n);
    let mut pos = 0;
    for t in 0..n {
        let size = base + usize::from(t < extra);
        for &i in &exclusive[pos..pos + size] {
            out[i] = vec![t];
        }
        pos += size;
    }
    for (j, &i) in shared_idx.iter().enumerate() {
        let t = j % (n - 1);
        out[i] = vec![t, t + 1];
    }
    Ok(out)
}

fn similarity_term(
    tape: &mut Tape,
    pool: &PromptPool,
    store: &ParamStore,
    query: Var,
    indices: &[usize],
    cfg: &PoolTrainConfig,
) -> Result<Option<Var>> {
    if cfg.lambda == 0.0 || indices.is_empty() {
        return Ok(None);
    }
    let mut sims = Vec::with_capacity(indices.len());
    for &i in indices {
        let key = tape.param(store, pool.keys[i]);
        sims.push(tape.cosine(query, key)?);
    }
    let stacked = tape.concat_rows(&sims)?;
    let total = tape.sum(stacked);
    Ok(Some(match cfg.sim_mode {
        SimMode::Pull => {
            let neg = tape.scale(total, -cfg.lambda);
            tape.add_scalar(neg, cfg.lambda * indices.len() as f64)
        }
        SimMode::Literal => tape.scale(total, cfg.lambda),
    }))
}

/// LM loss of the input prefixed by `sel`'s prompts, plus the similarity term.
pub fn selected_loss(
    tape: &mut Tape,
    pool: &PromptPool,
    store: &ParamStore,
    bb: &Backbone,
    sel: &SelectionResult,
    tokens: &[u32],
    target: &[u32],
    cfg: &PoolTrainConfig,
) -> Result<Var> {
    let parts: Vec<Var> = sel.indices.iter().map(|&i| tape.param(store, pool.prompts[i])).collect();
    let prompts = tape.concat_rows(&parts)?;
    let lm = bb.lm_loss_tape(tape, store, Some(prompts), tokens, target)?;
    let q = tape.constant(vec![sel.query.len()], sel.query.clone())?;
    match similarity_term(tape, pool, store, q, &sel.indices, cfg)? {
        Some(s) => tape.add(lm, s),
        None => Ok(lm),
    }
}

/// Prompt-pooling loss: the whole pool competes for each example.
pub fn pp_loss(
    tape: &mut Tape,
    pool: &PromptPool,
    store: &ParamStore,
    bb: &Backbone,
    query: &[f64],
    tokens: &[u32],
    target: &[u32],
    cfg: &PoolTrainConfig,
) -> Result<(Var, SelectionResult)> {
    let sel = select_topk(&pool.keys_matrix(store), query, cfg.k, None)?;
    let loss = selected_loss(tape, pool, store, bb, &sel, tokens, target, cfg)?;
    Ok((loss, sel))
}

/// Teacher-forced loss: selection is restricted to the pairs assigned to `task`.
pub fn pptf_loss(
    tape: &mut Tape,
    pool: &PromptPool,
    store: &ParamStore,
    bb: &Backbone,
    query: &[f64],
    tokens: &[u32],
    target: &[u32],
    task: usize,
    cfg: &PoolTrainConfig,
) -> Result<(Var, SelectionResult)> {
    let allowed = pool.assigned_to(task)?;
    if allowed.is_empty() {
        return contract(format!("no pool pairs assigned to task {task}"));
    }
    let sel = select_topk(&pool.keys_matrix(store), query, cfg.k, Some(&allowed))?;
    let loss = selected_loss(tape, pool, store, bb, &sel, tokens, target, cfg)?;
    Ok((loss, sel))
}
