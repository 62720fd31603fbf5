//! A small pre-LN encoder–decoder transformer.
//!
//! The same weights can be run two ways: on a [`Tape`] for training (prompt
//! vectors or any unfrozen weight receive gradients) and through the plain
//! forward in [`infer`] for queries, validation loss and greedy decoding.

pub mod infer;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BOS, EOS};
use crate::error::{contract, shape_err, Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, TrainScope, Var};

pub use infer::{argmax, greedy_generate};

/// Parameter groups owned by the backbone.
pub const BACKBONE_GROUPS: [&str; 4] = ["embedding", "encoder", "decoder", "output"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_encoder: usize,
    pub n_decoder: usize,
    pub vocab_size: usize,
    /// Longest sequence (prompt block included) the position table covers.
    pub max_positions: usize,
}

impl BackboneConfig {
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            n_encoder: 2,
            n_decoder: 2,
            vocab_size,
            max_positions: 256,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return contract(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab_size <= EOS as usize {
            return contract("vocabulary too small");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct NormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct FfIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct EncoderLayer {
    pub ln1: NormIds,
    pub attn: AttnIds,
    pub ln2: NormIds,
    pub ff: FfIds,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct DecoderLayer {
    pub ln1: NormIds,
    pub self_attn: AttnIds,
    pub ln2: NormIds,
    pub cross: AttnIds,
    pub ln3: NormIds,
    pub ff: FfIds,
}

/// Handles into a [`ParamStore`] for every backbone weight.
#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    pub(crate) embed: ParamId,
    pub(crate) encoder: Vec<EncoderLayer>,
    pub(crate) enc_norm: NormIds,
    pub(crate) decoder: Vec<DecoderLayer>,
    pub(crate) dec_norm: NormIds,
    pub(crate) out: ParamId,
    positions: Vec<f64>,
}

/// Prompt rows (`rows × d`, row-major) prepended to the token embeddings.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PromptedInput {
    pub prompt_vectors: Vec<f64>,
    pub token_ids: Vec<u32>,
}

impl PromptedInput {
    pub fn plain(token_ids: Vec<u32>) -> Self {
        Self {
            prompt_vectors: Vec::new(),
            token_ids,
        }
    }
}

fn uniform(rng: &mut impl Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

fn sinusoidal(max_pos: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; max_pos * d];
    for pos in 0..max_pos {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            pe[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

struct Builder<'a, R: Rng> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn matrix(&mut self, name: String, group: &str, rows: usize, cols: usize) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = uniform(self.rng, rows * cols, bound);
        self.store
            .add(name, group, Tensor::new(vec![rows, cols], data).expect("sized"))
    }

    fn vector(&mut self, name: String, group: &str, n: usize, fill: f64) -> ParamId {
        self.store
            .add(name, group, Tensor::new(vec![n], vec![fill; n]).expect("sized"))
    }

    fn norm(&mut self, prefix: &str, group: &str, d: usize) -> NormIds {
        NormIds {
            gain: self.vector(format!("{prefix}.gain"), group, d, 1.0),
            bias: self.vector(format!("{prefix}.bias"), group, d, 0.0),
        }
    }

    fn attn(&mut self, prefix: &str, group: &str, d: usize) -> AttnIds {
        AttnIds {
            wq: self.matrix(format!("{prefix}.wq"), group, d, d),
            wk: self.matrix(format!("{prefix}.wk"), group, d, d),
            wv: self.matrix(format!("{prefix}.wv"), group, d, d),
            wo: self.matrix(format!("{prefix}.wo"), group, d, d),
        }
    }

    fn ff(&mut self, prefix: &str, group: &str, d: usize, h: usize) -> FfIds {
        FfIds {
            w1: self.matrix(format!("{prefix}.w1"), group, d, h),
            b1: self.vector(format!("{prefix}.b1"), group, h, 0.0),
            w2: self.matrix(format!("{prefix}.w2"), group, h, d),
            b2: self.vector(format!("{prefix}.b2"), group, d, 0.0),
        }
    }
}

impl Backbone {
    /// Adds freshly initialised weights to `store`.
    pub fn init(cfg: BackboneConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let embed_data = uniform(rng, cfg.vocab_size * d, 3f64.sqrt());
        let embed = store.add(
            "embedding.tokens",
            "embedding",
            Tensor::new(vec![cfg.vocab_size, d], embed_data)?,
        );
        let mut b = Builder { store, rng };
        let encoder = (0..cfg.n_encoder)
            .map(|l| EncoderLayer {
                ln1: b.norm(&format!("encoder.{l}.ln1"), "encoder", d),
                attn: b.attn(&format!("encoder.{l}.attn"), "encoder", d),
                ln2: b.norm(&format!("encoder.{l}.ln2"), "encoder", d),
                ff: b.ff(&format!("encoder.{l}.ff"), "encoder", d, cfg.d_ff),
            })
            .collect();
        let enc_norm = b.norm("encoder.final_norm", "encoder", d);
        let decoder = (0..cfg.n_decoder)
            .map(|l| DecoderLayer {
                ln1: b.norm(&format!("decoder.{l}.ln1"), "decoder", d),
                self_attn: b.attn(&format!("decoder.{l}.self_attn"), "decoder", d),
                ln2: b.norm(&format!("decoder.{l}.ln2"), "decoder", d),
                cross: b.attn(&format!("decoder.{l}.cross_attn"), "decoder", d),
                ln3: b.norm(&format!("decoder.{l}.ln3"), "decoder", d),
                ff: b.ff(&format!("decoder.{l}.ff"), "decoder", d, cfg.d_ff),
            })
            .collect();
        let dec_norm = b.norm("decoder.final_norm", "decoder", d);
        let out = b.matrix("output.proj".into(), "output", d, cfg.vocab_size);
        let positions = sinusoidal(cfg.max_positions, d);
        Ok(Self {
            cfg,
            embed,
            encoder,
            enc_norm,
            decoder,
            dec_norm,
            out,
            positions,
        })
    }

    /// Re-attaches to weights already present in `store` (e.g. after loading a checkpoint).
    pub fn bind(cfg: BackboneConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let find = |name: String, shape: &[usize]| -> Result<ParamId> {
            let id = store
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if store.get(id).shape() != shape {
                return shape_err(
                    "Backbone::bind",
                    format!("{name}: {:?} vs {:?}", store.get(id).shape(), shape),
                );
            }
            Ok(id)
        };
        let norm = |p: String| -> Result<NormIds> {
            Ok(NormIds {
                gain: find(format!("{p}.gain"), &[d])?,
                bias: find(format!("{p}.bias"), &[d])?,
            })
        };
        let attn = |p: String| -> Result<AttnIds> {
            Ok(AttnIds {
                wq: find(format!("{p}.wq"), &[d, d])?,
                wk: find(format!("{p}.wk"), &[d, d])?,
                wv: find(format!("{p}.wv"), &[d, d])?,
                wo: find(format!("{p}.wo"), &[d, d])?,
            })
        };
        let ff = |p: String| -> Result<FfIds> {
            Ok(FfIds {
                w1: find(format!("{p}.w1"), &[d, cfg.d_ff])?,
                b1: find(format!("{p}.b1"), &[cfg.d_ff])?,
                w2: find(format!("{p}.w2"), &[cfg.d_ff, d])?,
                b2: find(format!("{p}.b2"), &[d])?,
            })
        };
        let encoder = (0..cfg.n_encoder)
            .map(|l| {
                Ok(EncoderLayer {
                    ln1: norm(format!("encoder.{l}.ln1"))?,
                    attn: attn(format!("encoder.{l}.attn"))?,
                    ln2: norm(format!("encoder.{l}.ln2"))?,
                    ff: ff(format!("encoder.{l}.ff"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder = (0..cfg.n_decoder)
            .map(|l| {
                Ok(DecoderLayer {
                    ln1: norm(format!("decoder.{l}.ln1"))?,
                    self_attn: attn(format!("decoder.{l}.self_attn"))?,
                    ln2: norm(format!("decoder.{l}.ln2"))?,
                    cross: attn(format!("decoder.{l}.cross_attn"))?,
                    ln3: norm(format!("decoder.{l}.ln3"))?,
                    ff: ff(format!("decoder.{l}.ff"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            embed: find("embedding.tokens".into(), &[cfg.vocab_size, d])?,
            encoder,
            enc_norm: norm("encoder.final_norm".into())?,
            decoder,
            dec_norm: norm("decoder.final_norm".into())?,
            out: find("output.proj".into(), &[d, cfg.vocab_size])?,
            positions: sinusoidal(cfg.max_positions, d),
            cfg,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn d_model(&self) -> usize {
        self.cfg.d_model
    }

    pub fn embedding_id(&self) -> ParamId {
        self.embed
    }

    pub(crate) fn positions(&self, n: usize) -> Result<&[f64]> {
        if n > self.cfg.max_positions {
            return Err(Error::Index(format!(
                "sequence of {n} positions exceeds max_positions {}",
                self.cfg.max_positions
            )));
        }
        Ok(&self.positions[..n * self.cfg.d_model])
    }

    pub(crate) fn check_ids(&self, ids: &[u32]) -> Result<()> {
        match ids.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            Some(bad) => Err(Error::Index(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.cfg.vocab_size
            ))),
            None => Ok(()),
        }
    }

    /// Sets `requires_grad` on backbone weights only; other groups in the store are untouched.
    pub fn set_trainable(&self, store: &mut ParamStore, scope: &TrainScope) -> Result<()> {
        let groups: Vec<&str> = match scope {
            TrainScope::All => BACKBONE_GROUPS.to_vec(),
            TrainScope::None => Vec::new(),
            TrainScope::Groups(gs) => {
                if let Some(bad) = gs.iter().find(|g| !BACKBONE_GROUPS.contains(&g.as_str())) {
                    return contract(format!(
                        "unknown backbone group '{bad}' (known: {BACKBONE_GROUPS:?})"
                    ));
                }
                gs.iter().map(String::as_str).collect()
            }
        };
        for g in BACKBONE_GROUPS {
            store.set_group_trainable(g, groups.contains(&g));
        }
        Ok(())
    }

    /// Checksums of every backbone weight, keyed by name.
    pub fn checksums(&self, store: &ParamStore) -> std::collections::BTreeMap<String, u64> {
        store.checksums(&BACKBONE_GROUPS)
    }

    // ---- tape forward ----

    fn norm_t(&self, tape: &mut Tape, s: &ParamStore, x: Var, ids: NormIds) -> Result<Var> {
        let g = tape.param(s, ids.gain);
        let b = tape.param(s, ids.bias);
        tape.layer_norm(x, g, b)
    }

    fn attention_t(
        &self,
        tape: &mut Tape,
        s: &ParamStore,
        xq: Var,
        xkv: Var,
        ids: AttnIds,
        causal: bool,
    ) -> Result<Var> {
        let (wq, wk, wv, wo) = (
            tape.param(s, ids.wq),
            tape.param(s, ids.wk),
            tape.param(s, ids.wv),
            tape.param(s, ids.wo),
        );
        let q = tape.matmul(xq, wq)?;
        let k = tape.matmul(xkv, wk)?;
        let v = tape.matmul(xkv, wv)?;
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.n_heads);
        for h in 0..self.cfg.n_heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_cols(q, lo, hi)?;
            let kh = tape.slice_cols(k, lo, hi)?;
            let vh = tape.slice_cols(v, lo, hi)?;
            let scores = tape.matmul_ext(qh, kh, true)?;
            let mut scores = tape.scale(scores, scale);
            if causal {
                scores = tape.causal_mask(scores)?;
            }
            let p = tape.softmax_rows(scores);
            heads.push(tape.matmul(p, vh)?);
        }
        let cat = tape.concat_cols(&heads)?;
        tape.matmul(cat, wo)
    }

    fn ff_t(&self, tape: &mut Tape, s: &ParamStore, x: Var, ids: FfIds) -> Result<Var> {
        let (w1, b1, w2, b2) = (
            tape.param(s, ids.w1),
            tape.param(s, ids.b1),
            tape.param(s, ids.w2),
            tape.param(s, ids.b2),
        );
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.relu(h);
        let o = tape.matmul(h, w2)?;
        tape.add_row(o, b2)
    }

    fn embed_t(&self, tape: &mut Tape, s: &ParamStore, ids: &[u32]) -> Result<Var> {
        self.check_ids(ids)?;
        let table = tape.param(s, self.embed);
        let rows: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        tape.gather_rows(table, &rows)
    }

    /// Encoder hidden states for `[prompts; tokens]`, shape `(P + T) × d`.
    pub fn encode_tape(
        &self,
        tape: &mut Tape,
        s: &ParamStore,
        prompts: Option<Var>,
        tokens: &[u32],
    ) -> Result<Var> {
        if tokens.is_empty() {
            return contract("encoder input must contain at least one token");
        }
        let d = self.cfg.d_model;
        let emb = self.embed_t(tape, s, tokens)?;
        let x = match prompts {
            Some(p) => {
                if tape.shape(p).last() != Some(&d) {
                    return shape_err("encode", format!("prompt width {:?} vs d {d}", tape.shape(p)));
                }
                tape.concat_rows(&[p, emb])?
            }
            None => emb,
        };
        let n = tape.shape(x)[0];
        let pe = tape.constant(vec![n, d], self.positions(n)?.to_vec())?;
        let mut h = tape.add(x, pe)?;
        for layer in &self.encoder {
            let a = self.norm_t(tape, s, h, layer.ln1)?;
            let a = self.attention_t(tape, s, a, a, layer.attn, false)?;
            h = tape.add(h, a)?;
            let f = self.norm_t(tape, s, h, layer.ln2)?;
            let f = self.ff_t(tape, s, f, layer.ff)?;
            h = tape.add(h, f)?;
        }
        self.norm_t(tape, s, h, self.enc_norm)
    }

    /// Teacher-forced decoder logits, shape `T × V`.
    pub fn decode_tape(
        &self,
        tape: &mut Tape,
        s: &ParamStore,
        memory: Var,
        dec_in: &[u32],
    ) -> Result<Var> {
        let d = self.cfg.d_model;
        let emb = self.embed_t(tape, s, dec_in)?;
        let n = dec_in.len();
        let pe = tape.constant(vec![n, d], self.positions(n)?.to_vec())?;
        let mut h = tape.add(emb, pe)?;
        for layer in &self.decoder {
            let a = self.norm_t(tape, s, h, layer.ln1)?;
            let a = self.attention_t(tape, s, a, a, layer.self_attn, true)?;
            h = tape.add(h, a)?;
            let c = self.norm_t(tape, s, h, layer.ln2)?;
            let c = self.attention_t(tape, s, c, memory, layer.cross, false)?;
            h = tape.add(h, c)?;
            let f = self.norm_t(tape, s, h, layer.ln3)?;
            let f = self.ff_t(tape, s, f, layer.ff)?;
            h = tape.add(h, f)?;
        }
        let h = self.norm_t(tape, s, h, self.dec_norm)?;
        let w = tape.param(s, self.out);
        tape.matmul(h, w)
    }

    /// Mean token cross-entropy of `target` (which must end with EOS) given
    /// the prompted input, decoded with teacher forcing.
    pub fn lm_loss_tape(
        &self,
        tape: &mut Tape,
        s: &ParamStore,
        prompts: Option<Var>,
        tokens: &[u32],
        target: &[u32],
    ) -> Result<Var> {
        let dec_in = decoder_input(target)?;
        self.check_ids(target)?;
        let memory = self.encode_tape(tape, s, prompts, tokens)?;
        let logits = self.decode_tape(tape, s, memory, &dec_in)?;
        let targets: Vec<usize> = target.iter().map(|&t| t as usize).collect();
        tape.cross_entropy(logits, &targets)
    }

    /// Places an explicit prompt block on the tape as a constant.
    pub fn prompt_constant(&self, tape: &mut Tape, input: &PromptedInput) -> Result<Option<Var>> {
        if input.prompt_vectors.is_empty() {
            return Ok(None);
        }
        let d = self.cfg.d_model;
        if input.prompt_vectors.len() % d != 0 {
            return shape_err("prompt", format!("{} values not divisible by d={d}", input.prompt_vectors.len()));
        }
        let rows = input.prompt_vectors.len() / d;
        Ok(Some(tape.constant(vec![rows, d], input.prompt_vectors.clone())?))
    }

    /// Convenience wrapper taking an explicit [`PromptedInput`].
    pub fn lm_loss(&self, tape: &mut Tape, s: &ParamStore, input: &PromptedInput, target: &[u32]) -> Result<Var> {
        let p = self.prompt_constant(tape, input)?;
        self.lm_loss_tape(tape, s, p, &input.token_ids, target)
    }
}

/// `[BOS] + target[..n-1]`; the target itself must be non-empty and end with EOS.
pub fn decoder_input(target: &[u32]) -> Result<Vec<u32>> {
    match target.last() {
        None => contract("target sequence is empty"),
        Some(&last) if last != EOS => contract("target sequence must end with EOS"),
        Some(_) => {
            let mut v = Vec::with_capacity(target.len());
            v.push(BOS);
            v.extend_from_slice(&target[..target.len() - 1]);
            Ok(v)
        }
    }
}
