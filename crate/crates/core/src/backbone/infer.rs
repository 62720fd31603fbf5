//! Gradient-free forward pass over the same weights as the tape path.
//!
//! Decoding is incremental: each decoder layer keeps its self-attention keys
//! and values, and cross-attention keys/values are computed once per input.

use super::{AttnIds, Backbone, FfIds, NormIds, PromptedInput};
use crate::data::{BOS, EOS};
use crate::error::{contract, shape_err, Result};
use crate::tensor::linalg::{gemm, matmul, softmax_in_place};
use crate::tensor::ParamStore;

fn layer_norm(x: &mut [f64], d: usize, s: &ParamStore, ids: NormIds) {
    let (g, b) = (s.get(ids.gain).data(), s.get(ids.bias).data());
    for row in x.chunks_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + 1e-5).sqrt();
        for c in 0..d {
            row[c] = (row[c] - mean) * rs * g[c] + b[c];
        }
    }
}

fn normed(x: &[f64], d: usize, s: &ParamStore, ids: NormIds) -> Vec<f64> {
    let mut y = x.to_vec();
    layer_norm(&mut y, d, s, ids);
    y
}

fn project(x: &[f64], s: &ParamStore, w: crate::tensor::ParamId) -> Vec<f64> {
    let t = s.get(w);
    let (k, n) = (t.shape()[0], t.shape()[1]);
    matmul(x.len() / k, k, n, x, t.data())
}

fn feed_forward(x: &[f64], d: usize, s: &ParamStore, ids: FfIds) -> Vec<f64> {
    let rows = x.len() / d;
    let mut h = project(x, s, ids.w1);
    let h_dim = h.len() / rows;
    let b1 = s.get(ids.b1).data();
    for row in h.chunks_mut(h_dim) {
        for (v, b) in row.iter_mut().zip(b1) {
            *v = (*v + b).max(0.0);
        }
    }
    let mut o = project(&h, s, ids.w2);
    let b2 = s.get(ids.b2).data();
    for row in o.chunks_mut(d) {
        row.iter_mut().zip(b2).for_each(|(v, b)| *v += b);
    }
    o
}

/// Multi-head attention of every `q` row against all `k`/`v` rows.
fn attend(q: &[f64], k: &[f64], v: &[f64], d: usize, heads: usize) -> Vec<f64> {
    let (nq, nk) = (q.len() / d, k.len() / d);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; nq * d];
    let mut scores = vec![0.0; nk];
    for h in 0..heads {
        let lo = h * dh;
        for i in 0..nq {
            let qi = &q[i * d + lo..i * d + lo + dh];
            for j in 0..nk {
                let kj = &k[j * d + lo..j * d + lo + dh];
                scores[j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            softmax_in_place(&mut scores[..nk]);
            let oi = &mut out[i * d + lo..i * d + lo + dh];
            for j in 0..nk {
                let vj = &v[j * d + lo..j * d + lo + dh];
                let p = scores[j];
                oi.iter_mut().zip(vj).for_each(|(o, x)| *o += p * x);
            }
        }
    }
    out
}

fn attention_block(
    xq: &[f64],
    xkv: &[f64],
    d: usize,
    heads: usize,
    s: &ParamStore,
    ids: AttnIds,
) -> Vec<f64> {
    let q = project(xq, s, ids.wq);
    let k = project(xkv, s, ids.wk);
    let v = project(xkv, s, ids.wv);
    let o = attend(&q, &k, &v, d, heads);
    project(&o, s, ids.wo)
}

fn add_in(x: &mut [f64], y: &[f64]) {
    x.iter_mut().zip(y).for_each(|(a, b)| *a += b);
}

impl Backbone {
    fn embed_rows(&self, s: &ParamStore, ids: &[u32], out: &mut Vec<f64>) {
        let d = self.cfg.d_model;
        let table = s.get(self.embed).data();
        for &t in ids {
            out.extend_from_slice(&table[t as usize * d..(t as usize + 1) * d]);
        }
    }

    /// Encoder hidden states for a prompted input, `(P + T) × d` row-major.
    pub fn encode(&self, s: &ParamStore, input: &PromptedInput) -> Result<Vec<f64>> {
        let d = self.cfg.d_model;
        if input.token_ids.is_empty() {
            return contract("encoder input must contain at least one token");
        }
        if input.prompt_vectors.len() % d != 0 {
            return shape_err("encode", "prompt block width differs from d_model");
        }
        self.check_ids(&input.token_ids)?;
        let mut x = input.prompt_vectors.clone();
        self.embed_rows(s, &input.token_ids, &mut x);
        let n = x.len() / d;
        add_in(&mut x, self.positions(n)?);
        let heads = self.cfg.n_heads;
        for layer in &self.encoder {
            let a = normed(&x, d, s, layer.ln1);
            let a = attention_block(&a, &a, d, heads, s, layer.attn);
            add_in(&mut x, &a);
            let f = normed(&x, d, s, layer.ln2);
            let f = feed_forward(&f, d, s, layer.ff);
            add_in(&mut x, &f);
        }
        layer_norm(&mut x, d, s, self.enc_norm);
        Ok(x)
    }

    fn start_decoding<'a>(&'a self, s: &'a ParamStore, memory: &[f64]) -> Decoder<'a> {
        let cross = self
            .decoder
            .iter()
            .map(|l| (project(memory, s, l.cross.wk), project(memory, s, l.cross.wv)))
            .collect();
        Decoder {
            bb: self,
            s,
            cross,
            self_kv: vec![(Vec::new(), Vec::new()); self.decoder.len()],
            pos: 0,
        }
    }

    /// Teacher-forced logits for every position of `dec_in`, `T × V` row-major.
    pub fn decoder_logits(&self, s: &ParamStore, memory: &[f64], dec_in: &[u32]) -> Result<Vec<f64>> {
        self.check_ids(dec_in)?;
        self.positions(dec_in.len())?;
        let mut dec = self.start_decoding(s, memory);
        let mut out = Vec::with_capacity(dec_in.len() * self.cfg.vocab_size);
        for &t in dec_in {
            out.extend(dec.step(t));
        }
        Ok(out)
    }

    /// Mean target cross-entropy without building a tape.
    pub fn lm_loss_value(&self, s: &ParamStore, input: &PromptedInput, target: &[u32]) -> Result<f64> {
        let dec_in = super::decoder_input(target)?;
        self.check_ids(target)?;
        let memory = self.encode(s, input)?;
        let logits = self.decoder_logits(s, &memory, &dec_in)?;
        let v = self.cfg.vocab_size;
        let mut loss = 0.0;
        for (r, &y) in target.iter().enumerate() {
            let row = &logits[r * v..(r + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            loss += lse - row[y as usize];
        }
        Ok(loss / target.len() as f64)
    }
}

struct Decoder<'a> {
    bb: &'a Backbone,
    s: &'a ParamStore,
    cross: Vec<(Vec<f64>, Vec<f64>)>,
    self_kv: Vec<(Vec<f64>, Vec<f64>)>,
    pos: usize,
}

impl Decoder<'_> {
    /// Feeds one token and returns the logits for the next.
    fn step(&mut self, token: u32) -> Vec<f64> {
        let bb = self.bb;
        let s = self.s;
        let d = bb.cfg.d_model;
        let heads = bb.cfg.n_heads;
        let mut x = Vec::with_capacity(d);
        bb.embed_rows(s, &[token], &mut x);
        add_in(&mut x, &bb.positions[self.pos * d..(self.pos + 1) * d]);
        for (l, layer) in bb.decoder.iter().enumerate() {
            let a = normed(&x, d, s, layer.ln1);
            let q = project(&a, s, layer.self_attn.wq);
            let (kc, vc) = &mut self.self_kv[l];
            kc.extend(project(&a, s, layer.self_attn.wk));
            vc.extend(project(&a, s, layer.self_attn.wv));
            let o = attend(&q, kc, vc, d, heads);
            add_in(&mut x, &project(&o, s, layer.self_attn.wo));

            let c = normed(&x, d, s, layer.ln2);
            let q = project(&c, s, layer.cross.wq);
            let (ck, cv) = &self.cross[l];
            let o = attend(&q, ck, cv, d, heads);
            add_in(&mut x, &project(&o, s, layer.cross.wo));

            let f = normed(&x, d, s, layer.ln3);
            add_in(&mut x, &feed_forward(&f, d, s, layer.ff));
        }
        layer_norm(&mut x, d, s, bb.dec_norm);
        let w = s.get(bb.out);
        let v = bb.cfg.vocab_size;
        let mut logits = vec![0.0; v];
        gemm(1, d, v, &x, false, w.data(), false, &mut logits, 0.0);
        self.pos += 1;
        logits
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Argmax decoding from BOS until EOS or `max_len` generated tokens.
///
/// The returned sequence excludes BOS and EOS.
pub fn greedy_generate(
    bb: &Backbone,
    s: &ParamStore,
    input: &PromptedInput,
    max_len: usize,
) -> Result<Vec<u32>> {
    if max_len == 0 {
        return contract("max_len must be at least 1");
    }
    let memory = bb.encode(s, input)?;
    bb.positions(max_len)?;
    let mut dec = bb.start_decoding(s, &memory);
    let mut out = Vec::new();
    let mut tok = BOS;
    for _ in 0..max_len {
        let logits = dec.step(tok);
        tok = argmax(&logits) as u32;
        if tok == EOS {
            break;
        }
        out.push(tok);
    }
    Ok(out)
}
