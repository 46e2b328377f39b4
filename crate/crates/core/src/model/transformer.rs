use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Attention, Binder, DecoderLayer, FeedForward, Linear, ModelBundle, ModelError, Norm, ParamStore, Result, Trainable};
use crate::autodiff::{Graph, Tensor, Var};
use crate::corpus::{Batch, PaddedIds};
use crate::margin::{sentence_cross_entropy, Grid};

const LN_EPS: f64 = 1e-5;
const MASK_FILL: f64 = -1e9;

/// One forward pass: a fresh graph, the parameter bindings into it and an
/// optional dropout stream. Without an RNG dropout is disabled.
pub struct Forward<'a> {
    pub g: Graph,
    pub binder: Binder<'a>,
    dropout_rate: f64,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Forward<'a> {
    /// Deterministic pass, dropout off.
    pub fn eval(store: &'a ParamStore, trainable: Trainable) -> Self {
        Self { g: Graph::new(), binder: Binder::new(store, trainable), dropout_rate: 0.0, rng: None }
    }

    pub fn train(store: &'a ParamStore, trainable: Trainable, dropout_rate: f64, rng: &'a mut ChaCha8Rng) -> Self {
        Self { g: Graph::new(), binder: Binder::new(store, trainable), dropout_rate, rng: Some(rng) }
    }

    fn p(&mut self, id: super::ParamId) -> Var {
        self.binder.var(&mut self.g, id)
    }

    fn linear(&mut self, x: Var, l: Linear) -> Result<Var> {
        let w = self.p(l.w);
        let b = self.p(l.b);
        let y = self.g.matmul(x, w)?;
        Ok(self.g.add(y, b)?)
    }

    fn norm(&mut self, x: Var, n: Norm) -> Result<Var> {
        let gain = self.p(n.gain);
        let bias = self.p(n.bias);
        Ok(self.g.layer_norm(x, gain, bias, LN_EPS)?)
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        let rate = self.dropout_rate;
        let Some(rng) = self.rng.as_deref_mut() else { return Ok(x) };
        if rate == 0.0 {
            return Ok(x);
        }
        let shape = self.g.value(x).shape().to_vec();
        let keep = 1.0 / (1.0 - rate);
        let n = self.g.value(x).numel();
        let mask: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
        let m = self.g.constant(Tensor::new(shape, mask)?);
        Ok(self.g.mul(x, m)?)
    }

    fn residual(&mut self, x: Var, sub: Var) -> Result<Var> {
        let d = self.dropout(sub)?;
        Ok(self.g.add(x, d)?)
    }

    fn feed_forward(&mut self, x: Var, ff: FeedForward) -> Result<Var> {
        let h = self.linear(x, ff.up)?;
        let h = self.g.relu(h);
        self.linear(h, ff.down)
    }

    /// Multi-head scaled dot-product attention of `xq [B,Tq,d]` over
    /// `xkv [B,Tk,d]`; `blocked` has `B*H*Tq*Tk` entries.
    fn attention(&mut self, xq: Var, xkv: Var, a: Attention, heads: usize, blocked: &[bool]) -> Result<Var> {
        let qs = self.g.value(xq).shape().to_vec();
        let ks = self.g.value(xkv).shape().to_vec();
        let (b, tq, d) = (qs[0], qs[1], qs[2]);
        let tk = ks[1];
        let dh = d / heads;

        let q = self.linear(xq, a.q)?;
        let k = self.linear(xkv, a.k)?;
        let v = self.linear(xkv, a.v)?;
        let split = |f: &mut Self, x: Var, t: usize| -> Result<Var> {
            let r = f.g.reshape(x, &[b, t, heads, dh])?;
            Ok(f.g.transpose(r, 1, 2)?)
        };
        let q = split(self, q, tq)?;
        let k = split(self, k, tk)?;
        let v = split(self, v, tk)?;
        let kt = self.g.transpose(k, 2, 3)?;
        let scores = self.g.matmul(q, kt)?;
        let scores = self.g.scale(scores, 1.0 / (dh as f64).sqrt());
        let scores = self.g.masked_fill(scores, blocked, MASK_FILL)?;
        let weights = self.g.softmax(scores);
        let ctx = self.g.matmul(weights, v)?;
        let ctx = self.g.transpose(ctx, 1, 2)?;
        let ctx = self.g.reshape(ctx, &[b, tq, d])?;
        self.linear(ctx, a.o)
    }

    fn embed(&mut self, table: super::ParamId, ids: &PaddedIds, d: usize) -> Result<Var> {
        let t = self.p(table);
        let e = self.g.embedding(t, &ids.ids, &[ids.batch, ids.len])?;
        let e = self.g.scale(e, (d as f64).sqrt());
        let pe = self.g.constant(positional_encoding(ids.len, d));
        let x = self.g.add(e, pe)?;
        self.dropout(x)
    }

    fn decoder_layer(
        &mut self,
        x: Var,
        layer: &DecoderLayer,
        heads: usize,
        self_blocked: &[bool],
        memory: Option<(Var, &[bool])>,
    ) -> Result<Var> {
        let h = self.norm(x, layer.self_norm)?;
        let h = self.attention(h, h, layer.self_attn, heads, self_blocked)?;
        let mut x = self.residual(x, h)?;
        if let (Some((cn, ca)), Some((mem, cross_blocked))) = (layer.cross, memory) {
            let h = self.norm(x, cn)?;
            let h = self.attention(h, mem, ca, heads, cross_blocked)?;
            x = self.residual(x, h)?;
        }
        let h = self.norm(x, layer.ff_norm)?;
        let h = self.feed_forward(h, layer.ff)?;
        self.residual(x, h)
    }

    fn project(&mut self, h: Var, out: Linear) -> Result<Var> {
        let logits = self.linear(h, out)?;
        Ok(self.g.softmax(logits))
    }
}

/// Fixed sinusoidal position table `[len, d]`.
pub(crate) fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in (0..d).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / d as f64);
            data[pos * d + i] = angle.sin();
            if i + 1 < d {
                data[pos * d + i + 1] = angle.cos();
            }
        }
    }
    Tensor::new(vec![len, d], data).expect("positive extents")
}

/// `[B, H, Tq, Tk]` mask: true where a query may not look at a key.
fn attention_mask(batch: usize, heads: usize, tq: usize, key_pad: &[bool], tk: usize, causal: bool) -> Vec<bool> {
    let mut out = Vec::with_capacity(batch * heads * tq * tk);
    for b in 0..batch {
        for _ in 0..heads {
            for i in 0..tq {
                for j in 0..tk {
                    out.push(key_pad[b * tk + j] || (causal && j > i));
                }
            }
        }
    }
    out
}

/// Probability rows `[batch, len, vocab]` detached from any graph.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbRows {
    pub batch: usize,
    pub len: usize,
    pub vocab: usize,
    pub data: Vec<f64>,
}

impl ProbRows {
    fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        Self { batch: s[0], len: s[1], vocab: s[2], data: t.data().to_vec() }
    }

    pub fn row(&self, b: usize, t: usize) -> &[f64] {
        let off = (b * self.len + t) * self.vocab;
        &self.data[off..off + self.vocab]
    }

    /// Probability of `gold[b,t]` for every position.
    pub fn gather(&self, gold: &PaddedIds) -> Vec<f64> {
        (0..self.batch * self.len).map(|i| self.data[i * self.vocab + gold.ids[i]]).collect()
    }
}

/// Mean negative log-likelihood per non-padding token: per-sentence sums
/// divided by the batch's non-padding token count.
pub fn cross_entropy(g: &mut Graph, probs: Var, gold: &PaddedIds) -> Result<Var> {
    let n = gold.real_tokens();
    if n == 0 {
        return Err(ModelError::InvalidArgument("cross entropy of an empty batch".into()));
    }
    let picked = g.gather(probs, &gold.ids)?;
    let grid = Grid { batch: gold.batch, len: gold.len, pad: &gold.pad };
    let per_sentence = sentence_cross_entropy(g, picked, grid)?;
    let total = g.sum(per_sentence);
    Ok(g.scale(total, 1.0 / n as f64))
}

impl ModelBundle {
    fn check_ids(&self, ids: &PaddedIds, side: &'static str, size: usize) -> Result<()> {
        if ids.len > self.config.max_len {
            return Err(ModelError::TooLong { len: ids.len, max_len: self.config.max_len });
        }
        if let Some(&id) = ids.ids.iter().find(|&&i| i >= size) {
            return Err(ModelError::TokenOutOfRange { side, id, size });
        }
        if ids.batch == 0 || ids.len == 0 {
            return Err(ModelError::InvalidArgument(format!("empty {} batch", side)));
        }
        Ok(())
    }

    /// Encoder states `[B, S, d]`.
    pub fn encode(&self, f: &mut Forward<'_>, src: &PaddedIds) -> Result<Var> {
        self.check_ids(src, "source", self.config.vocab_size_src)?;
        let (heads, d) = (self.config.n_heads, self.config.d_model);
        let blocked = attention_mask(src.batch, heads, src.len, &src.pad, src.len, false);
        let mut x = f.embed(self.nmt.src_embedding, src, d)?;
        for layer in &self.nmt.encoder {
            let h = f.norm(x, layer.attn_norm)?;
            let h = f.attention(h, h, layer.attn, heads, &blocked)?;
            x = f.residual(x, h)?;
            let h = f.norm(x, layer.ff_norm)?;
            let h = f.feed_forward(h, layer.ff)?;
            x = f.residual(x, h)?;
        }
        f.norm(x, self.nmt.encoder_norm)
    }

    /// Translation-model distributions `[B, T, V]` given encoder states.
    pub fn decode_with_memory(&self, f: &mut Forward<'_>, memory: Var, src_pad: &[bool], tgt_in: &PaddedIds) -> Result<Var> {
        self.check_ids(tgt_in, "target", self.config.vocab_size_tgt)?;
        let (heads, d) = (self.config.n_heads, self.config.d_model);
        let src_len = f.g.value(memory).shape()[1];
        if f.g.value(memory).shape()[0] != tgt_in.batch || src_pad.len() != tgt_in.batch * src_len {
            return Err(ModelError::InvalidArgument("source and target batches differ in size".into()));
        }
        let self_blocked = attention_mask(tgt_in.batch, heads, tgt_in.len, &tgt_in.pad, tgt_in.len, true);
        let cross_blocked = attention_mask(tgt_in.batch, heads, tgt_in.len, src_pad, src_len, false);
        let mut x = f.embed(self.nmt.tgt_embedding, tgt_in, d)?;
        for layer in &self.nmt.decoder {
            x = f.decoder_layer(x, layer, heads, &self_blocked, Some((memory, &cross_blocked)))?;
        }
        let h = f.norm(x, self.nmt.decoder_norm)?;
        f.project(h, self.nmt.output)
    }

    /// `p_NMT(y_t | y_<t, x)` rows `[B, T, V]` for teacher-forced `tgt_in`.
    pub fn nmt_probs(&self, f: &mut Forward<'_>, src: &PaddedIds, tgt_in: &PaddedIds) -> Result<Var> {
        if src.batch != tgt_in.batch {
            return Err(ModelError::InvalidArgument("source and target batches differ in size".into()));
        }
        let memory = self.encode(f, src)?;
        self.decode_with_memory(f, memory, &src.pad, tgt_in)
    }

    /// `p_LM(y_t | y_<t)` rows `[B, T, V]`.
    pub fn lm_probs(&self, f: &mut Forward<'_>, tgt_in: &PaddedIds) -> Result<Var> {
        self.check_ids(tgt_in, "target", self.config.vocab_size_tgt)?;
        let (heads, d) = (self.config.n_heads, self.config.d_model);
        let blocked = attention_mask(tgt_in.batch, heads, tgt_in.len, &tgt_in.pad, tgt_in.len, true);
        let mut x = f.embed(self.lm.tgt_embedding, tgt_in, d)?;
        for layer in &self.lm.layers {
            x = f.decoder_layer(x, layer, heads, &blocked, None)?;
        }
        let h = f.norm(x, self.lm.norm)?;
        f.project(h, self.lm.output)
    }

    /// Dropout-free translation-model rows for a batch.
    pub fn nmt_forward(&self, batch: &Batch) -> Result<ProbRows> {
        let mut f = Forward::eval(&self.store, Trainable::None);
        let p = self.nmt_probs(&mut f, &batch.src, &batch.tgt_in)?;
        Ok(ProbRows::from_tensor(f.g.value(p)))
    }

    /// Dropout-free language-model rows. The source side plays no part.
    pub fn lm_forward(&self, tgt_in: &PaddedIds) -> Result<ProbRows> {
        let mut f = Forward::eval(&self.store, Trainable::None);
        let p = self.lm_probs(&mut f, tgt_in)?;
        Ok(ProbRows::from_tensor(f.g.value(p)))
    }

    /// Golden-token probabilities `(p_nmt, p_lm)` laid out like `batch.tgt_out`.
    pub fn golden_probabilities(&self, batch: &Batch) -> Result<(Vec<f64>, Vec<f64>)> {
        let nmt = self.nmt_forward(batch)?;
        let lm = self.lm_forward(&batch.tgt_in)?;
        Ok((nmt.gather(&batch.tgt_out), lm.gather(&batch.tgt_out)))
    }
}
