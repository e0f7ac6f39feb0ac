//! The bi-encoder: two structurally identical transformer encoders with
//! disjoint parameters, one for label sequences and one for marked sentences.
//!
//! Each encoder is a post-LN transformer (learned absolute positions, GELU
//! feed-forward) with an MLM output head. Sequences of a batch are stacked
//! row-wise and attention is confined to each sequence's own rows.

use crate::corpus::vocab::{CLS, E1_START, E2_START, PAD, SEP};
use crate::error::{Error, Result};
use crate::rng::{derive, normal_tensor, Rng, Stream};
use crate::tensor::graph::AttentionSpec;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};
use std::ops::Range;

/// Additive attention bias that removes padding keys.
const PAD_BIAS: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Vocabulary size; 0 means "take it from the vocabulary".
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub init_std: f64,
    /// Standard deviation of the token embedding table.
    pub token_init_std: f64,
    /// Start both encoders from identical weights (they still train
    /// independently), standing in for a shared pretrained checkpoint.
    pub shared_init: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 256,
            max_seq_len: 64,
            init_std: 0.02,
            token_init_std: 1.0,
            shared_init: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.vocab_size == 0 {
            return bad("encoder vocab_size is unset".into());
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.ffn_dim == 0 || self.max_seq_len < 3 {
            return bad("ffn_dim must be positive and max_seq_len at least 3".into());
        }
        for (name, v) in [("init_std", self.init_std), ("token_init_std", self.token_init_std)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} {v} must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct LayerParams {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

/// Parameter handles of one encoder. The tensors live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Encoder {
    pub prefix: String,
    config: EncoderConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    emb_ln_g: ParamId,
    emb_ln_b: ParamId,
    layers: Vec<LayerParams>,
    mlm_w: ParamId,
    mlm_b: ParamId,
}

/// Output of [`Encoder::encode_batch`]: stacked hidden states and the row range
/// of each input sequence.
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    pub hidden: Var,
    pub ranges: Vec<Range<usize>>,
}

impl Encoder {
    /// Registers a freshly initialised encoder under `prefix.*`.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        config: EncoderConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        let (v, d, f, l, std) = (
            config.vocab_size,
            config.d_model,
            config.ffn_dim,
            config.max_seq_len,
            config.init_std,
        );
        let mut add = |name: String, t: Tensor| store.add(format!("{prefix}.{name}"), t);
        let tok_emb = add("tok_emb".into(), normal_tensor(rng, v, d, config.token_init_std))?;
        let pos_emb = add("pos_emb".into(), normal_tensor(rng, l, d, std))?;
        let emb_ln_g = add("emb_ln.gamma".into(), Tensor::full(1, d, 1.0))?;
        let emb_ln_b = add("emb_ln.beta".into(), Tensor::zeros(1, d))?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = |n: &str| format!("layer{i}.{n}");
            layers.push(LayerParams {
                wq: add(p("attn.wq"), normal_tensor(rng, d, d, std))?,
                bq: add(p("attn.bq"), Tensor::zeros(1, d))?,
                wk: add(p("attn.wk"), normal_tensor(rng, d, d, std))?,
                bk: add(p("attn.bk"), Tensor::zeros(1, d))?,
                wv: add(p("attn.wv"), normal_tensor(rng, d, d, std))?,
                bv: add(p("attn.bv"), Tensor::zeros(1, d))?,
                wo: add(p("attn.wo"), normal_tensor(rng, d, d, std))?,
                bo: add(p("attn.bo"), Tensor::zeros(1, d))?,
                ln1_g: add(p("ln1.gamma"), Tensor::full(1, d, 1.0))?,
                ln1_b: add(p("ln1.beta"), Tensor::zeros(1, d))?,
                w1: add(p("ffn.w1"), normal_tensor(rng, d, f, std))?,
                b1: add(p("ffn.b1"), Tensor::zeros(1, f))?,
                w2: add(p("ffn.w2"), normal_tensor(rng, f, d, std))?,
                b2: add(p("ffn.b2"), Tensor::zeros(1, d))?,
                ln2_g: add(p("ln2.gamma"), Tensor::full(1, d, 1.0))?,
                ln2_b: add(p("ln2.beta"), Tensor::zeros(1, d))?,
            });
        }
        let mlm_w = add("mlm.w".into(), normal_tensor(rng, d, v, std))?;
        let mlm_b = add("mlm.b".into(), Tensor::zeros(1, v))?;
        Ok(Self {
            prefix: prefix.to_string(),
            config,
            tok_emb,
            pos_emb,
            emb_ln_g,
            emb_ln_b,
            layers,
            mlm_w,
            mlm_b,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Ids of every parameter owned by this encoder.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.tok_emb, self.pos_emb, self.emb_ln_g, self.emb_ln_b];
        for l in &self.layers {
            ids.extend([
                l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo, l.ln1_g, l.ln1_b, l.w1, l.b1,
                l.w2, l.b2, l.ln2_g, l.ln2_b,
            ]);
        }
        ids.extend([self.mlm_w, self.mlm_b]);
        ids
    }

    fn linear(&self, g: &mut Graph, store: &ParamStore, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let (w, b) = (g.param(store, w), g.param(store, b));
        let h = g.matmul(x, w)?;
        g.add(h, b)
    }

    /// Encodes every sequence in one pass; hidden states are stacked row-wise.
    pub fn encode_batch<S: AsRef<[usize]>>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        seqs: &[S],
    ) -> Result<EncodedBatch> {
        let cfg = &self.config;
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut ranges = Vec::with_capacity(seqs.len());
        let mut key_bias = Vec::new();
        for s in seqs {
            let s = s.as_ref();
            if s.len() > cfg.max_seq_len {
                return Err(Error::InvalidArgument(format!(
                    "sequence of length {} exceeds max_seq_len {}",
                    s.len(),
                    cfg.max_seq_len
                )));
            }
            if let Some(&id) = s.iter().find(|&&t| t >= cfg.vocab_size) {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab: cfg.vocab_size,
                });
            }
            let start = ids.len();
            ids.extend_from_slice(s);
            positions.extend(0..s.len());
            key_bias.extend(s.iter().map(|&t| if t == PAD { PAD_BIAS } else { 0.0 }));
            ranges.push(start..ids.len());
        }
        let tok = g.param(store, self.tok_emb);
        let pos = g.param(store, self.pos_emb);
        let te = g.embedding(tok, &ids)?;
        let pe = g.embedding(pos, &positions)?;
        let x = g.add(te, pe)?;
        let (lg, lb) = (g.param(store, self.emb_ln_g), g.param(store, self.emb_ln_b));
        let mut x = g.layer_norm(x, lg, lb)?;
        let spec = AttentionSpec {
            segments: &ranges,
            heads: cfg.n_heads,
            key_bias: &key_bias,
        };
        for l in &self.layers {
            let q = self.linear(g, store, x, l.wq, l.bq)?;
            let k = self.linear(g, store, x, l.wk, l.bk)?;
            let v = self.linear(g, store, x, l.wv, l.bv)?;
            let a = g.attention(q, k, v, &spec)?;
            let o = self.linear(g, store, a, l.wo, l.bo)?;
            let r = g.add(x, o)?;
            let (g1, b1) = (g.param(store, l.ln1_g), g.param(store, l.ln1_b));
            x = g.layer_norm(r, g1, b1)?;
            let h = self.linear(g, store, x, l.w1, l.b1)?;
            let h = g.gelu(h);
            let f = self.linear(g, store, h, l.w2, l.b2)?;
            let r = g.add(x, f)?;
            let (g2, b2) = (g.param(store, l.ln2_g), g.param(store, l.ln2_b));
            x = g.layer_norm(r, g2, b2)?;
        }
        Ok(EncodedBatch { hidden: x, ranges })
    }

    /// Vocabulary logits at the given stacked rows of `hidden`.
    pub fn mlm_logits(&self, g: &mut Graph, store: &ParamStore, hidden: Var, rows: &[usize]) -> Result<Var> {
        let h = g.gather_rows(hidden, rows)?;
        self.linear(g, store, h, self.mlm_w, self.mlm_b)
    }

    /// Hidden states of a single sequence, outside any training graph.
    pub fn encode(&self, store: &ParamStore, tokens: &[usize]) -> Result<HiddenStates> {
        let mut g = Graph::new();
        let enc = self.encode_batch(&mut g, store, &[tokens])?;
        HiddenStates::from_tokens(g.value(enc.hidden).clone(), tokens)
    }
}

/// Per-token hidden states of one sequence plus the rows pooling needs.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    pub states: Tensor,
    pub cls: usize,
    /// Rows that are neither `[CLS]`, `[SEP]` nor `[PAD]`.
    pub content: Vec<usize>,
    /// Rows of `[E1s]` and `[E2s]`, for sentences.
    pub entity_starts: Option<(usize, usize)>,
}

impl HiddenStates {
    pub fn from_tokens(states: Tensor, tokens: &[usize]) -> Result<Self> {
        if states.rows() != tokens.len() {
            return Err(Error::shape(
                "HiddenStates",
                format!("{} rows for {} tokens", states.rows(), tokens.len()),
            ));
        }
        let content = content_rows(tokens);
        let find = |m| tokens.iter().position(|&t| t == m);
        let entity_starts = find(E1_START).zip(find(E2_START));
        Ok(Self {
            states,
            cls: 0,
            content,
            entity_starts,
        })
    }
}

pub(crate) fn content_rows(tokens: &[usize]) -> Vec<usize> {
    tokens
        .iter()
        .enumerate()
        .filter(|(_, &t)| t != CLS && t != SEP && t != PAD)
        .map(|(i, _)| i)
        .collect()
}

/// A pooled `2d`-dimensional embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding2d(Vec<f64>);

impl Embedding2d {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding".into()));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Unit-L2 copy; zero vectors are an error.
    pub fn normalized(&self) -> Result<Vec<f64>> {
        let n = self.norm();
        if n == 0.0 {
            return Err(Error::ZeroNorm {
                what: "embedding",
                row: 0,
            });
        }
        Ok(self.0.iter().map(|x| x / n).collect())
    }
}

impl AsRef<[f64]> for Embedding2d {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// `h_cls` concatenated with the mean of content rows.
pub fn pool_label(h: &HiddenStates) -> Result<Embedding2d> {
    if h.content.is_empty() {
        return Err(Error::InvalidArgument("label sequence has no content tokens".into()));
    }
    let d = h.states.cols();
    let mut out = h.states.row_slice(h.cls).to_vec();
    let mut mean = vec![0.0; d];
    for &r in &h.content {
        for (m, &x) in mean.iter_mut().zip(h.states.row_slice(r)) {
            *m += x;
        }
    }
    let n = h.content.len() as f64;
    out.extend(mean.into_iter().map(|m| m / n));
    Embedding2d::new(out)
}

/// Hidden state at `[E1s]` concatenated with the one at `[E2s]`.
pub fn pool_sentence(h: &HiddenStates) -> Result<Embedding2d> {
    let (b, e) = h
        .entity_starts
        .ok_or_else(|| Error::InvalidArgument("sentence has no entity marker positions".into()))?;
    if b >= h.states.rows() || e >= h.states.rows() {
        return Err(Error::InvalidArgument(format!(
            "marker rows ({b}, {e}) outside {} hidden rows",
            h.states.rows()
        )));
    }
    let mut out = h.states.row_slice(b).to_vec();
    out.extend_from_slice(h.states.row_slice(e));
    Embedding2d::new(out)
}

/// Label pooling over a stacked batch; one `2d` row per sequence.
pub fn pool_label_batch<S: AsRef<[usize]>>(
    g: &mut Graph,
    batch: &EncodedBatch,
    seqs: &[S],
) -> Result<Var> {
    let total = batch.ranges.last().map_or(0, |r| r.end);
    let mut pool = Tensor::zeros(seqs.len(), total);
    let mut cls_rows = Vec::with_capacity(seqs.len());
    for (i, (range, s)) in batch.ranges.iter().zip(seqs).enumerate() {
        let content = content_rows(s.as_ref());
        if content.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "label sequence {i} has no content tokens"
            )));
        }
        let w = 1.0 / content.len() as f64;
        for r in content {
            pool.set(i, range.start + r, w);
        }
        cls_rows.push(range.start);
    }
    let pool = g.constant(pool);
    let mean = g.matmul(pool, batch.hidden)?;
    let cls = g.gather_rows(batch.hidden, &cls_rows)?;
    g.concat(&[cls, mean], 1)
}

/// Sentence pooling over a stacked batch; `markers[i]` are the `[E1s]`/`[E2s]`
/// positions within sequence `i`.
pub fn pool_sentence_batch(g: &mut Graph, batch: &EncodedBatch, markers: &[(usize, usize)]) -> Result<Var> {
    if markers.len() != batch.ranges.len() {
        return Err(Error::shape(
            "pool_sentence_batch",
            format!("{} marker pairs for {} sequences", markers.len(), batch.ranges.len()),
        ));
    }
    let mut b_rows = Vec::with_capacity(markers.len());
    let mut e_rows = Vec::with_capacity(markers.len());
    for (range, &(b, e)) in batch.ranges.iter().zip(markers) {
        if b >= range.len() || e >= range.len() {
            return Err(Error::InvalidArgument(format!(
                "marker positions ({b}, {e}) outside a sequence of length {}",
                range.len()
            )));
        }
        b_rows.push(range.start + b);
        e_rows.push(range.start + e);
    }
    let hb = g.gather_rows(batch.hidden, &b_rows)?;
    let he = g.gather_rows(batch.hidden, &e_rows)?;
    g.concat(&[hb, he], 1)
}

/// Both encoders, the shared temperature, and the store that owns them.
#[derive(Debug, Clone)]
pub struct BiEncoder {
    pub store: ParamStore,
    pub label: Encoder,
    pub sentence: Encoder,
    pub temperature: ParamId,
    pub config: EncoderConfig,
}

pub const LABEL_PREFIX: &str = "label_encoder";
pub const SENTENCE_PREFIX: &str = "sentence_encoder";
pub const TEMPERATURE_NAME: &str = "temperature";

impl BiEncoder {
    pub fn new(config: EncoderConfig, seed: u64, init_temperature: f64) -> Result<Self> {
        if !(init_temperature > 0.0 && init_temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "initial temperature {init_temperature} must be positive"
            )));
        }
        let mut store = ParamStore::new();
        let label = Encoder::register(
            &mut store,
            LABEL_PREFIX,
            config,
            &mut derive(seed, Stream::Init, &[0]),
        )?;
        let sentence_stream = if config.shared_init { 0 } else { 1 };
        let sentence = Encoder::register(
            &mut store,
            SENTENCE_PREFIX,
            config,
            &mut derive(seed, Stream::Init, &[sentence_stream]),
        )?;
        let temperature = store.add(TEMPERATURE_NAME, Tensor::scalar(init_temperature))?;
        Ok(Self {
            store,
            label,
            sentence,
            temperature,
            config,
        })
    }

    pub fn temperature_value(&self) -> f64 {
        self.store.value(self.temperature).item()
    }

    /// Raises the temperature to `min` if an update pushed it lower.
    pub fn clamp_temperature(&mut self, min: f64) {
        let t = self.store.value_mut(self.temperature);
        let v = t.item().max(min);
        t.data_mut()[0] = v;
    }

    /// Sentence embeddings of marked sequences, encoded `chunk` at a time.
    pub fn embed_sentences<S: AsRef<[usize]>>(
        &self,
        seqs: &[S],
        markers: &[(usize, usize)],
        chunk: usize,
    ) -> Result<Vec<Embedding2d>> {
        let mut out = Vec::with_capacity(seqs.len());
        for (s, m) in seqs.chunks(chunk.max(1)).zip(markers.chunks(chunk.max(1))) {
            let mut g = Graph::new();
            let enc = self.sentence.encode_batch(&mut g, &self.store, s)?;
            let pooled = pool_sentence_batch(&mut g, &enc, m)?;
            out.extend(rows_to_embeddings(g.value(pooled))?);
        }
        Ok(out)
    }

    pub fn embed_labels<S: AsRef<[usize]>>(&self, seqs: &[S], chunk: usize) -> Result<Vec<Embedding2d>> {
        let mut out = Vec::with_capacity(seqs.len());
        for s in seqs.chunks(chunk.max(1)) {
            let mut g = Graph::new();
            let enc = self.label.encode_batch(&mut g, &self.store, s)?;
            let pooled = pool_label_batch(&mut g, &enc, s)?;
            out.extend(rows_to_embeddings(g.value(pooled))?);
        }
        Ok(out)
    }
}

fn rows_to_embeddings(t: &Tensor) -> Result<Vec<Embedding2d>> {
    (0..t.rows())
        .map(|i| Embedding2d::new(t.row_slice(i).to_vec()))
        .collect()
}
