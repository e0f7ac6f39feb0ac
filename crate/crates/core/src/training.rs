//! Pre-training loop: epoch batching, per-instance masking, the combined
//! objective, AdamW updates, temperature clamping and resumable checkpoints.

use crate::corpus::masking::{apply_blank_masking, apply_mlm_masking, PreprocessConfig};
use crate::corpus::{PreparedCorpus, Vocab};
use crate::encoder::{pool_label_batch, pool_sentence_batch, BiEncoder, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::losses::{
    cosine_similarity_matrix, mlm_loss, scl_label_loss, scl_loss, scl_sentence_loss, total_loss,
    BatchPairing, INITIAL_TEMPERATURE, MIN_TEMPERATURE,
};
use crate::rng::{derive, Stream};
use crate::tensor::{AdamW, AdamWConfig, Checkpoint, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveMode {
    /// `scl / 2 + mlm` with both contrastive directions.
    Full,
    SentenceAnchoredOnly,
    LabelAnchoredOnly,
    NoMlm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    Uniform,
    /// Interleaves relations so batches mix classes as evenly as possible.
    ClassBalanced,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub rng_seed: u64,
    pub objective_mode: ObjectiveMode,
    /// Steps between checkpoints; 0 disables intermediate checkpoints.
    pub checkpoint_every: u64,
    /// Steps between evaluations; 0 disables them.
    pub eval_every: u64,
    pub sampler: Sampler,
    /// Divide each label's positive sum by `|A|` in the label-anchored loss.
    pub normalize_label_positives: bool,
    pub init_temperature: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 30,
            lr: 1e-3,
            weight_decay: 0.01,
            rng_seed: 0,
            objective_mode: ObjectiveMode::Full,
            checkpoint_every: 0,
            eval_every: 0,
            sampler: Sampler::Uniform,
            normalize_label_positives: false,
            init_temperature: INITIAL_TEMPERATURE,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.batch_size < 2 {
            return bad(format!(
                "batch_size {} gives no contrastive signal; use at least 2",
                self.batch_size
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("lr and weight_decay must be finite and non-negative".into());
        }
        if !(self.init_temperature >= MIN_TEMPERATURE && self.init_temperature.is_finite()) {
            return bad(format!(
                "init_temperature {} is below {MIN_TEMPERATURE}",
                self.init_temperature
            ));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// One JSON line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: u64,
    pub epoch: usize,
    pub batch: usize,
    pub n: usize,
    pub m: usize,
    pub scl_s: f64,
    pub scl_l: f64,
    pub scl: f64,
    pub mlm_s: f64,
    pub mlm_l: f64,
    pub mlm: f64,
    /// The optimized objective under the configured mode.
    pub loss: f64,
    /// Temperature after the step's clamp.
    pub tau: f64,
    pub wall_ms: f64,
}

/// Inputs of one step after masking.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedBatch {
    pub indices: Vec<usize>,
    pub pairing: BatchPairing,
    pub sentences: Vec<Vec<usize>>,
    pub markers: Vec<(usize, usize)>,
    /// `(sequence, position, original id)` of each masked sentence token.
    pub sentence_targets: Vec<(usize, usize, usize)>,
    /// Label sequences, one per row of the pairing.
    pub labels: Vec<Vec<usize>>,
    pub label_targets: Vec<(usize, usize, usize)>,
}

/// Sentence indices of every batch of `epoch`. Each sentence appears exactly
/// once per epoch.
pub fn make_batches(data: &PreparedCorpus, cfg: &TrainConfig, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = derive(cfg.rng_seed, Stream::EpochOrder, &[epoch as u64]);
    let order: Vec<usize> = match cfg.sampler {
        Sampler::Uniform => {
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut rng);
            order
        }
        Sampler::ClassBalanced => {
            let mut by_rel: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, r) in data.relations.iter().enumerate() {
                by_rel.entry(r).or_default().push(i);
            }
            let mut queues: Vec<Vec<usize>> = by_rel.into_values().collect();
            for q in &mut queues {
                q.shuffle(&mut rng);
            }
            queues.shuffle(&mut rng);
            let mut order = Vec::with_capacity(data.len());
            let longest = queues.iter().map(Vec::len).max().unwrap_or(0);
            for k in 0..longest {
                order.extend(queues.iter().filter_map(|q| q.get(k)));
            }
            order
        }
    };
    if data.len() < cfg.batch_size {
        log::warn!(
            "corpus of {} sentences is smaller than batch_size {}; using one smaller batch",
            data.len(),
            cfg.batch_size
        );
    }
    order.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect()
}

/// Applies blank and MLM masking with per-instance random streams, so the
/// result does not depend on batch composition or processing order.
pub fn prepare_batch(
    data: &PreparedCorpus,
    indices: &[usize],
    pre: &PreprocessConfig,
    seed: u64,
    epoch: usize,
) -> Result<PreparedBatch> {
    let relations: Vec<&str> = indices.iter().map(|&i| data.relations[i].as_str()).collect();
    let pairing = BatchPairing::from_relations(&relations)?;
    let mut sentences = Vec::with_capacity(indices.len());
    let mut markers = Vec::with_capacity(indices.len());
    let mut sentence_targets = Vec::new();
    for (k, &i) in indices.iter().enumerate() {
        let mut rng = derive(seed, Stream::SentenceMask, &[pre.rng_seed, epoch as u64, i as u64]);
        let blanked = apply_blank_masking(&data.sentences[i], pre, &mut rng);
        let masked = apply_mlm_masking(&blanked.tokens, pre, &mut rng);
        sentence_targets.extend(masked.targets.iter().map(|(&p, &t)| (k, p, t)));
        markers.push((blanked.pos_e1s, blanked.pos_e2s));
        sentences.push(masked.tokens);
    }
    let mut labels = Vec::with_capacity(pairing.m());
    let mut label_targets = Vec::new();
    for (row, rel) in pairing.relation_ids.iter().enumerate() {
        let seq = data
            .label_sequences
            .get(rel)
            .ok_or_else(|| Error::UnknownRelation(rel.clone()))?;
        // Keyed by the first sentence carrying the relation, which is unique
        // within the epoch.
        let anchor = indices[pairing.positives[row][0]] as u64;
        let mut rng = derive(seed, Stream::LabelMask, &[pre.rng_seed, epoch as u64, anchor]);
        let masked = apply_mlm_masking(seq, pre, &mut rng);
        label_targets.extend(masked.targets.iter().map(|(&p, &t)| (row, p, t)));
        labels.push(masked.tokens);
    }
    Ok(PreparedBatch {
        indices: indices.to_vec(),
        pairing,
        sentences,
        markers,
        sentence_targets,
        labels,
        label_targets,
    })
}

/// Graph nodes of every loss term of one batch.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub scl_s: Var,
    pub scl_l: Var,
    pub scl: Var,
    pub mlm_s: Var,
    pub mlm_l: Var,
    pub mlm: Var,
    /// What the configured mode optimizes.
    pub objective: Var,
}

fn mlm_side(
    g: &mut Graph,
    store: &ParamStore,
    enc: &Encoder,
    hidden: Var,
    ranges: &[std::ops::Range<usize>],
    targets: &[(usize, usize, usize)],
) -> Result<Var> {
    let rows: Vec<usize> = targets.iter().map(|&(k, p, _)| ranges[k].start + p).collect();
    let ids: Vec<usize> = targets.iter().map(|&(_, _, t)| t).collect();
    let logits = enc.mlm_logits(g, store, hidden, &rows)?;
    mlm_loss(g, logits, &ids)
}

/// Forward pass of both encoders and every loss term.
pub fn build_loss(
    g: &mut Graph,
    store: &ParamStore,
    model: &BiEncoder,
    batch: &PreparedBatch,
    mode: ObjectiveMode,
    normalize_label_positives: bool,
) -> Result<LossTerms> {
    let s_enc = model.sentence.encode_batch(g, store, &batch.sentences)?;
    let s_emb = pool_sentence_batch(g, &s_enc, &batch.markers)?;
    let l_enc = model.label.encode_batch(g, store, &batch.labels)?;
    let l_emb = pool_label_batch(g, &l_enc, &batch.labels)?;
    let tau = g.param(store, model.temperature);
    let cos = cosine_similarity_matrix(g, s_emb, l_emb)?;
    let scl_s = scl_sentence_loss(g, cos, &batch.pairing, tau)?;
    let scl_l = scl_label_loss(g, cos, &batch.pairing, tau, normalize_label_positives)?;
    let scl = scl_loss(g, scl_s, scl_l)?;
    let mlm_s = mlm_side(g, store, &model.sentence, s_enc.hidden, &s_enc.ranges, &batch.sentence_targets)?;
    let mlm_l = mlm_side(g, store, &model.label, l_enc.hidden, &l_enc.ranges, &batch.label_targets)?;
    let mlm = g.add(mlm_s, mlm_l)?;
    let objective = match mode {
        ObjectiveMode::Full => total_loss(g, scl, mlm)?,
        ObjectiveMode::SentenceAnchoredOnly => total_loss(g, scl_s, mlm)?,
        ObjectiveMode::LabelAnchoredOnly => total_loss(g, scl_l, mlm)?,
        ObjectiveMode::NoMlm => g.scale(scl, 0.5),
    };
    Ok(LossTerms {
        scl_s,
        scl_l,
        scl,
        mlm_s,
        mlm_l,
        mlm,
        objective,
    })
}

/// Model, optimizer and position in the batch stream.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: BiEncoder,
    pub optimizer: AdamW,
    pub config: TrainConfig,
    pub preprocess: PreprocessConfig,
    step: u64,
}

impl Trainer {
    pub fn new(encoder: EncoderConfig, config: TrainConfig, preprocess: PreprocessConfig) -> Result<Self> {
        config.validate()?;
        preprocess.validate()?;
        if preprocess.max_seq_len > encoder.max_seq_len {
            return Err(Error::InvalidArgument(format!(
                "preprocess max_seq_len {} exceeds encoder max_seq_len {}",
                preprocess.max_seq_len, encoder.max_seq_len
            )));
        }
        let model = BiEncoder::new(encoder, config.rng_seed, config.init_temperature)?;
        let optimizer = AdamW::new(config.optimizer(), &model.store);
        Ok(Self {
            model,
            optimizer,
            config,
            preprocess,
            step: 0,
        })
    }

    /// Steps completed so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn steps_per_epoch(&self, data: &PreparedCorpus) -> usize {
        data.len().div_ceil(self.config.batch_size)
    }

    pub fn total_steps(&self, data: &PreparedCorpus) -> u64 {
        (self.steps_per_epoch(data) * self.config.epochs) as u64
    }

    /// One optimizer step on `batch`.
    pub fn train_step(&mut self, batch: &PreparedBatch, epoch: usize, batch_id: usize) -> Result<TrainLogRecord> {
        let start = Instant::now();
        let mut g = Graph::new();
        let at = format!("step {} (epoch {epoch}, batch {batch_id})", self.step + 1);
        let terms = build_loss(
            &mut g,
            &self.model.store,
            &self.model,
            batch,
            self.config.objective_mode,
            self.config.normalize_label_positives,
        )
        .map_err(|e| match e {
            Error::NonFinite(what) => Error::NonFinite(format!("{what} at {at}")),
            e => e,
        })?;
        let v = |x: Var| g.value(x).item();
        let loss = v(terms.objective);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss is {loss} at {at}")));
        }
        g.backward(terms.objective, &mut self.model.store)?;
        self.optimizer.step(&mut self.model.store).map_err(|e| match e {
            Error::NonFinite(what) => Error::NonFinite(format!("{what} at {at}")),
            e => e,
        })?;
        self.model.clamp_temperature(MIN_TEMPERATURE);
        self.step += 1;
        Ok(TrainLogRecord {
            step: self.step,
            epoch,
            batch: batch_id,
            n: batch.pairing.n(),
            m: batch.pairing.m(),
            scl_s: v(terms.scl_s),
            scl_l: v(terms.scl_l),
            scl: v(terms.scl),
            mlm_s: v(terms.mlm_s),
            mlm_l: v(terms.mlm_l),
            mlm: v(terms.mlm),
            loss,
            tau: self.model.temperature_value(),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Trains from the current step until `max_steps` (or the configured
    /// number of epochs), calling `on_step` after every step.
    pub fn run<F>(&mut self, data: &PreparedCorpus, max_steps: Option<u64>, mut on_step: F) -> Result<()>
    where
        F: FnMut(&mut Trainer, &TrainLogRecord) -> Result<()>,
    {
        let per_epoch = self.steps_per_epoch(data) as u64;
        let end = max_steps.unwrap_or_else(|| self.total_steps(data));
        while self.step < end {
            let epoch = (self.step / per_epoch) as usize;
            let batches = make_batches(data, &self.config, epoch);
            let mut b = (self.step % per_epoch) as usize;
            while b < batches.len() && self.step < end {
                let batch = prepare_batch(data, &batches[b], &self.preprocess, self.config.rng_seed, epoch)?;
                let rec = self.train_step(&batch, epoch, b)?;
                on_step(self, &rec)?;
                b += 1;
            }
        }
        Ok(())
    }

    /// Full trainer state: parameters, optimizer moments, step, configs and
    /// vocabulary.
    pub fn checkpoint(&self, vocab: &Vocab) -> Result<Checkpoint> {
        let meta = serde_json::json!({
            "step": self.step,
            "optimizer_step": self.optimizer.step_count(),
            "encoder": self.model.config,
            "train": self.config,
            "preprocess": self.preprocess,
            "vocab": serde_json::from_str::<serde_json::Value>(&vocab.to_json()?)?,
        });
        let mut ck = Checkpoint::new(meta);
        for (_, p) in self.model.store.iter() {
            ck.push(p.name.clone(), p.value.clone());
        }
        let names: Vec<&str> = self.model.store.iter().map(|(_, p)| p.name.as_str()).collect();
        for (name, t) in names.iter().zip(self.optimizer.first_moments()) {
            ck.push(format!("{ADAM_FIRST}{name}"), t.clone());
        }
        for (name, t) in names.iter().zip(self.optimizer.second_moments()) {
            ck.push(format!("{ADAM_SECOND}{name}"), t.clone());
        }
        Ok(ck)
    }

    /// Rebuilds a trainer from [`Trainer::checkpoint`] output.
    pub fn restore(ck: &Checkpoint) -> Result<(Self, Vocab)> {
        let meta = CheckpointMeta::from_checkpoint(ck)?;
        let mut trainer = Trainer::new(meta.encoder, meta.train, meta.preprocess)?;
        load_params(&mut trainer.model.store, ck)?;
        let moments = |prefix: &str| -> Result<Vec<Tensor>> {
            trainer
                .model
                .store
                .iter()
                .map(|(_, p)| ck.require(&format!("{prefix}{}", p.name)).cloned())
                .collect()
        };
        let (first, second) = (moments(ADAM_FIRST)?, moments(ADAM_SECOND)?);
        trainer.optimizer.restore(meta.optimizer_step, first, second)?;
        trainer.step = meta.step;
        Ok((trainer, meta.vocab))
    }
}

const ADAM_FIRST: &str = "adamw.m.";
const ADAM_SECOND: &str = "adamw.v.";

fn load_params(store: &mut ParamStore, ck: &Checkpoint) -> Result<()> {
    let model_tensors = ck
        .tensors
        .iter()
        .filter(|(n, _)| !n.starts_with(ADAM_FIRST) && !n.starts_with(ADAM_SECOND))
        .map(|(n, t)| (n.as_str(), t));
    store.load_values(model_tensors)
}

/// Metadata stored alongside the tensors of a checkpoint.
#[derive(Debug, Clone)]
pub struct CheckpointMeta {
    pub step: u64,
    pub optimizer_step: u64,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub preprocess: PreprocessConfig,
    pub vocab: Vocab,
}

impl CheckpointMeta {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        fn field<T: serde::de::DeserializeOwned>(ck: &Checkpoint, name: &str) -> Result<T> {
            let v = ck
                .meta
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("metadata lacks `{name}`")))?;
            T::deserialize(v).map_err(|e| Error::Checkpoint(format!("metadata `{name}`: {e}")))
        }
        let vocab: serde_json::Value = field(ck, "vocab")?;
        Ok(Self {
            step: field(ck, "step")?,
            optimizer_step: field(ck, "optimizer_step")?,
            encoder: field(ck, "encoder")?,
            train: field(ck, "train")?,
            preprocess: field(ck, "preprocess")?,
            vocab: Vocab::from_json(&vocab.to_string())?,
        })
    }
}

/// Loads only the model and vocabulary from a checkpoint, for evaluation.
pub fn load_model(ck: &Checkpoint) -> Result<(BiEncoder, Vocab, CheckpointMeta)> {
    let meta = CheckpointMeta::from_checkpoint(ck)?;
    let mut model = BiEncoder::new(meta.encoder, meta.train.rng_seed, meta.train.init_temperature)?;
    load_params(&mut model.store, ck)?;
    Ok((model, meta.vocab.clone(), meta))
}

