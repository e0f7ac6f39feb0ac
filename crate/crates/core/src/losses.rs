//! Contrastive and MLM objectives built on the autodiff graph.
//!
//! The sentence-anchored term contrasts each sentence against the batch's
//! distinct labels; the label-anchored term contrasts each label against all
//! sentences of the batch and sums over every positive.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};
use std::collections::HashMap;

/// Lower bound on the temperature, i.e. logits are scaled by at most 100x.
pub const MIN_TEMPERATURE: f64 = 0.01;
pub const INITIAL_TEMPERATURE: f64 = 0.07;

/// Sentence/label bookkeeping of one batch. Label rows are the batch's distinct
/// relations in first-appearance order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPairing {
    pub relation_ids: Vec<String>,
    /// Label row of each sentence.
    pub pair_index: Vec<usize>,
    /// Sentence indices of each label row.
    pub positives: Vec<Vec<usize>>,
}

impl BatchPairing {
    pub fn from_relations<S: AsRef<str>>(relations: &[S]) -> Result<Self> {
        if relations.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mut rows: HashMap<&str, usize> = HashMap::new();
        let mut relation_ids = Vec::new();
        let mut positives: Vec<Vec<usize>> = Vec::new();
        let mut pair_index = Vec::with_capacity(relations.len());
        for (i, r) in relations.iter().enumerate() {
            let r = r.as_ref();
            let row = *rows.entry(r).or_insert_with(|| {
                relation_ids.push(r.to_string());
                positives.push(Vec::new());
                relation_ids.len() - 1
            });
            positives[row].push(i);
            pair_index.push(row);
        }
        Ok(Self {
            relation_ids,
            pair_index,
            positives,
        })
    }

    pub fn n(&self) -> usize {
        self.pair_index.len()
    }

    pub fn m(&self) -> usize {
        self.relation_ids.len()
    }

    fn check(&self, cos_shape: [usize; 2]) -> Result<()> {
        if cos_shape != [self.n(), self.m()] {
            return Err(Error::shape(
                "contrastive loss",
                format!(
                    "similarity matrix {:?} for n = {}, m = {}",
                    cos_shape,
                    self.n(),
                    self.m()
                ),
            ));
        }
        Ok(())
    }
}

/// `n x m` cosine similarities between rows of `s` and rows of `l`.
pub fn cosine_similarity_matrix(g: &mut Graph, s: Var, l: Var) -> Result<Var> {
    let sn = g.normalize_rows(s, "sentence embedding")?;
    let ln = g.normalize_rows(l, "label embedding")?;
    let lt = g.transpose(ln);
    g.matmul(sn, lt)
}

/// Value-only cosine matrix.
pub fn cosine_matrix(s: &Tensor, l: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (s, l) = (g.constant(s.clone()), g.constant(l.clone()));
    let c = cosine_similarity_matrix(&mut g, s, l)?;
    Ok(g.value(c).clone())
}

/// Each sentence against the batch's labels; mean over sentences.
pub fn scl_sentence_loss(g: &mut Graph, cos: Var, pairing: &BatchPairing, tau: Var) -> Result<Var> {
    pairing.check(g.shape(cos))?;
    let logits = g.div_scalar(cos, tau)?;
    let lsm = g.log_softmax(logits);
    let at: Vec<(usize, usize)> = pairing.pair_index.iter().copied().enumerate().collect();
    let picked = g.pick(lsm, &at)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0 / pairing.n() as f64))
}

/// Each label against all sentences, summed over its positives; mean over
/// labels. `normalize_positives` divides each label's sum by `|A|`.
pub fn scl_label_loss(
    g: &mut Graph,
    cos: Var,
    pairing: &BatchPairing,
    tau: Var,
    normalize_positives: bool,
) -> Result<Var> {
    pairing.check(g.shape(cos))?;
    let logits = g.div_scalar(cos, tau)?;
    let by_label = g.transpose(logits);
    let lsm = g.log_softmax(by_label);
    let mut at = Vec::with_capacity(pairing.n());
    let mut weights = Vec::with_capacity(pairing.n());
    for (i, a) in pairing.positives.iter().enumerate() {
        for &j in a {
            at.push((i, j));
            weights.push(if normalize_positives { 1.0 / a.len() as f64 } else { 1.0 });
        }
    }
    let mut picked = g.pick(lsm, &at)?;
    if normalize_positives {
        let w = g.constant(Tensor::new(weights.len(), 1, weights)?);
        picked = g.mul(picked, w)?;
    }
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0 / pairing.m() as f64))
}

/// Sum of the two contrastive directions.
pub fn scl_loss(g: &mut Graph, sentence: Var, label: Var) -> Result<Var> {
    g.add(sentence, label)
}

/// Mean cross-entropy over masked positions; zero when nothing is masked.
pub fn mlm_loss(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, targets)
}

/// Sentence-side plus label-side MLM.
pub fn mlm_loss_pair(
    g: &mut Graph,
    sentence: (Var, &[usize]),
    label: (Var, &[usize]),
) -> Result<Var> {
    let s = mlm_loss(g, sentence.0, sentence.1)?;
    let l = mlm_loss(g, label.0, label.1)?;
    g.add(s, l)
}

/// `scl / 2 + mlm`.
pub fn total_loss(g: &mut Graph, scl: Var, mlm: Var) -> Result<Var> {
    let half = g.scale(scl, 0.5);
    g.add(half, mlm)
}
