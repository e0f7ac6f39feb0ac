use super::markers::{blank_spans, MarkedSequence};
use super::vocab::{Vocab, MASK};
use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// Probability of collapsing each entity span to `[BLANK]`.
    pub rho_blank: f64,
    /// Per-token MLM selection probability.
    pub mlm_rate: f64,
    pub max_seq_len: usize,
    pub rng_seed: u64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            rho_blank: 0.7,
            mlm_rate: 0.15,
            max_seq_len: 64,
            rng_seed: 0,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("rho_blank", self.rho_blank), ("mlm_rate", self.mlm_rate)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("{name} = {p} is not in [0, 1]")));
            }
        }
        if self.max_seq_len < 8 {
            return Err(Error::InvalidArgument(format!(
                "max_seq_len = {} is too small",
                self.max_seq_len
            )));
        }
        Ok(())
    }
}

/// Independently per span, with probability `rho_blank`, replaces the span
/// by one `[BLANK]`. Head is decided before tail.
pub fn apply_blank_masking<R: Rng + ?Sized>(
    m: &MarkedSequence,
    cfg: &PreprocessConfig,
    rng: &mut R,
) -> MarkedSequence {
    let blank_head = rng.gen::<f64>() < cfg.rho_blank;
    let blank_tail = rng.gen::<f64>() < cfg.rho_blank;
    blank_spans(m, blank_head, blank_tail)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlmMasked {
    pub tokens: Vec<usize>,
    /// Masked position to original token id.
    pub targets: BTreeMap<usize, usize>,
}

/// Replaces each non-special token with `[MASK]` with probability `mlm_rate`.
/// One random draw per eligible token, in sequence order.
pub fn apply_mlm_masking<R: Rng + ?Sized>(
    tokens: &[usize],
    cfg: &PreprocessConfig,
    rng: &mut R,
) -> MlmMasked {
    let mut out = tokens.to_vec();
    let mut targets = BTreeMap::new();
    for (i, t) in out.iter_mut().enumerate() {
        if Vocab::is_special(*t) {
            continue;
        }
        if rng.gen::<f64>() < cfg.mlm_rate {
            targets.insert(i, *t);
            *t = MASK;
        }
    }
    MlmMasked {
        tokens: out,
        targets,
    }
}
