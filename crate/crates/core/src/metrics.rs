//! Alignment and uniformity of embeddings on the unit hypersphere, and CSV
//! export of normalized embeddings for plotting.

use crate::error::{Error, Result};
use crate::rng::{derive, Stream};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Sets up to this size are evaluated over every distinct pair.
pub const EXHAUSTIVE_LIMIT: usize = 500;
/// Pairs drawn for larger sets.
pub const SAMPLED_PAIRS: usize = 100_000;

fn unit_rows<E: AsRef<[f64]>>(set: &[E], what: &'static str) -> Result<Vec<Vec<f64>>> {
    set.iter()
        .enumerate()
        .map(|(row, v)| {
            let v = v.as_ref();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::ZeroNorm { what, row });
            }
            Ok(v.iter().map(|x| x / n).collect())
        })
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean squared distance between normalized positive pairs.
pub fn align<E: AsRef<[f64]>>(pairs: &[(E, E)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("align needs at least one pair".into()));
    }
    let mut total = 0.0;
    for (i, (s, l)) in pairs.iter().enumerate() {
        let s = unit_rows(std::slice::from_ref(s), "sentence embedding").map_err(|_| Error::ZeroNorm {
            what: "sentence embedding",
            row: i,
        })?;
        let l = unit_rows(std::slice::from_ref(l), "label embedding").map_err(|_| Error::ZeroNorm {
            what: "label embedding",
            row: i,
        })?;
        total += sq_dist(&s[0], &l[0]);
    }
    Ok(total / pairs.len() as f64)
}

/// `log E[exp(-2 |f(x) - f(y)|^2)]` over distinct pairs of one set, and the
/// number of pairs it averaged. Exhaustive when the set has at most
/// `exhaustive_limit` members, otherwise `samples` random pairs.
pub fn log_gaussian_potential<E: AsRef<[f64]>, R: Rng + ?Sized>(
    set: &[E],
    exhaustive_limit: usize,
    samples: usize,
    rng: &mut R,
    what: &'static str,
) -> Result<(f64, usize)> {
    if set.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "uniformity of {what}s needs at least 2, got {}",
            set.len()
        )));
    }
    let u = unit_rows(set, what)?;
    let k = |i: usize, j: usize| (-2.0 * sq_dist(&u[i], &u[j])).exp();
    let (sum, count) = if u.len() <= exhaustive_limit {
        // Unordered pairs; the ordered-pair mean is identical by symmetry.
        let mut sum = 0.0;
        for i in 0..u.len() {
            for j in i + 1..u.len() {
                sum += k(i, j);
            }
        }
        (sum, u.len() * (u.len() - 1) / 2)
    } else {
        let mut sum = 0.0;
        for _ in 0..samples {
            let i = rng.gen_range(0..u.len());
            let mut j = rng.gen_range(0..u.len() - 1);
            if j >= i {
                j += 1;
            }
            sum += k(i, j);
        }
        (sum, samples)
    };
    Ok(((sum / count as f64).ln(), count))
}

/// Half of each set's log potential, summed.
pub fn uniform<E: AsRef<[f64]>>(sentences: &[E], labels: &[E], seed: u64) -> Result<UniformEstimate> {
    let (s, sp) = log_gaussian_potential(
        sentences,
        EXHAUSTIVE_LIMIT,
        SAMPLED_PAIRS,
        &mut derive(seed, Stream::Metrics, &[0]),
        "sentence embedding",
    )?;
    let (l, lp) = log_gaussian_potential(
        labels,
        EXHAUSTIVE_LIMIT,
        SAMPLED_PAIRS,
        &mut derive(seed, Stream::Metrics, &[1]),
        "label embedding",
    )?;
    Ok(UniformEstimate {
        value: s / 2.0 + l / 2.0,
        sentence_pairs: sp,
        label_pairs: lp,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformEstimate {
    pub value: f64,
    pub sentence_pairs: usize,
    pub label_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub align: f64,
    pub uniform: f64,
    pub positive_pairs: usize,
    pub sentences: usize,
    pub labels: usize,
    pub sentence_pairs: usize,
    pub label_pairs: usize,
}

/// Both metrics for sentences with their gold-label embeddings.
/// `label_of[i]` is the row in `labels` that sentence `i` belongs to.
pub fn metrics_report<E: AsRef<[f64]>>(
    sentences: &[E],
    labels: &[E],
    label_of: &[usize],
    seed: u64,
) -> Result<MetricsReport> {
    if label_of.len() != sentences.len() || label_of.iter().any(|&j| j >= labels.len()) {
        return Err(Error::InvalidArgument("sentence-to-label map does not fit the label set".into()));
    }
    let pairs: Vec<(&[f64], &[f64])> = sentences
        .iter()
        .zip(label_of)
        .map(|(s, &j)| (s.as_ref(), labels[j].as_ref()))
        .collect();
    let a = align(&pairs)?;
    let u = uniform(sentences, labels, seed)?;
    Ok(MetricsReport {
        align: a,
        uniform: u.value,
        positive_pairs: pairs.len(),
        sentences: sentences.len(),
        labels: labels.len(),
        sentence_pairs: u.sentence_pairs,
        label_pairs: u.label_pairs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Sentence,
    Label,
}

/// One exported row.
#[derive(Debug, Clone, PartialEq)]
pub struct ExportRow<'a> {
    pub kind: EmbeddingKind,
    pub relation_id: &'a str,
    pub values: &'a [f64],
}

/// Writes `kind,relation_id,x0..x{D-1}` with every vector L2-normalized.
pub fn write_embeddings_csv<W: std::io::Write>(rows: &[ExportRow<'_>], out: W) -> Result<()> {
    let dim = rows.first().map_or(0, |r| r.values.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["kind".to_string(), "relation_id".to_string()];
    header.extend((0..dim).map(|i| format!("x{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for (i, r) in rows.iter().enumerate() {
        if r.values.len() != dim {
            return Err(Error::shape("export", format!("row {i} has dimension {}", r.values.len())));
        }
        let what = match r.kind {
            EmbeddingKind::Sentence => "sentence embedding",
            EmbeddingKind::Label => "label embedding",
        };
        let u = unit_rows(&[r.values], what).map_err(|_| Error::ZeroNorm { what, row: i })?;
        let mut rec = vec![
            match r.kind {
                EmbeddingKind::Sentence => "sentence".to_string(),
                EmbeddingKind::Label => "label".to_string(),
            },
            r.relation_id.to_string(),
        ];
        rec.extend(u[0].iter().map(|x| format!("{x:e}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn export_embeddings(rows: &[ExportRow<'_>], path: impl AsRef<Path>) -> Result<()> {
    write_embeddings_csv(rows, std::fs::File::create(path)?)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const EPS: f64 = 1e-9;

    #[test]
    fn align_hand_values() {
        let e1 = vec![1.0, 0.0];
        let e2 = vec![0.0, 1.0];
        assert_eq!(align(&[(e1.clone(), e1.clone())]).unwrap(), 0.0);
        let anti = align(&[(vec![0.6, 0.8], vec![-0.6, -0.8])]).unwrap();
        assert!((anti - 4.0).abs() < EPS);
        let mixed = align(&[(e1.clone(), e1.clone()), (e1.clone(), e2)]).unwrap();
        assert!((mixed - 1.0).abs() < EPS);
        // Rescaling is absorbed by normalization.
        let scaled = align(&[(vec![3.0, 0.0], vec![0.0, 0.5])]).unwrap();
        assert!((scaled - 2.0).abs() < EPS);
        assert!(align(&[(vec![0.0, 0.0], e1)]).is_err());
    }

    #[test]
    fn uniform_hand_values() {
        let same = vec![vec![1.0, 2.0]; 4];
        assert!(uniform(&same, &same, 0).unwrap().value.abs() < EPS);
        let anti = vec![vec![1.0, 0.0, 0.0], vec![-1.0, 0.0, 0.0]];
        assert!((uniform(&anti, &anti, 0).unwrap().value + 8.0).abs() < EPS);
        assert!(uniform(&anti[..1], &anti, 0).is_err());
    }

    #[test]
    fn sampled_matches_exhaustive() {
        // Width of a default pooled embedding (2 x 64).
        let mut rng = derive(5, Stream::Check, &[]);
        let t = crate::rng::normal_tensor(&mut rng, 200, 128, 1.0);
        let set: Vec<&[f64]> = (0..200).map(|i| t.row_slice(i)).collect();
        let (exact, n) = log_gaussian_potential(&set, 500, 0, &mut rng, "x").unwrap();
        assert_eq!(n, 200 * 199 / 2);
        let (approx, m) = log_gaussian_potential(&set, 0, 1000, &mut rng, "x").unwrap();
        assert_eq!(m, 1000);
        assert!((exact - approx).abs() < 0.05, "{exact} vs {approx}");
    }

    #[test]
    fn uniform_is_permutation_invariant() {
        let set: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 1.0, -(i as f64) * 0.5]).collect();
        let mut rev = set.clone();
        rev.reverse();
        let a = uniform(&set, &set, 0).unwrap().value;
        let b = uniform(&rev, &rev, 0).unwrap().value;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn csv_rows_are_unit_norm() {
        let a = [3.0, 4.0];
        let b = [0.0, -2.0];
        let rows = [
            ExportRow { kind: EmbeddingKind::Sentence, relation_id: "R1", values: &a },
            ExportRow { kind: EmbeddingKind::Label, relation_id: "R1", values: &b },
        ];
        let mut buf = Vec::new();
        write_embeddings_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "kind,relation_id,x0,x1");
        assert_eq!(lines.len(), 3);
        for line in &lines[1..] {
            let v: Vec<f64> = line.split(',').skip(2).map(|x| x.parse().unwrap()).collect();
            assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < EPS);
        }
        assert!(lines[1].starts_with("sentence,R1,6e-1,8e-1"));
    }
}
