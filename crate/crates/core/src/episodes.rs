//! N-way-K-shot episodes, prototype and label-matching classifiers, and
//! accuracy reports.
//!
//! Sentences are embedded once up front; an episode is just indices into
//! that embedded set.

use crate::corpus::PreparedCorpus;
use crate::encoder::{BiEncoder, Embedding2d};
use crate::error::{Error, Result};
use crate::rng::{derive, Stream};
use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Sentences encoded per forward pass when embedding a corpus.
const EMBED_CHUNK: usize = 64;

/// One task. Queries carry the index of their gold class in `relation_ids`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Episode {
    pub relation_ids: Vec<String>,
    /// `support[c]` holds the K instance indices of class `c`.
    pub support: Vec<Vec<usize>>,
    /// `(instance index, gold class)`.
    pub query: Vec<(usize, usize)>,
}

/// Instance indices grouped by relation, in sorted relation order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationIndex {
    groups: BTreeMap<String, Vec<usize>>,
}

impl RelationIndex {
    pub fn new<S: AsRef<str>>(relations: &[S]) -> Self {
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, r) in relations.iter().enumerate() {
            groups.entry(r.as_ref().to_string()).or_default().push(i);
        }
        Self { groups }
    }

    pub fn relations(&self) -> impl Iterator<Item = &str> {
        self.groups.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

/// Task shape: N classes, K support per class, T queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub n: usize,
    pub k: usize,
    pub t: usize,
}

impl TaskSpec {
    /// `T = N` unless given.
    pub fn new(n: usize, k: usize, t: Option<usize>) -> Self {
        Self { n, k, t: t.unwrap_or(n) }
    }

    fn check(&self, index: &RelationIndex) -> Result<()> {
        if self.n < 2 || self.t == 0 {
            return Err(Error::InvalidArgument(format!(
                "task needs N >= 2 and T >= 1, got N = {}, T = {}",
                self.n, self.t
            )));
        }
        if index.len() < self.n {
            return Err(Error::InsufficientData(format!(
                "{} relations available for a {}-way task",
                index.len(),
                self.n
            )));
        }
        let need = self.k + self.t.div_ceil(self.n);
        for (r, v) in &index.groups {
            if v.len() < need {
                return Err(Error::InsufficientData(format!(
                    "relation {r} has {} instances, needs {need}",
                    v.len()
                )));
            }
        }
        Ok(())
    }
}

/// Samples N classes, K support each, then T queries uniformly from the
/// remaining instances of those classes.
pub fn sample_episode<R: rand::Rng + ?Sized>(
    index: &RelationIndex,
    task: TaskSpec,
    rng: &mut R,
) -> Result<Episode> {
    task.check(index)?;
    let all: Vec<(&String, &Vec<usize>)> = index.groups.iter().collect();
    let mut chosen: Vec<usize> = index::sample(rng, all.len(), task.n).into_vec();
    chosen.sort_unstable();
    let mut relation_ids = Vec::with_capacity(task.n);
    let mut support = Vec::with_capacity(task.n);
    let mut pool = Vec::new();
    for (c, &ri) in chosen.iter().enumerate() {
        let (rel, members) = all[ri];
        let mut shuffled = members.clone();
        shuffled.shuffle(rng);
        relation_ids.push(rel.clone());
        support.push(shuffled[..task.k].to_vec());
        pool.extend(shuffled[task.k..].iter().map(|&i| (i, c)));
    }
    let query = index::sample(rng, pool.len(), task.t)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    Ok(Episode {
        relation_ids,
        support,
        query,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    Cosine,
    /// Negative squared Euclidean distance.
    Euclidean,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn unit(v: &[f64], what: &'static str, row: usize) -> Result<Vec<f64>> {
    let n = norm(v);
    if n == 0.0 {
        return Err(Error::ZeroNorm { what, row });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

fn score(sim: Similarity, q: &[f64], p: &[f64]) -> Result<f64> {
    Ok(match sim {
        Similarity::Cosine => {
            let (nq, np) = (norm(q), norm(p));
            if nq == 0.0 || np == 0.0 {
                return Err(Error::ZeroNorm {
                    what: if nq == 0.0 { "query embedding" } else { "prototype" },
                    row: 0,
                });
            }
            q.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() / (nq * np)
        }
        Similarity::Euclidean => -q.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(),
    })
}

/// Index of the best-scoring candidate; ties go to the lowest index.
fn argmax(sim: Similarity, q: &[f64], candidates: &[Vec<f64>]) -> Result<usize> {
    let mut best = (f64::NEG_INFINITY, 0);
    for (j, c) in candidates.iter().enumerate() {
        let s = score(sim, q, c)?;
        if s > best.0 {
            best = (s, j);
        }
    }
    Ok(best.1)
}

/// Nearest-prototype prediction for each query. A prototype is the mean of
/// its class's support embeddings; with `label_embs` it becomes
/// `unit(mean) + unit(label)`.
pub fn prototype_classify<E: AsRef<[f64]>>(
    support: &[Vec<E>],
    queries: &[E],
    label_embs: Option<&[E]>,
    sim: Similarity,
) -> Result<Vec<usize>> {
    if let Some(l) = label_embs {
        if l.len() != support.len() {
            return Err(Error::InvalidArgument(format!(
                "{} label embeddings for {} classes",
                l.len(),
                support.len()
            )));
        }
    }
    let mut protos = Vec::with_capacity(support.len());
    for (c, class) in support.iter().enumerate() {
        let first = class.first().ok_or_else(|| {
            Error::InvalidArgument(format!("class {c} has no support instances"))
        })?;
        let mut p = vec![0.0; first.as_ref().len()];
        for e in class {
            for (a, &x) in p.iter_mut().zip(e.as_ref()) {
                *a += x;
            }
        }
        let k = class.len() as f64;
        p.iter_mut().for_each(|a| *a /= k);
        if let Some(l) = label_embs {
            let pu = unit(&p, "prototype", c)?;
            let lu = unit(l[c].as_ref(), "label embedding", c)?;
            p = pu.iter().zip(&lu).map(|(a, b)| a + b).collect();
        }
        protos.push(p);
    }
    queries.iter().map(|q| argmax(sim, q.as_ref(), &protos)).collect()
}

/// Label-matching prediction: the class whose label embedding has the highest
/// cosine with the query.
pub fn zero_shot_classify<E: AsRef<[f64]>>(label_embs: &[E], queries: &[E]) -> Result<Vec<usize>> {
    if label_embs.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "zero-shot needs at least 2 classes, got {}",
            label_embs.len()
        )));
    }
    let labels = label_embs
        .iter()
        .enumerate()
        .map(|(j, l)| unit(l.as_ref(), "label embedding", j))
        .collect::<Result<Vec<_>>>()?;
    queries
        .iter()
        .enumerate()
        .map(|(i, q)| {
            unit(q.as_ref(), "query embedding", i)?;
            argmax(Similarity::Cosine, q.as_ref(), &labels)
        })
        .collect()
}

/// Predicts a class index for every query of an episode.
pub trait EpisodeClassifier {
    fn name(&self) -> String;
    fn classify(&self, episode: &Episode) -> Result<Vec<usize>>;
}

/// Sentence embeddings of every instance plus label embeddings per relation.
#[derive(Debug, Clone)]
pub struct EmbeddedCorpus {
    pub relations: Vec<String>,
    pub sentences: Vec<Embedding2d>,
    pub labels: BTreeMap<String, Embedding2d>,
}

impl EmbeddedCorpus {
    pub fn new(model: &BiEncoder, corpus: &PreparedCorpus) -> Result<Self> {
        let seqs: Vec<&[usize]> = corpus.sentences.iter().map(|m| m.tokens.as_slice()).collect();
        let markers: Vec<(usize, usize)> = corpus.sentences.iter().map(|m| (m.pos_e1s, m.pos_e2s)).collect();
        let sentences = model.embed_sentences(&seqs, &markers, EMBED_CHUNK)?;
        let (ids, label_seqs): (Vec<&String>, Vec<&Vec<usize>>) = corpus.label_sequences.iter().unzip();
        let label_embs = model.embed_labels(&label_seqs, EMBED_CHUNK)?;
        Ok(Self {
            relations: corpus.relations.clone(),
            sentences,
            labels: ids.into_iter().cloned().zip(label_embs).collect(),
        })
    }

    pub fn index(&self) -> RelationIndex {
        RelationIndex::new(&self.relations)
    }

    fn label(&self, rel: &str) -> Result<&Embedding2d> {
        self.labels.get(rel).ok_or_else(|| Error::UnknownRelation(rel.to_string()))
    }
}

/// Nearest-prototype classifier, optionally label-enhanced.
pub struct PrototypeClassifier<'a> {
    pub corpus: &'a EmbeddedCorpus,
    pub label_info: bool,
    pub similarity: Similarity,
}

impl EpisodeClassifier for PrototypeClassifier<'_> {
    fn name(&self) -> String {
        let sim = match self.similarity {
            Similarity::Cosine => "cosine",
            Similarity::Euclidean => "euclidean",
        };
        let label = if self.label_info { "+label" } else { "" };
        format!("prototype-{sim}{label}")
    }

    fn classify(&self, ep: &Episode) -> Result<Vec<usize>> {
        let emb = |i: usize| self.corpus.sentences[i].as_slice();
        let support: Vec<Vec<&[f64]>> = ep.support.iter().map(|c| c.iter().map(|&i| emb(i)).collect()).collect();
        let queries: Vec<&[f64]> = ep.query.iter().map(|&(i, _)| emb(i)).collect();
        let labels = if self.label_info {
            Some(
                ep.relation_ids
                    .iter()
                    .map(|r| Ok(self.corpus.label(r)?.as_slice()))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        prototype_classify(&support, &queries, labels.as_deref(), self.similarity)
    }
}

/// Matches queries against label embeddings; ignores the support set.
pub struct LabelMatchClassifier<'a> {
    pub corpus: &'a EmbeddedCorpus,
}

impl EpisodeClassifier for LabelMatchClassifier<'_> {
    fn name(&self) -> String {
        "label-match".into()
    }

    fn classify(&self, ep: &Episode) -> Result<Vec<usize>> {
        let labels = ep
            .relation_ids
            .iter()
            .map(|r| Ok(self.corpus.label(r)?.as_slice()))
            .collect::<Result<Vec<_>>>()?;
        let queries: Vec<&[f64]> = ep.query.iter().map(|&(i, _)| self.corpus.sentences[i].as_slice()).collect();
        zero_shot_classify(&labels, &queries)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub task: TaskSpec,
    pub episodes: usize,
    pub seed: u64,
    /// How queries are drawn within an episode.
    pub query_sampling: String,
    pub accuracy: f64,
    /// Half-width of the normal-approximation 95% interval.
    pub ci95: f64,
    pub correct: Vec<usize>,
}

/// Runs `episodes` independent episodes; episode `e` uses its own random
/// stream derived from `(seed, e)`.
pub fn evaluate<C: EpisodeClassifier + ?Sized>(
    classifier: &C,
    index: &RelationIndex,
    task: TaskSpec,
    episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::InvalidArgument("episodes must be at least 1".into()));
    }
    task.check(index)?;
    let mut correct = Vec::with_capacity(episodes);
    for e in 0..episodes {
        let mut rng = derive(seed, Stream::Episode, &[e as u64]);
        let ep = sample_episode(index, task, &mut rng)?;
        let pred = classifier.classify(&ep)?;
        if pred.len() != ep.query.len() {
            return Err(Error::shape(
                "evaluate",
                format!("{} predictions for {} queries", pred.len(), ep.query.len()),
            ));
        }
        correct.push(pred.iter().zip(&ep.query).filter(|(p, q)| **p == q.1).count());
    }
    let total = (episodes * task.t) as f64;
    let accuracy = correct.iter().sum::<usize>() as f64 / total;
    Ok(EvalReport {
        method: classifier.name(),
        task,
        episodes,
        seed,
        query_sampling: "uniform".into(),
        accuracy,
        ci95: 1.96 * (accuracy * (1.0 - accuracy) / total).sqrt(),
        correct,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use std::collections::HashSet;

    fn index(per: usize, rels: usize) -> RelationIndex {
        let r: Vec<String> = (0..rels * per).map(|i| format!("r{}", i % rels)).collect();
        RelationIndex::new(&r)
    }

    #[test]
    fn episode_cardinality_and_disjointness() {
        let idx = index(10, 8);
        let mut rng = derive(1, Stream::Check, &[]);
        let ep = sample_episode(&idx, TaskSpec::new(5, 1, None), &mut rng).unwrap();
        assert_eq!(ep.relation_ids.len(), 5);
        assert_eq!(ep.relation_ids.iter().collect::<HashSet<_>>().len(), 5);
        assert_eq!(ep.support.iter().map(Vec::len).sum::<usize>(), 5);
        assert_eq!(ep.query.len(), 5);
        let sup: HashSet<usize> = ep.support.iter().flatten().copied().collect();
        assert!(ep.query.iter().all(|(i, c)| !sup.contains(i) && *c < 5));
        // Gold class matches the instance's relation.
        for &(i, c) in &ep.query {
            assert_eq!(format!("r{}", i % 8), ep.relation_ids[c]);
        }
    }

    #[test]
    fn zero_shot_episode_has_no_support() {
        let idx = index(3, 6);
        let mut rng = derive(2, Stream::Check, &[]);
        let ep = sample_episode(&idx, TaskSpec::new(5, 0, None), &mut rng).unwrap();
        assert!(ep.support.iter().all(Vec::is_empty));
        assert_eq!(ep.query.len(), 5);
    }

    #[test]
    fn same_seed_same_episode() {
        let idx = index(10, 8);
        let t = TaskSpec::new(5, 2, Some(7));
        let a = sample_episode(&idx, t, &mut derive(3, Stream::Episode, &[0])).unwrap();
        let b = sample_episode(&idx, t, &mut derive(3, Stream::Episode, &[0])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn thin_relation_is_named() {
        let mut r: Vec<String> = (0..30).map(|i| format!("r{}", i % 5)).collect();
        r.push("thin".into());
        let idx = RelationIndex::new(&r);
        let err = sample_episode(&idx, TaskSpec::new(5, 1, None), &mut derive(0, Stream::Check, &[])).unwrap_err();
        assert!(err.to_string().contains("thin"), "{err}");
        let few = index(10, 3);
        assert!(sample_episode(&few, TaskSpec::new(5, 1, None), &mut derive(0, Stream::Check, &[])).is_err());
    }

    #[test]
    fn prototype_hand_cases() {
        let sup = vec![vec![vec![1.0, 0.0, 0.0]], vec![vec![0.0, 1.0, 0.0]]];
        let q = vec![vec![0.9, 0.1, 0.0], vec![0.0, 1.0, 0.0]];
        assert_eq!(prototype_classify(&sup, &q, None, Similarity::Cosine).unwrap(), [0, 1]);
        assert_eq!(prototype_classify(&sup, &q, None, Similarity::Euclidean).unwrap(), [0, 1]);
        let same = vec![vec![vec![1.0, 1.0]], vec![vec![1.0, 1.0]]];
        assert_eq!(prototype_classify(&same, &[vec![0.3, 0.2]], None, Similarity::Cosine).unwrap(), [0]);
        let empty: Vec<Vec<Vec<f64>>> = vec![vec![], vec![vec![1.0]]];
        assert!(prototype_classify(&empty, &[vec![1.0]], None, Similarity::Cosine).is_err());
    }

    #[test]
    fn label_info_shifts_prototypes() {
        // Support alone prefers class 0; label embeddings pull toward class 1.
        let sup = vec![vec![vec![1.0, 0.2]], vec![vec![0.2, 1.0]]];
        let labels = vec![vec![-1.0, 0.0], vec![0.0, 1.0]];
        let q = vec![vec![1.0, 0.5]];
        assert_eq!(prototype_classify(&sup, &q, None, Similarity::Cosine).unwrap(), [0]);
        assert_eq!(prototype_classify(&sup, &q, Some(&labels), Similarity::Cosine).unwrap(), [1]);
    }

    #[test]
    fn predictions_are_scale_invariant() {
        let mut rng = derive(4, Stream::Check, &[]);
        let mut v = || (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let sup: Vec<Vec<Vec<f64>>> = (0..4).map(|_| vec![v(), v()]).collect();
        let q: Vec<Vec<f64>> = (0..20).map(|_| v()).collect();
        let base = prototype_classify(&sup, &q, None, Similarity::Cosine).unwrap();
        let scaled: Vec<Vec<f64>> = q.iter().map(|x| x.iter().map(|a| a * 7.5).collect()).collect();
        assert_eq!(base, prototype_classify(&sup, &scaled, None, Similarity::Cosine).unwrap());
    }

    #[test]
    fn zero_shot_hand_cases() {
        let labels = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]];
        assert_eq!(zero_shot_classify(&labels, &[vec![0.0, 2.0], vec![-1.0, 0.1]]).unwrap(), [1, 2]);
        let same = vec![vec![1.0, 1.0]; 3];
        assert_eq!(zero_shot_classify(&same, &[vec![5.0, -1.0]]).unwrap(), [0]);
        assert!(zero_shot_classify(&same, &[vec![0.0, 0.0]]).is_err());
        assert!(zero_shot_classify(&same[..1], &[vec![1.0, 0.0]]).is_err());
    }

    struct Oracle<'a>(&'a [String]);
    impl EpisodeClassifier for Oracle<'_> {
        fn name(&self) -> String {
            "oracle".into()
        }
        fn classify(&self, ep: &Episode) -> Result<Vec<usize>> {
            Ok(ep
                .query
                .iter()
                .map(|&(i, _)| ep.relation_ids.iter().position(|r| *r == self.0[i]).unwrap())
                .collect())
        }
    }

    struct Guess;
    impl EpisodeClassifier for Guess {
        fn name(&self) -> String {
            "guess".into()
        }
        fn classify(&self, ep: &Episode) -> Result<Vec<usize>> {
            let mut rng = derive(0, Stream::Check, &[ep.query[0].0 as u64, ep.support[0][0] as u64]);
            Ok(ep.query.iter().map(|_| rng.gen_range(0..ep.relation_ids.len())).collect())
        }
    }

    #[test]
    fn perfect_and_random_classifiers() {
        let rels: Vec<String> = (0..200).map(|i| format!("r{}", i % 10)).collect();
        let idx = RelationIndex::new(&rels);
        let task = TaskSpec::new(5, 1, None);
        let r = evaluate(&Oracle(&rels), &idx, task, 50, 1).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.correct.len(), 50);
        let g = evaluate(&Guess, &idx, task, 2000, 1).unwrap();
        assert!((g.accuracy - 0.2).abs() <= 0.02, "{}", g.accuracy);
        assert_eq!(g, evaluate(&Guess, &idx, task, 2000, 1).unwrap());
        assert!(evaluate(&Guess, &idx, task, 0, 1).is_err());
    }
}
