//! Central finite-difference oracle for the autodiff engine.
//!
//! The oracle only ever evaluates forward values; it never reads the
//! gradients it is compared against.

use crate::error::{Error, Result};
use crate::rng::{derive, normal_tensor, Rng, Stream};
use crate::tensor::graph::AttentionSpec;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng as _;
use serde::Serialize;

/// Default finite-difference step.
pub const STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// `(f(x + h) - f(x - h)) / 2h` for one scalar coordinate of a parameter.
pub fn central_difference<F>(
    store: &mut ParamStore,
    id: ParamId,
    index: usize,
    h: f64,
    f: &F,
) -> Result<f64>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    let orig = store.value(id).data()[index];
    store.value_mut(id).data_mut()[index] = orig + h;
    let plus = f(store);
    store.value_mut(id).data_mut()[index] = orig - h;
    let minus = f(store);
    store.value_mut(id).data_mut()[index] = orig;
    Ok((plus? - minus?) / (2.0 * h))
}

/// Evaluates the scalar built by `build` on a fresh graph.
pub fn forward_value<B>(store: &ParamStore, build: &B) -> Result<f64>
where
    B: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = build(&mut g, store)?;
    Ok(g.value(out).item())
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub coordinates: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares analytic gradients of the scalar built by `build` against
/// central differences at `coords`.
pub fn check<B>(
    name: &str,
    store: &mut ParamStore,
    build: &B,
    coords: &[(ParamId, usize)],
    h: f64,
    tolerance: f64,
    floor: f64,
) -> Result<CheckReport>
where
    B: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    g.backward(loss, store)?;
    let analytic: Vec<f64> = coords
        .iter()
        .map(|&(id, i)| store.grad(id).data()[i])
        .collect();
    let f = |s: &ParamStore| forward_value(s, build);
    let mut max_rel_err: f64 = 0.0;
    for (&(id, i), &a) in coords.iter().zip(&analytic) {
        let n = central_difference(store, id, i, h, &f)?;
        let err = relative_error(a, n, floor);
        if !err.is_finite() {
            return Err(Error::NonFinite(format!("{name}: gradient check at {id:?}[{i}]")));
        }
        max_rel_err = max_rel_err.max(err);
    }
    Ok(CheckReport {
        name: name.to_string(),
        coordinates: coords.len(),
        max_rel_err,
        tolerance,
        passed: max_rel_err < tolerance,
    })
}

/// Every coordinate of every parameter.
pub fn all_coordinates(store: &ParamStore) -> Vec<(ParamId, usize)> {
    store
        .iter()
        .flat_map(|(id, p)| (0..p.value.len()).map(move |i| (id, i)))
        .collect()
}

/// `k` coordinates drawn uniformly (with replacement) over all scalars.
pub fn sample_coordinates(store: &ParamStore, k: usize, rng: &mut Rng) -> Vec<(ParamId, usize)> {
    let all = all_coordinates(store);
    (0..k).map(|_| all[rng.gen_range(0..all.len())]).collect()
}

fn randn(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    normal_tensor(rng, rows, cols, 1.0)
}

type Builder = Box<dyn Fn(&mut Graph, &ParamStore) -> Result<Var>>;

/// One randomized case per op: small random shapes, random inputs, and the
/// output contracted against fixed random weights so no gradient is trivially
/// constant.
fn op_case(op: &str, rng: &mut Rng) -> (ParamStore, Builder) {
    let mut s = ParamStore::new();
    let r = rng.gen_range(1..=4);
    let c = rng.gen_range(1..=4);
    let k = rng.gen_range(1..=4);
    let a = s.add("a", randn(rng, r, c)).unwrap();
    let weights = |rng: &mut Rng, rows, cols| randn(rng, rows, cols);
    let contract = |g: &mut Graph, out: Var, w: Tensor| -> Result<Var> {
        let w = g.constant(w);
        let prod = g.mul(out, w)?;
        Ok(g.sum(prod))
    };
    let build: Builder = match op {
        "matmul" => {
            let b = s.add("b", randn(rng, c, k)).unwrap();
            let w = weights(rng, r, k);
            Box::new(move |g, st| {
                let (va, vb) = (g.param(st, a), g.param(st, b));
                let o = g.matmul(va, vb)?;
                contract(g, o, w.clone())
            })
        }
        "transpose" => {
            let w = weights(rng, c, r);
            Box::new(move |g, st| {
                let va = g.param(st, a);
                let o = g.transpose(va);
                contract(g, o, w.clone())
            })
        }
        "add" | "mul" => {
            let broadcast = rng.gen_bool(0.5);
            let b = s
                .add("b", randn(rng, if broadcast { 1 } else { r }, c))
                .unwrap();
            let w = weights(rng, r, c);
            let is_add = op == "add";
            Box::new(move |g, st| {
                let (va, vb) = (g.param(st, a), g.param(st, b));
                let o = if is_add { g.add(va, vb)? } else { g.mul(va, vb)? };
                contract(g, o, w.clone())
            })
        }
        "scale" => {
            let f: f64 = rng.gen_range(-2.0..2.0);
            let w = weights(rng, r, c);
            Box::new(move |g, st| {
                let va = g.param(st, a);
                let o = g.scale(va, f);
                contract(g, o, w.clone())
            })
        }
        "div_scalar" => {
            let d = s
                .add("d", Tensor::scalar(rng.gen_range(0.5..2.0)))
                .unwrap();
            let w = weights(rng, r, c);
            Box::new(move |g, st| {
                let (va, vd) = (g.param(st, a), g.param(st, d));
                let o = g.div_scalar(va, vd)?;
                contract(g, o, w.clone())
            })
        }
        "concat0" | "concat1" => {
            let axis = usize::from(op == "concat1");
            let b = s
                .add("b", if axis == 0 { randn(rng, k, c) } else { randn(rng, r, k) })
                .unwrap();
            let w = if axis == 0 {
                weights(rng, r + k, c)
            } else {
                weights(rng, r, c + k)
            };
            Box::new(move |g, st| {
                let (va, vb) = (g.param(st, a), g.param(st, b));
                let o = g.concat(&[va, vb], axis)?;
                contract(g, o, w.clone())
            })
        }
        "mean0" | "mean1" => {
            let axis = usize::from(op == "mean1");
            let w = if axis == 0 {
                weights(rng, 1, c)
            } else {
                weights(rng, r, 1)
            };
            Box::new(move |g, st| {
                let va = g.param(st, a);
                let o = g.mean(va, axis)?;
                contract(g, o, w.clone())
            })
        }
        "sum" => Box::new(move |g, st| {
            let va = g.param(st, a);
            let sq = g.mul(va, va)?;
            Ok(g.sum(sq))
        }),
        "softmax" | "log_softmax" | "exp" | "gelu" => {
            let w = weights(rng, r, c);
            let op = op.to_string();
            Box::new(move |g, st| {
                let va = g.param(st, a);
                let o = match op.as_str() {
                    "softmax" => g.softmax(va),
                    "log_softmax" => g.log_softmax(va),
                    "exp" => g.exp(va),
                    _ => g.gelu(va),
                };
                contract(g, o, w.clone())
            })
        }
        "log" => {
            let p = s
                .add("p", randn(rng, r, c).map(|x| x.abs() + 0.5))
                .unwrap();
            let w = weights(rng, r, c);
            Box::new(move |g, st| {
                let vp = g.param(st, p);
                let o = g.log(vp);
                contract(g, o, w.clone())
            })
        }
        "layer_norm" => {
            let c = c.max(3);
            let x = s.add("x", randn(rng, r, c)).unwrap();
            let gamma = s.add("gamma", randn(rng, 1, c)).unwrap();
            let beta = s.add("beta", randn(rng, 1, c)).unwrap();
            let w = weights(rng, r, c);
            Box::new(move |g, st| {
                let (vx, vg, vb) = (g.param(st, x), g.param(st, gamma), g.param(st, beta));
                let o = g.layer_norm(vx, vg, vb)?;
                contract(g, o, w.clone())
            })
        }
        "embedding" => {
            let ids: Vec<usize> = (0..k + 2).map(|_| rng.gen_range(0..r)).collect();
            let w = weights(rng, ids.len(), c);
            Box::new(move |g, st| {
                let va = g.param(st, a);
                let o = g.embedding(va, &ids)?;
                contract(g, o, w.clone())
            })
        }
        "pick" => {
            let at: Vec<(usize, usize)> = (0..k + 2)
                .map(|_| (rng.gen_range(0..r), rng.gen_range(0..c)))
                .collect();
            let w = weights(rng, at.len(), 1);
            Box::new(move |g, st| {
                let va = g.param(st, a);
                let o = g.pick(va, &at)?;
                contract(g, o, w.clone())
            })
        }
        "normalize_rows" => {
            let w = weights(rng, r, c.max(2));
            let x = s.add("x", randn(rng, r, c.max(2))).unwrap();
            Box::new(move |g, st| {
                let vx = g.param(st, x);
                let o = g.normalize_rows(vx, "row")?;
                contract(g, o, w.clone())
            })
        }
        "cross_entropy" => {
            let targets: Vec<usize> = (0..r).map(|_| rng.gen_range(0..c)).collect();
            Box::new(move |g, st| {
                let va = g.param(st, a);
                g.cross_entropy(va, &targets)
            })
        }
        "attention" => {
            let heads = rng.gen_range(1..=2);
            let d = heads * rng.gen_range(1..=3);
            let l1 = rng.gen_range(1..=3);
            let l2 = rng.gen_range(1..=3);
            let rows = l1 + l2;
            let q = s.add("q", randn(rng, rows, d)).unwrap();
            let kk = s.add("k", randn(rng, rows, d)).unwrap();
            let v = s.add("v", randn(rng, rows, d)).unwrap();
            let mut bias = vec![0.0; rows];
            if l2 > 1 {
                bias[rows - 1] = -1e9;
            }
            let segments = vec![0..l1, l1..rows];
            let w = weights(rng, rows, d);
            Box::new(move |g, st| {
                let (vq, vk, vv) = (g.param(st, q), g.param(st, kk), g.param(st, v));
                let o = g.attention(
                    vq,
                    vk,
                    vv,
                    &AttentionSpec {
                        segments: &segments,
                        heads,
                        key_bias: &bias,
                    },
                )?;
                contract(g, o, w.clone())
            })
        }
        other => panic!("unknown op {other}"),
    };
    (s, build)
}

pub const OPS: [&str; 22] = [
    "matmul",
    "transpose",
    "add",
    "mul",
    "scale",
    "div_scalar",
    "concat0",
    "concat1",
    "mean0",
    "mean1",
    "sum",
    "softmax",
    "log_softmax",
    "log",
    "exp",
    "gelu",
    "layer_norm",
    "embedding",
    "pick",
    "normalize_rows",
    "cross_entropy",
    "attention",
];

/// Runs `cases` random cases of every differentiable op and reports the worst
/// relative error per op.
pub fn op_suite(seed: u64, cases: usize, tolerance: f64) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::with_capacity(OPS.len());
    for (k, op) in OPS.iter().enumerate() {
        let mut worst: Option<CheckReport> = None;
        for case in 0..cases {
            let mut rng = derive(seed, Stream::Check, &[k as u64, case as u64]);
            let (mut store, build) = op_case(op, &mut rng);
            let coords = all_coordinates(&store);
            let rep = check(op, &mut store, &build, &coords, STEP, tolerance, 1e-6)?;
            if worst.as_ref().is_none_or(|w| rep.max_rel_err > w.max_rel_err) {
                worst = Some(rep);
            }
        }
        if let Some(mut w) = worst {
            w.coordinates = cases;
            reports.push(w);
        }
    }
    Ok(reports)
}

/// Gradient check of the full training objective on a random batch of
/// `batch` sentences with `d`-wide, 2-layer encoders. `coords` scalars are
/// sampled by first picking a parameter tensor uniformly, then an entry.
pub fn objective_check(seed: u64, batch: usize, d: usize, coords: usize, tolerance: f64) -> Result<CheckReport> {
    use crate::corpus::PreprocessConfig;
    use crate::encoder::{BiEncoder, EncoderConfig};
    use crate::pipeline::prepare_synth;
    use crate::synth::{generate, SynthSpec};
    use crate::training::{build_loss, prepare_batch, ObjectiveMode};

    let spec = SynthSpec {
        n_relations: 4,
        instances_per_relation: batch.max(2),
        vocab_size: 60,
        n_train_relations: 4,
        rng_seed: seed,
        ..SynthSpec::default()
    };
    let data = prepare_synth(&generate(&spec)?, 32)?;
    let cfg = EncoderConfig {
        vocab_size: data.vocab.len(),
        d_model: d,
        n_layers: 2,
        n_heads: 2,
        ffn_dim: 2 * d,
        max_seq_len: 32,
        init_std: 0.1,
        ..EncoderConfig::default()
    };
    let model = BiEncoder::new(cfg, seed, crate::losses::INITIAL_TEMPERATURE)?;
    let mut rng = derive(seed, Stream::Check, &[u64::MAX]);
    let indices = rand::seq::index::sample(&mut rng, data.train.len(), batch).into_vec();
    let pre = PreprocessConfig {
        max_seq_len: 32,
        rng_seed: seed,
        ..PreprocessConfig::default()
    };
    let prepared = prepare_batch(&data.train, &indices, &pre, seed, 0)?;
    // Exactly-zero gradients would only measure rounding in the difference:
    // embedding rows of tokens or positions absent from the batch, and key
    // biases, which shift every score of a softmax row by the same amount.
    let reachable = |seqs: &[Vec<usize>]| {
        let mut tokens: Vec<usize> = seqs.iter().flatten().copied().collect();
        tokens.sort_unstable();
        tokens.dedup();
        (tokens, seqs.iter().map(Vec::len).max().unwrap_or(0))
    };
    let sides = [
        (crate::encoder::SENTENCE_PREFIX, reachable(&prepared.sentences)),
        (crate::encoder::LABEL_PREFIX, reachable(&prepared.labels)),
    ];
    let handles = model.clone();
    let build = move |g: &mut Graph, st: &ParamStore| {
        Ok(build_loss(g, st, &handles, &prepared, ObjectiveMode::Full, false)?.objective)
    };
    let mut store = model.store;
    let params: Vec<(ParamId, String)> = store
        .iter()
        .filter(|(_, p)| !p.name.ends_with("attn.bk"))
        .map(|(id, p)| (id, p.name.clone()))
        .collect();
    let picks: Vec<(ParamId, usize)> = (0..coords)
        .map(|_| {
            let (id, name) = &params[rng.gen_range(0..params.len())];
            let value = store.value(*id);
            let cols = value.cols();
            let side = sides.iter().find(|(prefix, _)| name.starts_with(prefix));
            let row = match (side, name.rsplit('.').next()) {
                (Some((_, (tokens, _))), Some("tok_emb")) => tokens[rng.gen_range(0..tokens.len())],
                (Some((_, (_, len))), Some("pos_emb")) => rng.gen_range(0..*len),
                _ => rng.gen_range(0..value.rows()),
            };
            (*id, row * cols + rng.gen_range(0..cols))
        })
        .collect();
    // A loss near 15 resolves derivatives to about eps * 15 / 2h ~ 2e-10 at
    // h = 1e-5, so smaller gradients are compared absolutely, to 1e-9.
    check("objective", &mut store, &build, &picks, STEP, tolerance, 1e-5)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_matches_finite_differences() {
        // 22 ops x 5 cases = 110 random cases.
        let reports = op_suite(7, 5, 1e-5).unwrap();
        for r in &reports {
            assert!(r.passed, "{} max rel err {:e}", r.name, r.max_rel_err);
        }
        assert_eq!(reports.len(), OPS.len());
    }

    #[test]
    fn softmax_gradient_at_fixed_point() {
        // f(x) = sum(softmax(x) * y), x = [1,2,3], y = [1,0,0]
        let mut s = ParamStore::new();
        let x = s.add("x", Tensor::row(&[1.0, 2.0, 3.0])).unwrap();
        let build = move |g: &mut Graph, st: &ParamStore| {
            let vx = g.param(st, x);
            let sm = g.softmax(vx);
            let y = g.constant(Tensor::row(&[1.0, 0.0, 0.0]));
            let p = g.mul(sm, y)?;
            Ok(g.sum(p))
        };
        let coords = all_coordinates(&s);
        let rep = check("softmax", &mut s, &build, &coords, 1e-5, 1e-6, 0.0).unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn full_objective_matches_finite_differences() {
        let rep = objective_check(3, 8, 8, 20, 1e-4).unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0, 0.0), 0.0);
        assert!((relative_error(2.0, 1.0, 0.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0, 1e-6) - 1e-3).abs() < 1e-15);
    }
}
