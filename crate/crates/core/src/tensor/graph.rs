//! Append-only computation tape.
//!
//! Nodes are created in evaluation order, so reverse index order is a valid
//! reverse topological order for the backward sweep.

use super::kernels::{self, dot, log_sum_exp, softmax_into};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use std::ops::Range;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    DivScalar(Var, Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    Exp(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    PickElements {
        x: Var,
        at: Vec<(usize, usize)>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<Range<usize>>,
        heads: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Multi-head scaled dot-product attention restricted to contiguous row blocks.
pub struct AttentionSpec<'a> {
    /// Row ranges of the stacked sequences; rows only attend within their block.
    pub segments: &'a [Range<usize>],
    pub heads: usize,
    /// Additive per-key bias (0 for visible keys, a large negative value for
    /// padding). Length must equal the number of rows.
    pub key_bias: &'a [f64],
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Constant => false,
            Op::Param(_) => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, &[])
    }

    /// A trainable leaf; gradients flow back into `store` on [`Graph::backward`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), &[])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), &[a])
    }

    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<bool> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(false)
        } else if sb[0] == 1 && sb[1] == sa[1] {
            Ok(true)
        } else {
            Err(Error::shape(op, format!("{sa:?} with {sb:?}")))
        }
    }

    /// Elementwise sum; `b` may be a `1 x c` row broadcast over `a`'s rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = self.check_broadcast("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let c = va.cols();
        let data = if !broadcast {
            va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect()
        } else {
            va.data()
                .iter()
                .enumerate()
                .map(|(i, &x)| x + vb.data()[i % c])
                .collect()
        };
        let out = Tensor::new(va.rows(), c, data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product; `b` may be a `1 x c` row broadcast over `a`'s rows.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = self.check_broadcast("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let c = va.cols();
        let data = if broadcast {
            va.data()
                .iter()
                .enumerate()
                .map(|(i, &x)| x * vb.data()[i % c])
                .collect()
        } else {
            va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect()
        };
        let out = Tensor::new(va.rows(), c, data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.push(out, Op::Scale(a, factor), &[a])
    }

    /// Divides every entry of `a` by the `1 x 1` tensor `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.shape(s) != [1, 1] {
            return Err(Error::shape(
                "div_scalar",
                format!("divisor must be 1x1, got {:?}", self.shape(s)),
            ));
        }
        let d = self.value(s).item();
        let out = self.value(a).map(|x| x / d);
        Ok(self.push(out, Op::DivScalar(a, s), &[a, s]))
    }

    /// Concatenates along `axis` (0 = stack rows, 1 = join columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no operands"));
        }
        let shapes: Vec<[usize; 2]> = parts.iter().map(|&p| self.shape(p)).collect();
        let out = match axis {
            0 => {
                let cols = shapes[0][1];
                if shapes.iter().any(|s| s[1] != cols) {
                    return Err(Error::shape("concat", format!("axis 0 operands {shapes:?}")));
                }
                let mut data = Vec::new();
                for &p in parts {
                    data.extend_from_slice(self.value(p).data());
                }
                Tensor::new(shapes.iter().map(|s| s[0]).sum(), cols, data)?
            }
            1 => {
                let rows = shapes[0][0];
                if shapes.iter().any(|s| s[0] != rows) {
                    return Err(Error::shape("concat", format!("axis 1 operands {shapes:?}")));
                }
                let cols: usize = shapes.iter().map(|s| s[1]).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row_slice(r));
                    }
                }
                Tensor::new(rows, cols, data)?
            }
            _ => return Err(Error::shape("concat", format!("axis {axis} out of range"))),
        };
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Mean over `axis`, keeping it as a dimension of size one.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        let [r, c] = v.shape();
        let out = match axis {
            0 => {
                if r == 0 {
                    return Err(Error::shape("mean", "mean over zero rows"));
                }
                let mut acc = vec![0.0; c];
                for i in 0..r {
                    for (a, &x) in acc.iter_mut().zip(v.row_slice(i)) {
                        *a += x;
                    }
                }
                Tensor::new(1, c, acc.into_iter().map(|s| s / r as f64).collect())?
            }
            1 => {
                if c == 0 {
                    return Err(Error::shape("mean", "mean over zero columns"));
                }
                let data = (0..r).map(|i| v.row_slice(i).iter().sum::<f64>() / c as f64);
                Tensor::new(r, 1, data.collect())?
            }
            _ => return Err(Error::shape("mean", format!("axis {axis} out of range"))),
        };
        Ok(self.push(out, Op::Mean { x, axis }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    /// Softmax over the last axis (each row).
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let [r, c] = v.shape();
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            softmax_into(v.row_slice(i), &mut out.data_mut()[i * c..(i + 1) * c]);
        }
        self.push(out, Op::Softmax(x), &[x])
    }

    /// Log-softmax over each row, via log-sum-exp.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let [r, c] = v.shape();
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let row = v.row_slice(i);
            let lse = log_sum_exp(row);
            for (o, &x) in out.data_mut()[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        self.push(out, Op::LogSoftmax(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::ln);
        self.push(out, Op::Log(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        self.push(out, Op::Exp(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        self.push(out, Op::Gelu(x), &[x])
    }

    /// Row-wise layer normalisation with `1 x c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let [r, c] = self.shape(x);
        if self.shape(gamma) != [1, c] || self.shape(beta) != [1, c] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "input {:?}, gamma {:?}, beta {:?}",
                    [r, c],
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let v = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Tensor::zeros(r, c);
        let mut out = Tensor::zeros(r, c);
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = v.row_slice(i);
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for j in 0..c {
                let h = (row[j] - mu) * is;
                xhat.set(i, j, h);
                out.set(i, j, h * g[j] + b[j]);
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Selects rows of `x` (repeats allowed). Used for embedding lookup and pooling.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let [r, c] = v.shape();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::shape(
                    "gather_rows",
                    format!("row {i} out of range for {r} rows"),
                ));
            }
            data.extend_from_slice(v.row_slice(i));
        }
        let out = Tensor::new(rows.len(), c, data)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    /// Embedding lookup: rows of `table` indexed by token id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vocab = self.shape(table)[0];
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::TokenOutOfRange { id, vocab });
        }
        self.gather_rows(table, ids)
    }

    /// Picks individual entries into a `k x 1` column.
    pub fn pick(&mut self, x: Var, at: &[(usize, usize)]) -> Result<Var> {
        let v = self.value(x);
        let [r, c] = v.shape();
        let mut data = Vec::with_capacity(at.len());
        for &(i, j) in at {
            if i >= r || j >= c {
                return Err(Error::shape(
                    "pick",
                    format!("({i},{j}) out of range for {:?}", [r, c]),
                ));
            }
            data.push(v.get(i, j));
        }
        let out = Tensor::new(at.len(), 1, data)?;
        Ok(self.push(out, Op::PickElements { x, at: at.to_vec() }, &[x]))
    }

    /// Scales each row to unit L2 norm. A zero or non-finite row is an error.
    pub fn normalize_rows(&mut self, x: Var, what: &'static str) -> Result<Var> {
        let v = self.value(x);
        let [r, c] = v.shape();
        let mut out = Tensor::zeros(r, c);
        let mut norms = Vec::with_capacity(r);
        for i in 0..r {
            let row = v.row_slice(i);
            let n = dot(row, row).sqrt();
            if !n.is_finite() {
                return Err(Error::NonFinite(format!("{what} at row {i}")));
            }
            if n == 0.0 {
                return Err(Error::ZeroNorm { what, row: i });
            }
            norms.push(n);
            for (o, &x) in out.data_mut()[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = x / n;
            }
        }
        Ok(self.push(out, Op::NormalizeRows { x, norms }, &[x]))
    }

    /// Mean cross-entropy of `logits` rows against target column indices.
    /// Zero rows yield a loss of exactly 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        let [r, c] = v.shape();
        if targets.len() != r {
            return Err(Error::shape(
                "cross_entropy",
                format!("{r} rows but {} targets", targets.len()),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::TokenOutOfRange { id: t, vocab: c });
        }
        let mut probs = Tensor::zeros(r, c);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = v.row_slice(i);
            total += log_sum_exp(row) - row[t];
            softmax_into(row, &mut probs.data_mut()[i * c..(i + 1) * c]);
        }
        let loss = if r == 0 { 0.0 } else { total / r as f64 };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Multi-head attention over stacked sequences. `q`, `k`, `v` are
    /// already-projected `rows x d` matrices.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: &AttentionSpec<'_>) -> Result<Var> {
        let [rows, d] = self.shape(q);
        if self.shape(k) != [rows, d] || self.shape(v) != [rows, d] {
            return Err(Error::shape(
                "attention",
                format!(
                    "q {:?}, k {:?}, v {:?}",
                    [rows, d],
                    self.shape(k),
                    self.shape(v)
                ),
            ));
        }
        if spec.heads == 0 || d % spec.heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("width {d} not divisible by {} heads", spec.heads),
            ));
        }
        if spec.key_bias.len() != rows {
            return Err(Error::shape(
                "attention",
                format!("{} key biases for {rows} rows", spec.key_bias.len()),
            ));
        }
        for s in spec.segments {
            if s.start > s.end || s.end > rows {
                return Err(Error::shape(
                    "attention",
                    format!("segment {s:?} out of range for {rows} rows"),
                ));
            }
        }
        let dh = d / spec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = Tensor::zeros(rows, d);
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        for seg in spec.segments {
            let len = seg.len();
            scores.resize(len, 0.0);
            for h in 0..spec.heads {
                let hs = h * dh..(h + 1) * dh;
                for i in seg.clone() {
                    let qi = &qv.row_slice(i)[hs.clone()];
                    for (jj, j) in seg.clone().enumerate() {
                        scores[jj] = dot(qi, &kv.row_slice(j)[hs.clone()]) * scale + spec.key_bias[j];
                    }
                    let start = probs.len();
                    probs.resize(start + len, 0.0);
                    softmax_into(&scores, &mut probs[start..]);
                    let orow = &mut out.data_mut()[i * d..(i + 1) * d][hs.clone()];
                    for (jj, j) in seg.clone().enumerate() {
                        let p = probs[start + jj];
                        for (o, &x) in orow.iter_mut().zip(&vv.row_slice(j)[hs.clone()]) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                segments: spec.segments.to_vec(),
                heads: spec.heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Reverse sweep from a scalar `loss`. Every parameter gradient in `store`
    /// is overwritten: reachable leaves receive d(loss)/d(leaf), unreachable
    /// leaves are zero.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.shape(loss) != [1, 1] {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got {:?}", self.shape(loss)),
            ));
        }
        store.zero_grad();
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, g, &mut grads, store);
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(
        &self,
        node: &Node,
        g: Tensor,
        grads: &mut [Option<Tensor>],
        store: &mut ParamStore,
    ) {
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let y = &node.value;
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => store.get_mut(*id).grad.add_assign(&g),
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    acc(*a, kernels::matmul_a_bt(&g, self.value(*b)));
                }
                if self.needs(*b) {
                    acc(*b, kernels::matmul_at_b(self.value(*a), &g));
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Add(a, b) => {
                if self.needs(*b) {
                    acc(*b, reduce_to(&g, self.shape(*b)));
                }
                if self.needs(*a) {
                    acc(*a, g);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let c = va.cols();
                let broadcast = vb.shape() != va.shape();
                if self.needs(*a) {
                    let data = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| gi * vb.data()[if broadcast { i % c } else { i }])
                        .collect();
                    acc(*a, Tensor::new(va.rows(), c, data).expect("shape"));
                }
                if self.needs(*b) {
                    let prod: Vec<f64> = g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect();
                    let full = Tensor::new(va.rows(), c, prod).expect("shape");
                    acc(*b, reduce_to(&full, vb.shape()));
                }
            }
            Op::Scale(a, f) => acc(*a, g.map(|x| x * f)),
            Op::DivScalar(a, s) => {
                let d = self.value(*s).item();
                if self.needs(*s) {
                    let num = dot(g.data(), self.value(*a).data());
                    acc(*s, Tensor::scalar(-num / (d * d)));
                }
                if self.needs(*a) {
                    acc(*a, g.map(|x| x / d));
                }
            }
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                for &p in parts {
                    let [pr, pc] = self.shape(p);
                    let piece = if *axis == 0 {
                        let c = g.cols();
                        let t = Tensor::new(pr, pc, g.data()[offset * c..(offset + pr) * c].to_vec());
                        offset += pr;
                        t
                    } else {
                        let mut data = Vec::with_capacity(pr * pc);
                        for r in 0..pr {
                            data.extend_from_slice(&g.row_slice(r)[offset..offset + pc]);
                        }
                        offset += pc;
                        Tensor::new(pr, pc, data)
                    };
                    if self.needs(p) {
                        acc(p, piece.expect("shape"));
                    }
                }
            }
            Op::Mean { x, axis } => {
                let [r, c] = self.shape(*x);
                let mut out = Tensor::zeros(r, c);
                for i in 0..r {
                    for j in 0..c {
                        let v = if *axis == 0 {
                            g.data()[j] / r as f64
                        } else {
                            g.data()[i] / c as f64
                        };
                        out.set(i, j, v);
                    }
                }
                acc(*x, out);
            }
            Op::Sum(x) => {
                let [r, c] = self.shape(*x);
                acc(*x, Tensor::full(r, c, g.item()));
            }
            Op::Softmax(x) => {
                let [r, c] = y.shape();
                let mut out = Tensor::zeros(r, c);
                for i in 0..r {
                    let (yr, gr) = (y.row_slice(i), g.row_slice(i));
                    let s = dot(yr, gr);
                    for j in 0..c {
                        out.set(i, j, yr[j] * (gr[j] - s));
                    }
                }
                acc(*x, out);
            }
            Op::LogSoftmax(x) => {
                let [r, c] = y.shape();
                let mut out = Tensor::zeros(r, c);
                for i in 0..r {
                    let (yr, gr) = (y.row_slice(i), g.row_slice(i));
                    let s: f64 = gr.iter().sum();
                    for j in 0..c {
                        out.set(i, j, gr[j] - yr[j].exp() * s);
                    }
                }
                acc(*x, out);
            }
            Op::Log(x) => {
                let xv = self.value(*x);
                let data = g.data().iter().zip(xv.data()).map(|(g, x)| g / x).collect();
                acc(*x, Tensor::new(xv.rows(), xv.cols(), data).expect("shape"));
            }
            Op::Exp(x) => {
                let data = g.data().iter().zip(y.data()).map(|(g, y)| g * y).collect();
                acc(*x, Tensor::new(y.rows(), y.cols(), data).expect("shape"));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&g, &x)| {
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                acc(*x, Tensor::new(xv.rows(), xv.cols(), data).expect("shape"));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let [r, c] = xhat.shape();
                let gam = self.value(*gamma).data();
                if self.needs(*gamma) {
                    let mut dg = Tensor::zeros(1, c);
                    for i in 0..r {
                        for j in 0..c {
                            dg.data_mut()[j] += g.get(i, j) * xhat.get(i, j);
                        }
                    }
                    acc(*gamma, dg);
                }
                if self.needs(*beta) {
                    acc(*beta, reduce_to(&g, [1, c]));
                }
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(r, c);
                    let n = c as f64;
                    let mut dxhat = vec![0.0; c];
                    for (i, &inv) in inv_std.iter().enumerate() {
                        let gr = g.row_slice(i);
                        let xr = xhat.row_slice(i);
                        for j in 0..c {
                            dxhat[j] = gr[j] * gam[j];
                        }
                        let s1: f64 = dxhat.iter().sum();
                        let s2 = dot(&dxhat, xr);
                        for j in 0..c {
                            dx.set(i, j, inv / n * (n * dxhat[j] - s1 - xr[j] * s2));
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::GatherRows { x, rows } => {
                let [r, c] = self.shape(*x);
                let mut out = Tensor::zeros(r, c);
                for (k, &i) in rows.iter().enumerate() {
                    let dst = &mut out.data_mut()[i * c..(i + 1) * c];
                    for (d, &s) in dst.iter_mut().zip(g.row_slice(k)) {
                        *d += s;
                    }
                }
                acc(*x, out);
            }
            Op::PickElements { x, at } => {
                let [r, c] = self.shape(*x);
                let mut out = Tensor::zeros(r, c);
                for (k, &(i, j)) in at.iter().enumerate() {
                    out.data_mut()[i * c + j] += g.data()[k];
                }
                acc(*x, out);
            }
            Op::NormalizeRows { x, norms } => {
                let [r, c] = y.shape();
                let mut out = Tensor::zeros(r, c);
                for (i, &norm) in norms.iter().enumerate() {
                    let (yr, gr) = (y.row_slice(i), g.row_slice(i));
                    let s = dot(yr, gr);
                    for j in 0..c {
                        out.set(i, j, (gr[j] - yr[j] * s) / norm);
                    }
                }
                acc(*x, out);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let [r, c] = probs.shape();
                let mut out = probs.clone();
                let f = g.item() / r.max(1) as f64;
                for (i, &t) in targets.iter().enumerate() {
                    out.data_mut()[i * c + t] -= 1.0;
                }
                out.data_mut().iter_mut().for_each(|v| *v *= f);
                acc(*logits, out);
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let [rows, d] = qv.shape();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut gq = Tensor::zeros(rows, d);
                let mut gk = Tensor::zeros(rows, d);
                let mut gv = Tensor::zeros(rows, d);
                let mut dp = Vec::new();
                let mut cursor = 0;
                for seg in segments {
                    let len = seg.len();
                    dp.resize(len, 0.0);
                    for h in 0..*heads {
                        let hs = h * dh..(h + 1) * dh;
                        for i in seg.clone() {
                            let p = &probs[cursor..cursor + len];
                            cursor += len;
                            let gi = &g.row_slice(i)[hs.clone()];
                            for (jj, j) in seg.clone().enumerate() {
                                dp[jj] = dot(gi, &vv.row_slice(j)[hs.clone()]);
                                let gvr = &mut gv.data_mut()[j * d..(j + 1) * d][hs.clone()];
                                for (o, &x) in gvr.iter_mut().zip(gi) {
                                    *o += p[jj] * x;
                                }
                            }
                            let s = dot(p, &dp);
                            let qi: Vec<f64> = qv.row_slice(i)[hs.clone()].to_vec();
                            for (jj, j) in seg.clone().enumerate() {
                                let ds = p[jj] * (dp[jj] - s) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = &kv.row_slice(j)[hs.clone()];
                                let gqr = &mut gq.data_mut()[i * d..(i + 1) * d][hs.clone()];
                                for (o, &x) in gqr.iter_mut().zip(kj) {
                                    *o += ds * x;
                                }
                                let gkr = &mut gk.data_mut()[j * d..(j + 1) * d][hs.clone()];
                                for (o, &x) in gkr.iter_mut().zip(&qi) {
                                    *o += ds * x;
                                }
                            }
                        }
                    }
                }
                if self.needs(*q) {
                    acc(*q, gq);
                }
                if self.needs(*k) {
                    acc(*k, gk);
                }
                if self.needs(*v) {
                    acc(*v, gv);
                }
            }
        }
    }
}

/// Sums `g` down to `shape`, which is either `g`'s own shape or a `1 x c` row.
fn reduce_to(g: &Tensor, shape: [usize; 2]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let c = g.cols();
    let mut out = Tensor::zeros(1, c);
    for i in 0..g.rows() {
        for (o, &x) in out.data_mut().iter_mut().zip(g.row_slice(i)) {
            *o += x;
        }
    }
    out
}
