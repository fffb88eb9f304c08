//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! Every op appends a node holding its forward value. `backward` walks the
//! tape in reverse and accumulates exact gradients into each node that
//! depends on a trainable leaf.

use std::collections::HashMap;
use std::ops::Range;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{Gradients, ParamStore};
use super::tensor::{
    dot, matmul_acc, matmul_at_acc, matmul_bt_acc, softmax_in_place, Tensor,
};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// For every query row, the key rows it may attend to.
#[derive(Clone, Debug, PartialEq)]
pub struct KeySpans {
    spans: Vec<Vec<Range<usize>>>,
}

impl KeySpans {
    pub fn new(spans: Vec<Vec<Range<usize>>>) -> Self {
        KeySpans { spans }
    }

    /// Every query sees every key.
    pub fn full(queries: usize, keys: usize) -> Self {
        KeySpans {
            spans: vec![vec![0..keys]; queries],
        }
    }

    /// Causal attention within consecutive segments of the given lengths.
    pub fn causal_segments(lengths: &[usize]) -> Self {
        let mut spans = Vec::new();
        let mut start = 0;
        for &len in lengths {
            for t in 0..len {
                spans.push(vec![start..start + t + 1]);
            }
            start += len;
        }
        KeySpans { spans }
    }

    /// Bidirectional attention restricted to each segment.
    pub fn block_segments(lengths: &[usize]) -> Self {
        let mut spans = Vec::new();
        let mut start = 0;
        for &len in lengths {
            for _ in 0..len {
                spans.push(vec![start..start + len]);
            }
            start += len;
        }
        KeySpans { spans }
    }

    pub fn queries(&self) -> usize {
        self.spans.len()
    }

    pub fn spans(&self, query: usize) -> &[Range<usize>] {
        &self.spans[query]
    }

    fn key_count(&self, query: usize) -> usize {
        self.spans[query].iter().map(|r| r.len()).sum()
    }

    fn max_key(&self) -> usize {
        self.spans
            .iter()
            .flat_map(|s| s.iter().map(|r| r.end))
            .max()
            .unwrap_or(0)
    }
}

enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    LogEps(Var, f64),
    Softmax(Var),
    Sum(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SelectRows(Var, Vec<usize>),
    Embedding(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Dropout(Var, Vec<f64>),
    Attention(Box<AttentionCache>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor,
    },
    ProbMass {
        logits: Var,
        row_sets: Vec<usize>,
        sets: Rc<Vec<Vec<bool>>>,
        probs: Tensor,
    },
}

struct AttentionCache {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    spans: Rc<KeySpans>,
    offsets: Vec<usize>,
    probs: Vec<f64>,
    keep: Option<Vec<f64>>,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

type TrainableFilter = Box<dyn Fn(&str) -> bool>;

pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    train: bool,
    rng: ChaCha8Rng,
    params: HashMap<String, Var>,
    param_order: Vec<(String, Var)>,
    trainable: Option<TrainableFilter>,
}

impl Graph {
    /// `train` enables dropout; `seed` drives the dropout masks.
    pub fn new(train: bool, seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            train,
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: HashMap::new(),
            param_order: Vec::new(),
            trainable: None,
        }
    }

    pub fn eval() -> Self {
        Graph::new(false, 0)
    }

    /// Restrict gradient flow to parameters accepted by `filter`.
    pub fn with_trainable(mut self, filter: impl Fn(&str) -> bool + 'static) -> Self {
        self.trainable = Some(Box::new(filter));
        self
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node created after the first `len`. Parameter bindings made
    /// after that point are forgotten too.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.grads.clear();
        self.param_order.retain(|(_, v)| v.0 < len);
        self.params.retain(|_, v| v.0 < len);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    /// Binds a named parameter. Repeated calls return the same node, so a tensor
    /// used in several places accumulates one gradient.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}`")))?
            .clone();
        let needs = self.trainable.as_ref().map_or(true, |f| f(name));
        let v = self.push(t, Op::Param, needs);
        self.params.insert(name.to_string(), v);
        self.param_order.push((name.to_string(), v));
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut out = Tensor::zeros(av.rows(), bv.cols());
        matmul_acc(av, bv, &mut out);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(Error::shape(
                "matmul_bt",
                format!("{:?} x {:?}ᵀ", av.shape(), bv.shape()),
            ));
        }
        let mut out = Tensor::zeros(av.rows(), bv.rows());
        matmul_bt_acc(av, bv, &mut out);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMulBt(a, b), ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(av.rows(), av.cols(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let av = self.value(a);
        Tensor::from_vec(av.rows(), av.cols(), av.data().iter().map(|&x| f(x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Broadcast-adds the `1 x c` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, &x) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += x;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::AddRow(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.map(a, |x| x * k);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, k), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x.max(0.0));
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| 1.0 / (1.0 + (-x).exp()));
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::abs);
        let ng = self.ng(a);
        self.push(out, Op::Abs(a), ng)
    }

    /// `ln(x + eps)`.
    pub fn log_eps(&mut self, a: Var, eps: f64) -> Var {
        let out = self.map(a, |x| (x + eps).ln());
        let ng = self.ng(a);
        self.push(out, Op::LogEps(a, eps), ng)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    /// Sum of all entries, as a `1 x 1` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            let shapes: Vec<_> = parts.iter().map(|&p| self.value(p).shape()).collect();
            return Err(Error::shape("concat_cols", format!("{shapes:?}")));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut c0 = 0;
            for &p in parts {
                let src = self.nodes[p.0].value.row(r);
                out.row_mut(r)[c0..c0 + src.len()].copy_from_slice(src);
                c0 += src.len();
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            let shapes: Vec<_> = parts.iter().map(|&p| self.value(p).shape()).collect();
            return Err(Error::shape("concat_rows", format!("{shapes:?}")));
        }
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
            rows += self.value(p).rows();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if start >= end || end > av.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("{start}..{end} of {:?}", av.shape()),
            ));
        }
        let mut out = Tensor::zeros(av.rows(), end - start);
        for r in 0..av.rows() {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..end]);
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::SliceCols(a, start), ng))
    }

    /// Gathers rows by index (repeats allowed).
    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= av.rows()) {
            return Err(Error::shape(
                "select_rows",
                format!("row {bad} of {:?}", av.shape()),
            ));
        }
        let out = av.select_rows(idx);
        let ng = self.ng(a);
        Ok(self.push(out, Op::SelectRows(a, idx.to_vec()), ng))
    }

    /// Embedding lookup: row `ids[t]` of `table` for each `t`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= tv.rows()) {
            return Err(Error::shape(
                "embedding",
                format!("id {bad} for table {:?}", tv.shape()),
            ));
        }
        let out = tv.select_rows(ids);
        let ng = self.ng(table);
        Ok(self.push(out, Op::Embedding(table, ids.to_vec()), ng))
    }

    /// Row-wise layer normalisation with affine `gain` and `bias` (`1 x c`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        for (name, p) in [("gain", gain), ("bias", bias)] {
            let s = self.value(p).shape();
            if s != (1, c) {
                return Err(Error::shape(
                    "layer_norm",
                    format!("{name} {s:?} for input {:?}", xv.shape()),
                ));
            }
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = Tensor::zeros(xv.rows(), c);
        let mut out = Tensor::zeros(xv.rows(), c);
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat.set(r, j, h);
                out.set(r, j, h * g.data()[j] + b.data()[j]);
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Inverted dropout. Identity in eval mode or when `rate` is zero.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Var {
        if !self.train || rate <= 0.0 {
            return a;
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let av = self.value(a);
        let data = av.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data);
        let ng = self.ng(a);
        self.push(out, Op::Dropout(a, mask), ng)
    }

    /// Multi-head scaled dot-product attention. `q` is `Tq x d`, `k` and `v`
    /// are `Tk x d`; head `h` uses columns `h*d/heads..(h+1)*d/heads`.
    /// Queries with no permitted keys produce zero rows.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        spans: Rc<KeySpans>,
        dropout: f64,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if heads == 0
            || d % heads != 0
            || kv.cols() != d
            || vv.shape() != kv.shape()
            || spans.queries() != qv.rows()
            || spans.max_key() > kv.rows()
        {
            return Err(Error::shape(
                "attention",
                format!(
                    "q {:?} k {:?} v {:?} heads {heads} spans {}x<= {}",
                    qv.shape(),
                    kv.shape(),
                    vv.shape(),
                    spans.queries(),
                    spans.max_key()
                ),
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let tq = qv.rows();

        let mut offsets = Vec::with_capacity(tq * heads + 1);
        let mut total = 0;
        for i in 0..tq {
            let n = spans.key_count(i);
            for _ in 0..heads {
                offsets.push(total);
                total += n;
            }
        }
        offsets.push(total);

        let mut probs = vec![0.0; total];
        let use_dropout = self.train && dropout > 0.0;
        let keep = if use_dropout {
            let kf = 1.0 / (1.0 - dropout);
            Some(
                (0..total)
                    .map(|_| if self.rng.gen::<f64>() < dropout { 0.0 } else { kf })
                    .collect::<Vec<_>>(),
            )
        } else {
            None
        };

        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = Tensor::zeros(tq, d);
        for i in 0..tq {
            let qi = qv.row(i);
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let off = offsets[i * heads + h];
                let n = offsets[i * heads + h + 1] - off;
                if n == 0 {
                    continue;
                }
                let p = &mut probs[off..off + n];
                for (slot, j) in spans.spans(i).iter().flat_map(|r| r.clone()).enumerate() {
                    p[slot] = dot(&qi[cols.clone()], &kv.row(j)[cols.clone()]) * scale;
                }
                softmax_in_place(p);
                let orow = &mut out.row_mut(i)[cols.clone()];
                for (slot, j) in spans.spans(i).iter().flat_map(|r| r.clone()).enumerate() {
                    let w = match &keep {
                        Some(m) => p[slot] * m[off + slot],
                        None => p[slot],
                    };
                    if w == 0.0 {
                        continue;
                    }
                    for (o, &x) in orow.iter_mut().zip(&vv.row(j)[cols.clone()]) {
                        *o += w * x;
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            out,
            Op::Attention(Box::new(AttentionCache {
                q,
                k,
                v,
                heads,
                spans,
                offsets,
                probs,
                keep,
            })),
            ng,
        ))
    }

    /// Summed token-level negative log-likelihood of `targets` under
    /// row-wise softmax of `logits`.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != targets.len() || targets.iter().any(|&t| t >= lv.cols()) {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {:?} for {} targets", lv.shape(), targets.len()),
            ));
        }
        let mut probs = lv.clone();
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = probs.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                s += *v;
            }
            loss -= row[t].ln() - s.ln();
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Total softmax probability that row `t` of `logits` places on the ids
    /// flagged in `sets[row_sets[t]]`.
    pub fn prob_mass(
        &mut self,
        logits: Var,
        row_sets: &[usize],
        sets: Rc<Vec<Vec<bool>>>,
    ) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != row_sets.len()
            || row_sets.iter().any(|&s| s >= sets.len())
            || sets.iter().any(|s| s.len() != lv.cols())
        {
            return Err(Error::shape(
                "prob_mass",
                format!(
                    "logits {:?}, {} row sets, set sizes {:?}",
                    lv.shape(),
                    row_sets.len(),
                    sets.iter().map(|s| s.len()).collect::<Vec<_>>()
                ),
            ));
        }
        let mut probs = lv.clone();
        let mut mass = 0.0;
        for (r, &s) in row_sets.iter().enumerate() {
            let row = probs.row_mut(r);
            softmax_in_place(row);
            mass += row
                .iter()
                .zip(&sets[s])
                .filter(|(_, &f)| f)
                .map(|(p, _)| p)
                .sum::<f64>();
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(mass),
            Op::ProbMass {
                logits,
                row_sets: row_sets.to_vec(),
                sets,
                probs,
            },
            ng,
        ))
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Reverse pass from a `1 x 1` output.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rv = self.value(root);
        if rv.shape() != (1, 1) {
            return Err(Error::shape("backward", format!("root {:?}", rv.shape())));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let gout = match self.grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(idx, &gout);
            self.grads[idx] = Some(gout);
        }
        Ok(())
    }

    fn backward_node(&mut self, idx: usize, g: &Tensor) {
        // Parent gradients are computed into owned tensors first so that no
        // borrow of `self.nodes` outlives the call to `accumulate`.
        let mut pending: Vec<(Var, Tensor)> = Vec::new();
        let nodes = &self.nodes;
        let node = &nodes[idx];
        macro_rules! val {
            ($v:expr) => {
                &nodes[$v.0].value
            };
        }
        macro_rules! ng {
            ($v:expr) => {
                nodes[$v.0].needs_grad
            };
        }
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val!(*a), val!(*b));
                if ng!(*a) {
                    let mut da = Tensor::zeros(av.rows(), av.cols());
                    matmul_bt_acc(g, bv, &mut da);
                    pending.push((*a, da));
                }
                if ng!(*b) {
                    let mut db = Tensor::zeros(bv.rows(), bv.cols());
                    matmul_at_acc(av, g, &mut db);
                    pending.push((*b, db));
                }
            }
            Op::MatMulBt(a, b) => {
                let (av, bv) = (val!(*a), val!(*b));
                if ng!(*a) {
                    let mut da = Tensor::zeros(av.rows(), av.cols());
                    matmul_acc(g, bv, &mut da);
                    pending.push((*a, da));
                }
                if ng!(*b) {
                    let mut db = Tensor::zeros(bv.rows(), bv.cols());
                    matmul_at_acc(g, av, &mut db);
                    pending.push((*b, db));
                }
            }
            Op::Add(a, b) => {
                pending.push((*a, g.clone()));
                pending.push((*b, g.clone()));
            }
            Op::AddRow(a, b) => {
                pending.push((*a, g.clone()));
                if ng!(*b) {
                    let mut db = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &x) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    pending.push((*b, db));
                }
            }
            Op::Sub(a, b) => {
                pending.push((*a, g.clone()));
                let mut nb = g.clone();
                nb.scale_assign(-1.0);
                pending.push((*b, nb));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val!(*a), val!(*b));
                if ng!(*a) {
                    pending.push((*a, elementwise(g, bv, |x, y| x * y)));
                }
                if ng!(*b) {
                    pending.push((*b, elementwise(g, av, |x, y| x * y)));
                }
            }
            Op::Scale(a, k) => {
                let mut da = g.clone();
                da.scale_assign(*k);
                pending.push((*a, da));
            }
            Op::Relu(a) => {
                pending.push((*a, elementwise(g, val!(*a), |gx, x| if x > 0.0 { gx } else { 0.0 })));
            }
            Op::Sigmoid(a) => {
                pending.push((*a, elementwise(g, &node.value, |gx, y| gx * y * (1.0 - y))));
            }
            Op::Abs(a) => {
                pending.push((*a, elementwise(g, val!(*a), |gx, x| {
                    if x > 0.0 {
                        gx
                    } else if x < 0.0 {
                        -gx
                    } else {
                        0.0
                    }
                })));
            }
            Op::LogEps(a, eps) => {
                let eps = *eps;
                pending.push((*a, elementwise(g, val!(*a), |gx, x| gx / (x + eps))));
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut da = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let s = dot(g.row(r), y.row(r));
                    for ((o, &gy), &yy) in da.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = yy * (gy - s);
                    }
                }
                pending.push((*a, da));
            }
            Op::Sum(a) => {
                let av = val!(*a);
                pending.push((*a, Tensor::filled(av.rows(), av.cols(), g.item())));
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let pc = val!(p).cols();
                    if ng!(p) {
                        let mut dp = Tensor::zeros(g.rows(), pc);
                        for r in 0..g.rows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[c0..c0 + pc]);
                        }
                        pending.push((p, dp));
                    }
                    c0 += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for &p in parts {
                    let (pr, pc) = val!(p).shape();
                    if ng!(p) {
                        let data = g.data()[r0 * pc..(r0 + pr) * pc].to_vec();
                        pending.push((p, Tensor::from_vec(pr, pc, data)));
                    }
                    r0 += pr;
                }
            }
            Op::SliceCols(a, start) => {
                let av = val!(*a);
                let mut da = Tensor::zeros(av.rows(), av.cols());
                for r in 0..g.rows() {
                    da.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                pending.push((*a, da));
            }
            Op::SelectRows(a, idx) | Op::Embedding(a, idx) => {
                let av = val!(*a);
                let mut da = Tensor::zeros(av.rows(), av.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, &x) in da.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                pending.push((*a, da));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = val!(*gain);
                let c = xhat.cols();
                let mut dgain = Tensor::zeros(1, c);
                let mut dbias = Tensor::zeros(1, c);
                let mut dx = Tensor::zeros(xhat.rows(), c);
                let mut dxhat = vec![0.0; c];
                for r in 0..xhat.rows() {
                    let (gr, hr) = (g.row(r), xhat.row(r));
                    for j in 0..c {
                        dgain.data_mut()[j] += gr[j] * hr[j];
                        dbias.data_mut()[j] += gr[j];
                        dxhat[j] = gr[j] * gv.data()[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / c as f64;
                    let m2 = dot(&dxhat, hr) / c as f64;
                    for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = inv_std[r] * (dxhat[j] - m1 - hr[j] * m2);
                    }
                }
                pending.push((*x, dx));
                pending.push((*gain, dgain));
                pending.push((*bias, dbias));
            }
            Op::Dropout(a, mask) => {
                let data = g.data().iter().zip(mask).map(|(x, m)| x * m).collect();
                pending.push((*a, Tensor::from_vec(g.rows(), g.cols(), data)));
            }
            Op::Attention(c) => {
                let (qv, kv, vv) = (val!(c.q), val!(c.k), val!(c.v));
                let d = qv.cols();
                let dh = d / c.heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Tensor::zeros(qv.rows(), d);
                let mut dk = Tensor::zeros(kv.rows(), d);
                let mut dv = Tensor::zeros(vv.rows(), d);
                let mut dp = Vec::new();
                for i in 0..qv.rows() {
                    for h in 0..c.heads {
                        let cols = h * dh..(h + 1) * dh;
                        let off = c.offsets[i * c.heads + h];
                        let n = c.offsets[i * c.heads + h + 1] - off;
                        if n == 0 {
                            continue;
                        }
                        let p = &c.probs[off..off + n];
                        let gi = &g.row(i)[cols.clone()];
                        dp.clear();
                        for (slot, j) in c.spans.spans(i).iter().flat_map(|r| r.clone()).enumerate() {
                            let m = c.keep.as_ref().map_or(1.0, |k| k[off + slot]);
                            let w = p[slot] * m;
                            if w != 0.0 {
                                for (o, &x) in dv.row_mut(j)[cols.clone()].iter_mut().zip(gi) {
                                    *o += w * x;
                                }
                            }
                            dp.push(if m == 0.0 {
                                0.0
                            } else {
                                dot(gi, &vv.row(j)[cols.clone()]) * m
                            });
                        }
                        let s = dot(p, &dp);
                        let qi = &qv.row(i)[cols.clone()];
                        for (slot, j) in c.spans.spans(i).iter().flat_map(|r| r.clone()).enumerate() {
                            let ds = p[slot] * (dp[slot] - s) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let kj = &kv.row(j)[cols.clone()];
                            for (o, &x) in dq.row_mut(i)[cols.clone()].iter_mut().zip(kj) {
                                *o += ds * x;
                            }
                            for (o, &x) in dk.row_mut(j)[cols.clone()].iter_mut().zip(qi) {
                                *o += ds * x;
                            }
                        }
                    }
                }
                pending.push((c.q, dq));
                pending.push((c.k, dk));
                pending.push((c.v, dv));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let gs = g.item();
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let row = d.row_mut(r);
                    row[t] -= 1.0;
                    for x in row.iter_mut() {
                        *x *= gs;
                    }
                }
                pending.push((*logits, d));
            }
            Op::ProbMass {
                logits,
                row_sets,
                sets,
                probs,
            } => {
                let gs = g.item();
                let mut d = probs.clone();
                for (r, &s) in row_sets.iter().enumerate() {
                    let set = &sets[s];
                    let row = d.row_mut(r);
                    let m: f64 = row.iter().zip(set).filter(|(_, &f)| f).map(|(p, _)| p).sum();
                    for (x, &f) in row.iter_mut().zip(set) {
                        let ind = if f { 1.0 } else { 0.0 };
                        *x = gs * *x * (ind - m);
                    }
                }
                pending.push((*logits, d));
            }
        }
        for (v, t) in pending {
            self.accumulate(v, t);
        }
    }

    /// Gradients of every bound trainable parameter after `backward`.
    /// Parameters the loss does not reach get zero tensors.
    pub fn param_grads(&self) -> Gradients {
        let mut out = ParamStore::new();
        for (name, v) in &self.param_order {
            if !self.nodes[v.0].needs_grad {
                continue;
            }
            let t = match self.grad(*v) {
                Some(g) => g.clone(),
                None => {
                    let (r, c) = self.value(*v).shape();
                    Tensor::zeros(r, c)
                }
            };
            out.insert(name.clone(), t);
        }
        out
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data)
}
