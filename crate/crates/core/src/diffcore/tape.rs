//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node holding its forward value and enough
//! cached state to run its backward rule. Nodes only ever reference earlier
//! nodes, so a single reverse sweep visits them in a valid order.

use std::collections::BTreeMap;

use super::params::{GradMap, ParamSet};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, b_t: bool },
    AddBias { x: Var, bias: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy { x: Var, s: Var },
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gather { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    L2Normalize { x: Var, norms: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// A single forward pass recorded for differentiation.
///
/// Parameters and named inputs are bound lazily and memoized, so each one
/// appears on the tape at most once no matter how often a graph reads it.
pub struct Tape<'a> {
    params: &'a ParamSet,
    inputs: Option<&'a BTreeMap<String, Tensor>>,
    nodes: Vec<Node>,
    param_vars: BTreeMap<String, Var>,
    input_vars: BTreeMap<String, Var>,
}

/// Result of a backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    /// One entry per parameter of the bound [`ParamSet`]; exact zeros off the loss path.
    pub params: GradMap,
    /// Gradients for named inputs that the graph read.
    pub inputs: BTreeMap<String, Tensor>,
    leaves: BTreeMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient of a leaf (constant, input or parameter) node.
    pub fn leaf(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }
}

fn softmax_row(src: &[f64], mask: Option<&[bool]>, out: &mut [f64]) {
    let keep = |j: usize| mask.is_none_or(|m| !m[j]);
    let max = src
        .iter()
        .enumerate()
        .filter(|(j, _)| keep(*j))
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let mut total = 0.0;
    for (j, (o, v)) in out.iter_mut().zip(src).enumerate() {
        *o = if keep(j) { (v - max).exp() } else { 0.0 };
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

impl<'a> Tape<'a> {
    pub fn new(params: &'a ParamSet) -> Self {
        Self {
            params,
            inputs: None,
            nodes: Vec::new(),
            param_vars: BTreeMap::new(),
            input_vars: BTreeMap::new(),
        }
    }

    pub fn with_inputs(params: &'a ParamSet, inputs: &'a BTreeMap<String, Tensor>) -> Self {
        let mut tape = Self::new(params);
        tape.inputs = Some(inputs);
        tape
    }

    pub fn params(&self) -> &'a ParamSet {
        self.params
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn shape_of(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(name) {
            return Ok(v);
        }
        let value = self
            .params
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?
            .clone();
        let v = self.push(value, Op::Leaf);
        self.param_vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn input(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.input_vars.get(name) {
            return Ok(v);
        }
        let value = self
            .inputs
            .and_then(|m| m.get(name))
            .ok_or_else(|| Error::Validation(format!("unbound input `{name}`")))?
            .clone();
        let v = self.push(value, Op::Leaf);
        self.input_vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// `a @ b`, or `a @ b^T` when `b_t`.
    pub fn matmul_opt(&mut self, a: Var, b: Var, b_t: bool) -> Result<Var> {
        let (m, k) = self.shape_of(a);
        let (br, bc) = self.shape_of(b);
        let (bk, n) = if b_t { (bc, br) } else { (br, bc) };
        if k != bk {
            return Err(Error::shape(
                "matmul",
                format!(
                    "{:?} x {:?}{}",
                    self.value(a).shape(),
                    self.value(b).shape(),
                    if b_t { "^T" } else { "" }
                ),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), b_t, 0.0, &mut out);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul { a, b, b_t }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_opt(a, b, false)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_opt(a, b, true)
    }

    /// Adds a bias row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.shape_of(x);
        if self.value(bias).len() != c {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", self.value(x).shape(), self.value(bias).shape()),
            ));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            row.iter_mut().zip(b).for_each(|(o, bb)| *o += bb);
        }
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::AddBias { x, bias }))
    }

    /// `x @ w + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        Ok(ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Sub(a, b)))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect())
            .expect("same shape");
        self.push(out, Op::Scale(x, c))
    }

    /// Multiplies `x` by the scalar node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::shape("scale_by", format!("{:?} is not scalar", self.value(s).shape())));
        }
        let c = self.value(s).item();
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect())?;
        Ok(self.push(out, Op::ScaleBy { x, s }))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| f(*v)).collect())
            .expect("same shape");
        self.push(out, op)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    /// Row-wise softmax. `mask[i * cols + j] == true` excludes entry `(i, j)`
    /// (probability exactly zero). A fully masked row yields zeros.
    pub fn softmax_masked(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (r, c) = self.shape_of(x);
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(Error::shape("softmax", format!("mask len {} for {r}x{c}", m.len())));
            }
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            softmax_row(
                &src[i * c..(i + 1) * c],
                mask.map(|m| &m[i * c..(i + 1) * c]),
                &mut out[i * c..(i + 1) * c],
            );
        }
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::Softmax(x)))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_masked(x, None)
    }

    /// Row-wise layer normalization with learned gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.shape_of(x);
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "input {:?}, gamma {:?}, beta {:?}",
                    self.value(x).shape(),
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            ));
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[i] = s;
            for j in 0..c {
                let h = (row[j] - mean) * s;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(
            Tensor::matrix(r, c, out)?,
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
        ))
    }

    /// Embedding lookup: the rows of `table` selected by `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.shape_of(table);
        if ids.is_empty() {
            return Err(Error::shape("gather_rows", "no ids"));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", format!("id {bad} out of range for {r} rows")));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        Ok(self.push(
            Tensor::matrix(ids.len(), c, out)?,
            Op::Gather { table, ids: ids.to_vec() },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.shape_of(*parts.first().ok_or_else(|| Error::shape("concat_rows", "no parts"))?).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.shape_of(p);
            if pc != c {
                return Err(Error::shape("concat_rows", format!("column counts {c} vs {pc}")));
            }
            out.extend_from_slice(self.value(p).data());
            rows += pr;
        }
        Ok(self.push(Tensor::matrix(rows, c, out)?, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.shape_of(*parts.first().ok_or_else(|| Error::shape("concat_cols", "no parts"))?).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.shape_of(p);
            if pr != r {
                return Err(Error::shape("concat_cols", format!("row counts {r} vs {pr}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; r * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..r {
                out[i * total + offset..i * total + offset + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        Ok(self.push(Tensor::matrix(r, total, out)?, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape_of(x);
        if len == 0 || start + len > r {
            return Err(Error::shape("slice_rows", format!("rows {start}..{} of {r}", start + len)));
        }
        let out = self.value(x).data()[start * c..(start + len) * c].to_vec();
        Ok(self.push(Tensor::matrix(len, c, out)?, Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape_of(x);
        if len == 0 || start + len > c {
            return Err(Error::shape("slice_cols", format!("cols {start}..{} of {c}", start + len)));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        Ok(self.push(Tensor::matrix(r, len, out)?, Op::SliceCols { x, start }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`. Masked entries are excluded from each row's normalizer.
    pub fn cross_entropy_masked(&mut self, logits: Var, targets: &[usize], mask: Option<&[bool]>) -> Result<Var> {
        let (r, c) = self.shape_of(logits);
        if targets.len() != r {
            return Err(Error::shape("cross_entropy", format!("{} targets for {r} rows", targets.len())));
        }
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(Error::shape("cross_entropy", format!("mask len {} for {r}x{c}", m.len())));
            }
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; r * c];
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= c || mask.is_some_and(|m| m[i * c + t]) {
                return Err(Error::shape("cross_entropy", format!("target {t} invalid in row {i}")));
            }
            let row = &src[i * c..(i + 1) * c];
            let rmask = mask.map(|m| &m[i * c..(i + 1) * c]);
            softmax_row(row, rmask, &mut probs[i * c..(i + 1) * c]);
            // log-sum-exp over kept entries, for an accurate log p
            let keep = |j: usize| rmask.is_none_or(|m| !m[j]);
            let max = (0..c).filter(|&j| keep(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + (0..c).filter(|&j| keep(j)).map(|j| (row[j] - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
        ))
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.cross_entropy_masked(logits, targets, None)
    }

    /// Scales each row to unit L2 norm; rows with norm below `eps` are divided by `eps`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let (r, c) = self.shape_of(x);
        let src = self.value(x).data();
        let mut norms = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            norms[i] = n;
            for j in 0..c {
                out[i * c + j] = row[j] / n;
            }
        }
        self.push(
            Tensor::matrix(r, c, out).expect("same shape"),
            Op::L2Normalize { x, norms },
        )
    }

    /// Scaled dot-product attention, `softmax(q k^T / sqrt(d)) v`.
    ///
    /// Returns the output and the attention probability node.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
        let d = self.shape_of(q).1;
        let scores = self.matmul_t(q, k)?;
        let scaled = self.scale(scores, 1.0 / (d as f64).sqrt());
        let probs = self.softmax(scaled)?;
        let out = self.matmul(probs, v)?;
        Ok((out, probs))
    }

    /// Runs the reverse sweep from scalar node `loss`, seeding it with `upstream`.
    pub fn backward_scaled(&self, loss: Var, upstream: f64) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(format!("node {}", loss.0), lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![upstream]);
        let mut leaves = BTreeMap::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
                let len = self.nodes[v.0].value.len();
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
                f(slot);
            };
            match &node.op {
                Op::Leaf => {
                    leaves.insert(i, Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Op::MatMul { a, b, b_t } => {
                    let (m, k) = self.shape_of(*a);
                    let n = node.value.cols();
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    // dA = dC op(B)^T
                    acc(*a, &|s| gemm(m, n, k, &g, false, bv, !b_t, 1.0, s));
                    if *b_t {
                        // B is n x k: dB = dC^T A
                        acc(*b, &|s| gemm(n, m, k, &g, true, av, false, 1.0, s));
                    } else {
                        // B is k x n: dB = A^T dC
                        acc(*b, &|s| gemm(k, m, n, av, true, &g, false, 1.0, s));
                    }
                }
                Op::AddBias { x, bias } => {
                    let c = node.value.cols();
                    acc(*x, &|s| s.iter_mut().zip(&g).for_each(|(a, b)| *a += b));
                    acc(*bias, &|s| {
                        for row in g.chunks(c) {
                            s.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                        }
                    });
                }
                Op::Add(a, b) => {
                    acc(*a, &|s| s.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                    acc(*b, &|s| s.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                }
                Op::Sub(a, b) => {
                    acc(*a, &|s| s.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                    acc(*b, &|s| s.iter_mut().zip(&g).for_each(|(x, y)| *x -= y));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    acc(*a, &|s| {
                        for j in 0..s.len() {
                            s[j] += g[j] * bv[j];
                        }
                    });
                    acc(*b, &|s| {
                        for j in 0..s.len() {
                            s[j] += g[j] * av[j];
                        }
                    });
                }
                Op::Scale(x, c) => {
                    acc(*x, &|s| s.iter_mut().zip(&g).for_each(|(a, b)| *a += c * b));
                }
                Op::ScaleBy { x, s: sv } => {
                    let c = self.value(*sv).item();
                    let xv = self.value(*x).data();
                    acc(*x, &|s| s.iter_mut().zip(&g).for_each(|(a, b)| *a += c * b));
                    let ds: f64 = xv.iter().zip(&g).map(|(a, b)| a * b).sum();
                    acc(*sv, &|s| s[0] += ds);
                }
                Op::Sigmoid(x) => {
                    let y = node.value.data();
                    acc(*x, &|s| {
                        for j in 0..s.len() {
                            s[j] += g[j] * y[j] * (1.0 - y[j]);
                        }
                    });
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    acc(*x, &|s| {
                        for j in 0..s.len() {
                            if xv[j] > 0.0 {
                                s[j] += g[j];
                            }
                        }
                    });
                }
                Op::Exp(x) => {
                    let y = node.value.data();
                    acc(*x, &|s| {
                        for j in 0..s.len() {
                            s[j] += g[j] * y[j];
                        }
                    });
                }
                Op::Softmax(x) => {
                    let c = node.value.cols();
                    let y = node.value.data();
                    acc(*x, &|s| {
                        for (i, row) in s.chunks_mut(c).enumerate() {
                            let yr = &y[i * c..(i + 1) * c];
                            let gr = &g[i * c..(i + 1) * c];
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..c {
                                row[j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    });
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let c = node.value.cols();
                    let gv = self.value(*gamma).data();
                    acc(*x, &|s| {
                        for (i, row) in s.chunks_mut(c).enumerate() {
                            let xh = &xhat[i * c..(i + 1) * c];
                            let gr = &g[i * c..(i + 1) * c];
                            let dxhat: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                            let m1 = dxhat.iter().sum::<f64>() / c as f64;
                            let m2 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                            for j in 0..c {
                                row[j] += rstd[i] * (dxhat[j] - m1 - xh[j] * m2);
                            }
                        }
                    });
                    acc(*gamma, &|s| {
                        for (gr, xh) in g.chunks(c).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                s[j] += gr[j] * xh[j];
                            }
                        }
                    });
                    acc(*beta, &|s| {
                        for gr in g.chunks(c) {
                            s.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                        }
                    });
                }
                Op::Gather { table, ids } => {
                    let c = node.value.cols();
                    acc(*table, &|s| {
                        for (r, &id) in ids.iter().enumerate() {
                            for j in 0..c {
                                s[id * c + j] += g[r * c + j];
                            }
                        }
                    });
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        let chunk = &g[offset..offset + len];
                        acc(p, &|s| s.iter_mut().zip(chunk).for_each(|(a, b)| *a += b));
                        offset += len;
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        acc(p, &|s| {
                            for (i, row) in s.chunks_mut(w).enumerate() {
                                let src = &g[i * total + offset..i * total + offset + w];
                                row.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                            }
                        });
                        offset += w;
                    }
                }
                Op::SliceRows { x, start } => {
                    let c = node.value.cols();
                    acc(*x, &|s| {
                        s[start * c..start * c + g.len()]
                            .iter_mut()
                            .zip(&g)
                            .for_each(|(a, b)| *a += b)
                    });
                }
                Op::SliceCols { x, start } => {
                    let w = node.value.cols();
                    let c = self.value(*x).cols();
                    acc(*x, &|s| {
                        for (i, gr) in g.chunks(w).enumerate() {
                            s[i * c + start..i * c + start + w]
                                .iter_mut()
                                .zip(gr)
                                .for_each(|(a, b)| *a += b);
                        }
                    });
                }
                Op::Sum(x) => {
                    acc(*x, &|s| s.iter_mut().for_each(|a| *a += g[0]));
                }
                Op::Mean(x) => {
                    let n = self.value(*x).len() as f64;
                    acc(*x, &|s| s.iter_mut().for_each(|a| *a += g[0] / n));
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let c = self.value(*logits).cols();
                    acc(*logits, &|s| {
                        for (i, &t) in targets.iter().enumerate() {
                            for j in 0..c {
                                let onehot = if j == t { 1.0 } else { 0.0 };
                                s[i * c + j] += g[0] * (probs[i * c + j] - onehot);
                            }
                        }
                    });
                }
                Op::L2Normalize { x, norms } => {
                    let c = node.value.cols();
                    let y = node.value.data();
                    let xv = self.value(*x).data();
                    acc(*x, &|s| {
                        for (i, row) in s.chunks_mut(c).enumerate() {
                            let yr = &y[i * c..(i + 1) * c];
                            let gr = &g[i * c..(i + 1) * c];
                            let raw_norm = xv[i * c..(i + 1) * c].iter().map(|v| v * v).sum::<f64>().sqrt();
                            if raw_norm < norms[i] {
                                // clamped branch: y = x / eps
                                row.iter_mut().zip(gr).for_each(|(a, b)| *a += b / norms[i]);
                            } else {
                                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                                for j in 0..c {
                                    row[j] += (gr[j] - yr[j] * dot) / norms[i];
                                }
                            }
                        }
                    });
                }
            }
        }

        let mut params = BTreeMap::new();
        for (name, t) in self.params.iter() {
            let grad = self
                .param_vars
                .get(name)
                .and_then(|v| leaves.get(&v.0).cloned())
                .unwrap_or_else(|| Tensor::zeros(t.shape()));
            params.insert(name.clone(), grad);
        }
        let inputs = self
            .input_vars
            .iter()
            .map(|(name, v)| {
                let grad = leaves
                    .get(&v.0)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.value(*v).shape()));
                (name.clone(), grad)
            })
            .collect();
        Ok(Gradients { params, inputs, leaves })
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.backward_scaled(loss, 1.0)
    }
}
