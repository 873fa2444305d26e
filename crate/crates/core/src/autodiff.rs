//! Tape-based reverse-mode automatic differentiation over a fixed op set.
//!
//! Every forward op computes its output eagerly. When gradient mode is on the
//! op is also appended to the tape together with whatever it needs for its
//! backward rule; [`Tape::backward`] then walks the records in reverse and
//! accumulates gradients into every leaf created with `requires_grad`.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatView, Real, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value stored on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// Reduction extent for `sum_reduce` / `max_reduce`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    /// Whole tensor to a scalar.
    All,
    /// `[n, d] -> [n]`.
    Rows,
    /// `[n, d] -> [d]`.
    Cols,
}

/// Multi-head scaled dot-product attention over `batch` sequences of `seq` tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionSpec {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub causal: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Matmul,
    Add,
    Mul,
    AddBias,
    Relu,
    Gelu,
    Abs,
    MaxReduce(Reduce),
    SumReduce(Reduce),
    Square,
    Div,
    LayerNorm {
        eps: f64,
    },
    Softmax,
    EmbeddingLookup {
        ids: Vec<usize>,
    },
    CrossEntropy {
        targets: Vec<usize>,
    },
    Mse,
    L2NormRows,
    Attention(AttentionSpec),
    /// Mean binary cross-entropy of `sigmoid(logits)` against soft labels in `[0, 1]`.
    /// Second input holds the labels and never receives a gradient.
    BceWithLogits,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Matmul => "matmul",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::AddBias => "add_bias",
            Op::Relu => "relu",
            Op::Gelu => "gelu",
            Op::Abs => "abs",
            Op::MaxReduce(_) => "max_reduce",
            Op::SumReduce(_) => "sum_reduce",
            Op::Square => "square",
            Op::Div => "div",
            Op::LayerNorm { .. } => "layernorm",
            Op::Softmax => "softmax",
            Op::EmbeddingLookup { .. } => "embedding_lookup",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Mse => "mse",
            Op::L2NormRows => "l2_norm_rows",
            Op::Attention(_) => "attention",
            Op::BceWithLogits => "bce_with_logits",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Op::Matmul
            | Op::Add
            | Op::Mul
            | Op::AddBias
            | Op::Div
            | Op::Mse
            | Op::BceWithLogits => 2,
            Op::LayerNorm { .. } | Op::Attention(_) => 3,
            _ => 1,
        }
    }
}

struct Record<T> {
    op: Op,
    inputs: Vec<usize>,
    output: usize,
    saved: Vec<T>,
    saved_idx: Vec<usize>,
}

/// Gradients for the leaves of a tape that were created with `requires_grad`.
#[derive(Debug, Clone)]
pub struct Gradients<T: Real> {
    tape: u64,
    grads: HashMap<usize, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(&v.index)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.remove(&v.index)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

pub struct Tape<T: Real = f32> {
    id: u64,
    values: Vec<Tensor<T>>,
    requires_grad: Vec<bool>,
    is_leaf: Vec<bool>,
    records: Vec<Record<T>>,
    grad_enabled: bool,
    check_finite: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    /// A tape with gradient recording on.
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            values: Vec::new(),
            requires_grad: Vec::new(),
            is_leaf: Vec::new(),
            records: Vec::new(),
            grad_enabled: true,
            check_finite: false,
        }
    }

    /// A tape that evaluates ops without recording them.
    pub fn no_grad() -> Self {
        let mut t = Self::new();
        t.grad_enabled = false;
        t
    }

    pub fn set_grad_enabled(&mut self, on: bool) {
        self.grad_enabled = on;
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Fail any op whose output contains NaN/Inf.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn num_records(&self) -> usize {
        self.records.len()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, true)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, true)
    }

    fn push(&mut self, value: Tensor<T>, rg: bool, leaf: bool) -> Var {
        self.values.push(value);
        self.requires_grad.push(rg);
        self.is_leaf.push(leaf);
        Var {
            tape: self.id,
            index: self.values.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(Error::contract("variable belongs to a different tape"));
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        &self.values[v.index]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        v.tape == self.id && self.requires_grad[v.index]
    }

    /// Evaluates `op` on `inputs`, recording it when gradient mode is on.
    pub fn forward_op(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != op.arity() {
            return Err(Error::dim(
                op.name(),
                format!("expects {} inputs, got {}", op.arity(), inputs.len()),
            ));
        }
        let idx: Vec<usize> = inputs
            .iter()
            .map(|&v| self.check(v))
            .collect::<Result<_>>()?;
        let ins: Vec<&Tensor<T>> = idx.iter().map(|&i| &self.values[i]).collect();
        let (out, saved, saved_idx) = kernels::forward(&op, &ins)?;
        if self.check_finite && !out.is_finite() {
            return Err(Error::numeric(
                format!("non-finite output of {}", op.name()),
                None,
            ));
        }
        let rg = self.grad_enabled && idx.iter().any(|&i| self.requires_grad[i]);
        let var = self.push(out, rg, false);
        if self.grad_enabled {
            self.records.push(Record {
                op,
                inputs: idx,
                output: var.index,
                saved,
                saved_idx,
            });
        }
        Ok(var)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if loss.tape != self.id {
            return Err(Error::contract("loss was not produced on this tape"));
        }
        if !self.values[loss.index].is_scalar() {
            return Err(Error::contract(format!(
                "loss must be a scalar, got shape {:?}",
                self.values[loss.index].shape()
            )));
        }
        let produced =
            self.is_leaf[loss.index] || self.records.iter().any(|r| r.output == loss.index);
        if !produced {
            return Err(Error::contract(
                "loss is not recorded on this tape (gradient mode was off)",
            ));
        }
        let n = self.values.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[loss.index] = Some(vec![T::one()]);
        for rec in self.records.iter().rev() {
            if rec.output > loss.index {
                continue;
            }
            let Some(gout) = grads[rec.output].take() else {
                continue;
            };
            let needs: Vec<bool> = rec.inputs.iter().map(|&i| self.requires_grad[i]).collect();
            if !needs.iter().any(|&b| b) {
                continue;
            }
            let ins: Vec<&Tensor<T>> = rec.inputs.iter().map(|&i| &self.values[i]).collect();
            let out = &self.values[rec.output];
            let gin = kernels::backward(
                &rec.op,
                &ins,
                out,
                &rec.saved,
                &rec.saved_idx,
                &gout,
                &needs,
            );
            for ((&i, g), need) in rec.inputs.iter().zip(gin).zip(needs) {
                if !need {
                    continue;
                }
                let Some(g) = g else { continue };
                match &mut grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        let mut out = HashMap::new();
        for i in 0..n {
            if self.is_leaf[i] && self.requires_grad[i] {
                let shape = self.values[i].shape().to_vec();
                let g = match grads[i].take() {
                    Some(g) => Tensor::new(shape, g).expect("gradient shape"),
                    None => Tensor::zeros(&shape),
                };
                out.insert(i, g);
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads: out,
        })
    }

    // -- convenience wrappers ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(Op::Matmul, &[a, b])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(Op::Add, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(Op::Mul, &[a, b])
    }
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        self.forward_op(Op::AddBias, &[x, b])
    }
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.forward_op(Op::Relu, &[x])
    }
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.forward_op(Op::Gelu, &[x])
    }
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.forward_op(Op::Abs, &[x])
    }
    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.forward_op(Op::Square, &[x])
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(Op::Div, &[a, b])
    }
    pub fn sum(&mut self, x: Var, r: Reduce) -> Result<Var> {
        self.forward_op(Op::SumReduce(r), &[x])
    }
    pub fn max(&mut self, x: Var, r: Reduce) -> Result<Var> {
        self.forward_op(Op::MaxReduce(r), &[x])
    }
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.forward_op(Op::LayerNorm { eps }, &[x, gamma, beta])
    }
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.forward_op(Op::Softmax, &[x])
    }
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.forward_op(Op::EmbeddingLookup { ids: ids.to_vec() }, &[table])
    }
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.forward_op(
            Op::CrossEntropy {
                targets: targets.to_vec(),
            },
            &[logits],
        )
    }
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(Op::Mse, &[a, b])
    }
    pub fn l2_norm_rows(&mut self, x: Var) -> Result<Var> {
        self.forward_op(Op::L2NormRows, &[x])
    }
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        self.forward_op(Op::Attention(spec), &[q, k, v])
    }
    pub fn bce_with_logits(&mut self, logits: Var, labels: Var) -> Result<Var> {
        self.forward_op(Op::BceWithLogits, &[logits, labels])
    }

    /// `x * c` for a constant scalar `c` (scalar `x` only).
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let k = self.constant(Tensor::full(self.value(x).shape(), T::lit(c)));
        self.mul(x, k)
    }

    /// `x·w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }
}

pub(crate) mod kernels {
    use super::*;

    type Fwd<T> = (Tensor<T>, Vec<T>, Vec<usize>);

    fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        Ok(())
    }

    fn dims2<T: Real>(op: &'static str, a: &Tensor<T>) -> Result<(usize, usize)> {
        a.dims2()
            .ok_or_else(|| Error::dim(op, format!("rank-2 input required, got {:?}", a.shape())))
    }

    fn elementwise<T: Real>(a: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
        a.map(f)
    }

    fn zip<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(a.shape().to_vec(), data).expect("same shape")
    }

    /// Subnormals become zero. Sparsified GELU models park many
    /// pre-activations deep in the tail, where subnormal arithmetic would
    /// otherwise dominate runtime.
    fn flush<T: Real>(v: T) -> T {
        if v.abs() < T::min_positive_value() {
            T::zero()
        } else {
            v
        }
    }

    pub(crate) fn gelu<T: Real>(x: T) -> T {
        let half = T::lit(0.5);
        flush(half * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf()))
    }

    fn gelu_grad<T: Real>(x: T) -> T {
        let cdf = T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
        let pdf = (-(x * x) * T::lit(0.5)).exp() * T::lit(0.398_942_280_401_432_7);
        flush(cdf + x * pdf)
    }

    fn softmax_row<T: Real>(row: &[T], out: &mut [T]) {
        let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut s = T::zero();
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (v - m).exp();
            s = s + *o;
        }
        for o in out.iter_mut() {
            *o = *o / s;
        }
    }

    pub fn forward<T: Real>(op: &Op, ins: &[&Tensor<T>]) -> Result<Fwd<T>> {
        let name = op.name();
        let none = |t: Tensor<T>| Ok((t, Vec::new(), Vec::new()));
        match op {
            Op::Matmul => {
                let (m, k) = dims2(name, ins[0])?;
                let (k2, n) = dims2(name, ins[1])?;
                if k != k2 {
                    return Err(Error::dim(name, format!("[{m},{k}] x [{k2},{n}]")));
                }
                none(ins[0].matmul(ins[1])?)
            }
            Op::Add => {
                same_shape(name, ins[0], ins[1])?;
                none(zip(ins[0], ins[1], |a, b| a + b))
            }
            Op::Mul => {
                same_shape(name, ins[0], ins[1])?;
                none(zip(ins[0], ins[1], |a, b| a * b))
            }
            Op::Div => {
                same_shape(name, ins[0], ins[1])?;
                none(zip(ins[0], ins[1], |a, b| a / b))
            }
            Op::AddBias => {
                let (n, d) = dims2(name, ins[0])?;
                if ins[1].shape() != [d] {
                    return Err(Error::dim(
                        name,
                        format!("[{n},{d}] + bias {:?}", ins[1].shape()),
                    ));
                }
                let mut out = ins[0].clone();
                let b = ins[1].data();
                for r in 0..n {
                    out.row_mut(r)
                        .iter_mut()
                        .zip(b)
                        .for_each(|(o, &bv)| *o = *o + bv);
                }
                none(out)
            }
            Op::Relu => none(elementwise(ins[0], |x| {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            })),
            Op::Gelu => none(elementwise(ins[0], gelu)),
            Op::Abs => none(elementwise(ins[0], |x| x.abs())),
            Op::Square => none(elementwise(ins[0], |x| x * x)),
            Op::SumReduce(r) | Op::MaxReduce(r) => {
                let is_max = matches!(op, Op::MaxReduce(_));
                let x = ins[0];
                let (rows, cols, out_len, key): (usize, usize, usize, fn(usize, usize) -> usize) =
                    match r {
                        Reduce::All => (1, x.numel(), 1, |_, _| 0),
                        Reduce::Rows => {
                            let (n, d) = dims2(name, x)?;
                            (n, d, n, |i, _| i)
                        }
                        Reduce::Cols => {
                            let (n, d) = dims2(name, x)?;
                            (n, d, d, |_, j| j)
                        }
                    };
                let init = if is_max { T::neg_infinity() } else { T::zero() };
                let mut out = vec![init; out_len];
                let mut arg = vec![0usize; if is_max { out_len } else { 0 }];
                let data = x.data();
                for i in 0..rows {
                    for j in 0..cols {
                        let v = data[i * cols + j];
                        let o = key(i, j);
                        if is_max {
                            if v > out[o] {
                                out[o] = v;
                                arg[o] = i * cols + j;
                            }
                        } else {
                            out[o] = out[o] + v;
                        }
                    }
                }
                let t = if *r == Reduce::All {
                    Tensor::scalar(out[0])
                } else {
                    Tensor::from_vec(out)
                };
                Ok((t, Vec::new(), arg))
            }
            Op::LayerNorm { eps } => {
                let (n, d) = dims2(name, ins[0])?;
                if ins[1].shape() != [d] || ins[2].shape() != [d] {
                    return Err(Error::dim(
                        name,
                        format!(
                            "x [{n},{d}], gamma {:?}, beta {:?}",
                            ins[1].shape(),
                            ins[2].shape()
                        ),
                    ));
                }
                let eps = T::lit(*eps);
                let df = T::from_usize(d).unwrap();
                let (g, b) = (ins[1].data(), ins[2].data());
                let mut out = Tensor::zeros(&[n, d]);
                // saved: xhat (n*d) then rstd (n)
                let mut saved = vec![T::zero(); n * d + n];
                for r in 0..n {
                    let row = ins[0].row(r);
                    let mean = row.iter().fold(T::zero(), |s, &v| s + v) / df;
                    let var = row
                        .iter()
                        .fold(T::zero(), |s, &v| s + (v - mean) * (v - mean))
                        / df;
                    let rstd = T::one() / (var + eps).sqrt();
                    saved[n * d + r] = rstd;
                    let o = out.row_mut(r);
                    for j in 0..d {
                        let xh = (row[j] - mean) * rstd;
                        saved[r * d + j] = xh;
                        o[j] = xh * g[j] + b[j];
                    }
                }
                Ok((out, saved, Vec::new()))
            }
            Op::Softmax => {
                let (n, _) = dims2(name, ins[0])?;
                let mut out = ins[0].clone();
                for r in 0..n {
                    let row = ins[0].row(r).to_vec();
                    softmax_row(&row, out.row_mut(r));
                }
                none(out)
            }
            Op::EmbeddingLookup { ids } => {
                let (v, d) = dims2(name, ins[0])?;
                if ids.is_empty() {
                    return Err(Error::dim(name, "empty id list"));
                }
                if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
                    return Err(Error::dim(
                        name,
                        format!("id {bad} out of range for table of {v} rows"),
                    ));
                }
                let mut out = Vec::with_capacity(ids.len() * d);
                for &i in ids {
                    out.extend_from_slice(ins[0].row(i));
                }
                none(Tensor::matrix(ids.len(), d, out)?)
            }
            Op::CrossEntropy { targets } => {
                let (n, c) = dims2(name, ins[0])?;
                if targets.len() != n {
                    return Err(Error::dim(
                        name,
                        format!("{n} rows but {} targets", targets.len()),
                    ));
                }
                if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
                    return Err(Error::dim(
                        name,
                        format!("target {bad} out of range for {c} classes"),
                    ));
                }
                let mut probs = vec![T::zero(); n * c];
                let mut loss = T::zero();
                for r in 0..n {
                    let row = ins[0].row(r);
                    let p = &mut probs[r * c..(r + 1) * c];
                    softmax_row(row, p);
                    let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                    let lse = m + row.iter().fold(T::zero(), |s, &v| s + (v - m).exp()).ln();
                    loss = loss + lse - row[targets[r]];
                }
                let nf = T::from_usize(n).unwrap();
                Ok((Tensor::scalar(loss / nf), probs, Vec::new()))
            }
            Op::Mse => {
                same_shape(name, ins[0], ins[1])?;
                let s = ins[0]
                    .data()
                    .iter()
                    .zip(ins[1].data())
                    .fold(T::zero(), |s, (&a, &b)| s + (a - b) * (a - b));
                none(Tensor::scalar(s / T::from_usize(ins[0].numel()).unwrap()))
            }
            Op::L2NormRows => {
                let (n, _) = dims2(name, ins[0])?;
                let out = (0..n)
                    .map(|r| {
                        ins[0]
                            .row(r)
                            .iter()
                            .fold(T::zero(), |s, &v| s + v * v)
                            .sqrt()
                    })
                    .collect();
                none(Tensor::from_vec(out))
            }
            Op::Attention(spec) => attention_forward(spec, ins),
            Op::BceWithLogits => {
                same_shape(name, ins[0], ins[1])?;
                let s = ins[0]
                    .data()
                    .iter()
                    .zip(ins[1].data())
                    .fold(T::zero(), |s, (&x, &y)| {
                        s + x.max(T::zero()) - x * y + (T::one() + (-x.abs()).exp()).ln()
                    });
                none(Tensor::scalar(s / T::from_usize(ins[0].numel()).unwrap()))
            }
        }
    }

    fn attention_forward<T: Real>(spec: &AttentionSpec, ins: &[&Tensor<T>]) -> Result<Fwd<T>> {
        let name = "attention";
        let (rows, d) = dims2(name, ins[0])?;
        for t in &ins[1..] {
            if t.shape() != ins[0].shape() {
                return Err(Error::dim(
                    name,
                    format!("q {:?} vs {:?}", ins[0].shape(), t.shape()),
                ));
            }
        }
        let AttentionSpec {
            batch,
            seq,
            heads,
            causal,
        } = *spec;
        if batch * seq != rows || heads == 0 || d % heads != 0 {
            return Err(Error::dim(
                name,
                format!(
                    "{rows} rows, d={d} incompatible with batch={batch} seq={seq} heads={heads}"
                ),
            ));
        }
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (q, k, v) = (ins[0].data(), ins[1].data(), ins[2].data());
        let mut out = vec![T::zero(); rows * d];
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut scores = vec![T::zero(); seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let head = MatView {
                    rows: seq,
                    cols: dh,
                    offset: b * seq * d + h * dh,
                    row_stride: d,
                    col_stride: 1,
                };
                gemm(
                    scale,
                    q,
                    head,
                    k,
                    head.t(),
                    T::zero(),
                    &mut scores,
                    MatView::dense(seq, seq),
                );
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                for i in 0..seq {
                    let lim = if causal { i + 1 } else { seq };
                    softmax_row(
                        &scores[i * seq..i * seq + lim],
                        &mut p[i * seq..i * seq + lim],
                    );
                }
                gemm(
                    T::one(),
                    p,
                    MatView::dense(seq, seq),
                    v,
                    head,
                    T::zero(),
                    &mut out,
                    head,
                );
            }
        }
        Ok((Tensor::matrix(rows, d, out)?, probs, Vec::new()))
    }

    fn attention_backward<T: Real>(
        spec: &AttentionSpec,
        ins: &[&Tensor<T>],
        probs: &[T],
        gout: &[T],
    ) -> Vec<Option<Vec<T>>> {
        let AttentionSpec {
            batch, seq, heads, ..
        } = *spec;
        let (rows, d) = ins[0].dims2().unwrap();
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (q, k, v) = (ins[0].data(), ins[1].data(), ins[2].data());
        let mut dq = vec![T::zero(); rows * d];
        let mut dk = vec![T::zero(); rows * d];
        let mut dv = vec![T::zero(); rows * d];
        let mut dp = vec![T::zero(); seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let head = MatView {
                    rows: seq,
                    cols: dh,
                    offset: b * seq * d + h * dh,
                    row_stride: d,
                    col_stride: 1,
                };
                let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                let pv = MatView::dense(seq, seq);
                // dV = Pᵀ dO
                gemm(T::one(), p, pv.t(), gout, head, T::zero(), &mut dv, head);
                // dP = dO Vᵀ
                gemm(T::one(), gout, head, v, head.t(), T::zero(), &mut dp, pv);
                // dS = P ⊙ (dP − rowsum(dP ⊙ P))
                for i in 0..seq {
                    let r = i * seq..(i + 1) * seq;
                    let dot = p[r.clone()]
                        .iter()
                        .zip(&dp[r.clone()])
                        .fold(T::zero(), |s, (&a, &b)| s + a * b);
                    for j in r {
                        dp[j] = p[j] * (dp[j] - dot);
                    }
                }
                gemm(scale, &dp, pv, k, head, T::zero(), &mut dq, head);
                gemm(scale, &dp, pv.t(), q, head, T::zero(), &mut dk, head);
            }
        }
        vec![Some(dq), Some(dk), Some(dv)]
    }

    #[allow(clippy::too_many_arguments)]
    pub fn backward<T: Real>(
        op: &Op,
        ins: &[&Tensor<T>],
        out: &Tensor<T>,
        saved: &[T],
        saved_idx: &[usize],
        g: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let zip_map = |a: &[T], f: &dyn Fn(usize, T) -> T| -> Vec<T> {
            a.iter().enumerate().map(|(i, &v)| f(i, v)).collect()
        };
        match op {
            Op::Matmul => {
                let (m, k) = ins[0].dims2().unwrap();
                let n = ins[1].cols();
                let ga = needs[0].then(|| {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(
                        T::one(),
                        g,
                        MatView::dense(m, n),
                        ins[1].data(),
                        MatView::dense(k, n).t(),
                        T::zero(),
                        &mut ga,
                        MatView::dense(m, k),
                    );
                    ga
                });
                let gb = needs[1].then(|| {
                    let mut gb = vec![T::zero(); k * n];
                    gemm(
                        T::one(),
                        ins[0].data(),
                        MatView::dense(m, k).t(),
                        g,
                        MatView::dense(m, n),
                        T::zero(),
                        &mut gb,
                        MatView::dense(k, n),
                    );
                    gb
                });
                vec![ga, gb]
            }
            Op::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
            Op::Mul => {
                let (a, b) = (ins[0].data(), ins[1].data());
                vec![
                    needs[0].then(|| zip_map(g, &|i, gv| gv * b[i])),
                    needs[1].then(|| zip_map(g, &|i, gv| gv * a[i])),
                ]
            }
            Op::Div => {
                let (a, b) = (ins[0].data(), ins[1].data());
                vec![
                    needs[0].then(|| zip_map(g, &|i, gv| gv / b[i])),
                    needs[1].then(|| zip_map(g, &|i, gv| -gv * a[i] / (b[i] * b[i]))),
                ]
            }
            Op::AddBias => {
                let d = ins[1].numel();
                let gb = needs[1].then(|| {
                    let mut gb = vec![T::zero(); d];
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(s, &v)| *s = *s + v);
                    }
                    gb
                });
                vec![Some(g.to_vec()), gb]
            }
            Op::Relu => {
                let x = ins[0].data();
                vec![Some(zip_map(g, &|i, gv| {
                    if x[i] > T::zero() {
                        gv
                    } else {
                        T::zero()
                    }
                }))]
            }
            Op::Gelu => {
                let x = ins[0].data();
                vec![Some(zip_map(g, &|i, gv| gv * gelu_grad(x[i])))]
            }
            Op::Abs => {
                let x = ins[0].data();
                vec![Some(zip_map(g, &|i, gv| {
                    if x[i] > T::zero() {
                        gv
                    } else if x[i] < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                }))]
            }
            Op::Square => {
                let x = ins[0].data();
                vec![Some(zip_map(g, &|i, gv| gv * T::lit(2.0) * x[i]))]
            }
            Op::SumReduce(r) => {
                let x = ins[0];
                let gx = match r {
                    Reduce::All => vec![g[0]; x.numel()],
                    Reduce::Rows => {
                        let d = x.cols();
                        (0..x.numel()).map(|i| g[i / d]).collect()
                    }
                    Reduce::Cols => {
                        let d = x.cols();
                        (0..x.numel()).map(|i| g[i % d]).collect()
                    }
                };
                vec![Some(gx)]
            }
            Op::MaxReduce(_) => {
                let mut gx = vec![T::zero(); ins[0].numel()];
                for (o, &src) in saved_idx.iter().enumerate() {
                    gx[src] = gx[src] + g[o];
                }
                vec![Some(gx)]
            }
            Op::LayerNorm { .. } => {
                let (n, d) = ins[0].dims2().unwrap();
                let gamma = ins[1].data();
                let (xhat, rstd) = saved.split_at(n * d);
                let df = T::from_usize(d).unwrap();
                let mut gx = vec![T::zero(); n * d];
                let mut gg = vec![T::zero(); d];
                let mut gbeta = vec![T::zero(); d];
                for r in 0..n {
                    let gr = &g[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dxh = T::zero();
                    let mut mean_dxh_xh = T::zero();
                    for j in 0..d {
                        gg[j] = gg[j] + gr[j] * xr[j];
                        gbeta[j] = gbeta[j] + gr[j];
                        let dxh = gr[j] * gamma[j];
                        mean_dxh = mean_dxh + dxh;
                        mean_dxh_xh = mean_dxh_xh + dxh * xr[j];
                    }
                    mean_dxh = mean_dxh / df;
                    mean_dxh_xh = mean_dxh_xh / df;
                    for j in 0..d {
                        let dxh = gr[j] * gamma[j];
                        gx[r * d + j] = rstd[r] * (dxh - mean_dxh - xr[j] * mean_dxh_xh);
                    }
                }
                vec![Some(gx), Some(gg), Some(gbeta)]
            }
            Op::Softmax => {
                let (n, d) = out.dims2().unwrap();
                let y = out.data();
                let mut gx = vec![T::zero(); n * d];
                for r in 0..n {
                    let s = (0..d).fold(T::zero(), |s, j| s + g[r * d + j] * y[r * d + j]);
                    for j in 0..d {
                        gx[r * d + j] = y[r * d + j] * (g[r * d + j] - s);
                    }
                }
                vec![Some(gx)]
            }
            Op::EmbeddingLookup { ids } => {
                let d = ins[0].cols();
                let mut gt = vec![T::zero(); ins[0].numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] = gt[id * d + j] + g[r * d + j];
                    }
                }
                vec![Some(gt)]
            }
            Op::CrossEntropy { targets } => {
                let (n, c) = ins[0].dims2().unwrap();
                let scale = g[0] / T::from_usize(n).unwrap();
                let mut gx: Vec<T> = saved.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gx[r * c + t] = gx[r * c + t] - scale;
                }
                vec![Some(gx)]
            }
            Op::Mse => {
                let scale = g[0] * T::lit(2.0) / T::from_usize(ins[0].numel()).unwrap();
                let (a, b) = (ins[0].data(), ins[1].data());
                let ga: Vec<T> = a.iter().zip(b).map(|(&x, &y)| (x - y) * scale).collect();
                let gb = needs[1].then(|| ga.iter().map(|&v| -v).collect());
                vec![Some(ga), gb]
            }
            Op::L2NormRows => {
                let (n, d) = ins[0].dims2().unwrap();
                let x = ins[0].data();
                let norms = out.data();
                let mut gx = vec![T::zero(); n * d];
                for r in 0..n {
                    if norms[r] > T::zero() {
                        for j in 0..d {
                            gx[r * d + j] = g[r] * x[r * d + j] / norms[r];
                        }
                    }
                }
                vec![Some(gx)]
            }
            Op::Attention(spec) => attention_backward(spec, ins, saved, g),
            Op::BceWithLogits => {
                let scale = g[0] / T::from_usize(ins[0].numel()).unwrap();
                let (x, y) = (ins[0].data(), ins[1].data());
                let gx = x
                    .iter()
                    .zip(y)
                    .map(|(&x, &y)| (T::one() / (T::one() + (-x).exp()) - y) * scale)
                    .collect();
                vec![Some(gx), None]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn identity_matmul_is_noop() {
        let mut tape = Tape::<f64>::no_grad();
        let a = t(&[vec![1., 2.], vec![3., 4.], vec![5., 6.]]);
        let i = tape.constant(Tensor::identity(3));
        let av = tape.constant(a.clone());
        let out = tape.matmul(i, av).unwrap();
        assert_eq!(tape.value(out), &a);
    }

    #[test]
    fn relu_and_l2_examples() {
        let mut tape = Tape::<f32>::no_grad();
        let x = tape.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let m = tape.constant(Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap());
        let n = tape.l2_norm_rows(m).unwrap();
        assert_eq!(tape.value(n).data(), &[5.0]);
    }

    #[test]
    fn sum_gives_all_ones_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::full(&[2, 3], 0.7));
        let s = tape.sum(x, Reduce::All).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor::full(&[2, 3], 1.0));
    }

    #[test]
    fn mse_scalar_weight_gradient() {
        // loss = (w x - y)^2, dloss/dw = 2 x (w x - y)
        let (w0, x0, y0) = (1.5, 2.0, 0.5);
        let mut tape = Tape::<f64>::new();
        let w = tape.param(t(&[vec![w0]]));
        let x = tape.constant(t(&[vec![x0]]));
        let y = tape.constant(t(&[vec![y0]]));
        let wx = tape.matmul(x, w).unwrap();
        let loss = tape.mse(wx, y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!((g.get(w).unwrap().item() - 2.0 * x0 * (w0 * x0 - y0)).abs() < 1e-12);
    }

    #[test]
    fn unused_leaves_get_zero_gradients() {
        let mut tape = Tape::<f64>::new();
        let used = tape.param(Tensor::full(&[2], 1.0));
        let unused = tape.param(Tensor::full(&[3], 1.0));
        let c = tape.constant(Tensor::full(&[2], 1.0));
        let s = tape.sum(used, Reduce::All).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.get(unused).unwrap(), &Tensor::zeros(&[3]));
        assert!(g.get(c).is_none());
    }

    #[test]
    fn backward_contract_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::full(&[2], 1.0));
        let y = tape.relu(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
        let mut other = Tape::<f64>::new();
        let z = other.param(Tensor::scalar(1.0));
        let s = other.sum(z, Reduce::All).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Contract(_))));
        let mut ng = Tape::<f64>::no_grad();
        let a = ng.leaf(Tensor::full(&[2], 1.0), true);
        let s = ng.sum(a, Reduce::All).unwrap();
        assert!(matches!(ng.backward(s), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
        assert!(err.to_string().contains("[2,3]"), "{err}");
    }

    #[test]
    fn finite_check_mode_reports_numeric_error() {
        let mut tape = Tape::<f32>::new();
        tape.set_check_finite(true);
        let a = tape.constant(Tensor::from_vec(vec![1.0]));
        let z = tape.constant(Tensor::from_vec(vec![0.0]));
        assert!(matches!(tape.div(a, z), Err(Error::Numeric { .. })));
    }

    #[test]
    fn no_grad_records_nothing_and_matches() {
        let x = Tensor::<f32>::from_rows(&[vec![0.3, -1.2, 2.0], vec![0.1, 0.5, -0.7]]).unwrap();
        let run = |tape: &mut Tape<f32>| {
            let v = tape.leaf(x.clone(), true);
            let g = tape.gelu(v).unwrap();
            let s = tape.softmax(g).unwrap();
            tape.value(s).clone()
        };
        let mut a = Tape::new();
        let mut b = Tape::no_grad();
        let ya = run(&mut a);
        let yb = run(&mut b);
        assert_eq!(b.num_records(), 0);
        assert_eq!(a.num_records(), 2);
        assert_eq!(ya, yb);
    }

    #[test]
    fn causal_attention_first_token_sees_itself() {
        let mut tape = Tape::<f64>::no_grad();
        let q = tape.constant(t(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let v = tape.constant(t(&[vec![5.0, -1.0], vec![7.0, 3.0]]));
        let spec = AttentionSpec {
            batch: 1,
            seq: 2,
            heads: 1,
            causal: true,
        };
        let o = tape.attention(q, q, v, spec).unwrap();
        assert_eq!(tape.value(o).row(0), &[5.0, -1.0]);
    }
}
