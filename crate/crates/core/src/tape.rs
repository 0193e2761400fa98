//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its output value and the ids of
//! its inputs. Nodes are therefore stored in topological order, and
//! [`Tape::backward`] walks them once in reverse, pushing each node's
//! adjoint into its inputs.
//!
//! Parameters enter through [`Tape::leaf`], which binds a
//! `requires_grad` tensor by its [`TensorId`]; binding the same tensor twice
//! returns the same variable so shared weights receive a summed gradient.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};
use crate::ops::{self, gemm, gemm_new, plan_matmul, Mode};
use crate::tensor::{Tensor, TensorId};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds, used to target the adjoint fault hook.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Add,
    AddBias,
    Mul,
    MulRows,
    Scale,
    AddScalar,
    Softmax,
    Sigmoid,
    Relu,
    MeanRows,
    Concat,
    SliceCols,
    SplitHeads,
    MergeHeads,
    Mask,
    Reshape,
    Sum,
    CrossEntropy,
}

impl OpKind {
    const NAMES: [(OpKind, &'static str); 19] = [
        (OpKind::MatMul, "matmul"),
        (OpKind::Add, "add"),
        (OpKind::AddBias, "add_bias"),
        (OpKind::Mul, "mul"),
        (OpKind::MulRows, "mul_rows"),
        (OpKind::Scale, "scale"),
        (OpKind::AddScalar, "add_scalar"),
        (OpKind::Softmax, "softmax"),
        (OpKind::Sigmoid, "sigmoid"),
        (OpKind::Relu, "relu"),
        (OpKind::MeanRows, "mean_rows"),
        (OpKind::Concat, "concat"),
        (OpKind::SliceCols, "slice_cols"),
        (OpKind::SplitHeads, "split_heads"),
        (OpKind::MergeHeads, "merge_heads"),
        (OpKind::Mask, "mask"),
        (OpKind::Reshape, "reshape"),
        (OpKind::Sum, "sum"),
        (OpKind::CrossEntropy, "cross_entropy"),
    ];

    pub fn name(self) -> &'static str {
        Self::NAMES
            .iter()
            .find(|(k, _)| *k == self)
            .map(|(_, n)| *n)
            .expect("every kind is named")
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::NAMES
            .iter()
            .find(|(_, n)| *n == name)
            .map(|(k, _)| *k)
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    MulRows(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Softmax(Var),
    Sigmoid(Var),
    Relu(Var),
    MeanRows(Var),
    Concat(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SplitHeads { x: Var, heads: usize },
    MergeHeads { x: Var, heads: usize },
    Mask(Var, Vec<f64>),
    Reshape(Var),
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<usize> },
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Mul(..) => OpKind::Mul,
            Op::MulRows(..) => OpKind::MulRows,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Softmax(..) => OpKind::Softmax,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Relu(..) => OpKind::Relu,
            Op::MeanRows(..) => OpKind::MeanRows,
            Op::Concat(..) => OpKind::Concat,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::SplitHeads { .. } => OpKind::SplitHeads,
            Op::MergeHeads { .. } => OpKind::MergeHeads,
            Op::Mask(..) => OpKind::Mask,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Sum(..) => OpKind::Sum,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        })
    }
}

struct Node {
    value: Tensor,
    op: Op,
    /// Some leaf with `requires_grad` is upstream of this node.
    tracked: bool,
}

struct DropoutState {
    rate: f64,
    rng: Xoshiro256PlusPlus,
}

/// Records a forward computation for later differentiation.
///
/// A tape is confined to one thread; separate tapes are independent.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaves: HashMap<TensorId, Var>,
    dropout: Option<DropoutState>,
    fault: Option<OpKind>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl Tape {
    /// An evaluation-mode tape: [`Tape::dropout`] is the identity.
    pub fn new() -> Self {
        Self::default()
    }

    /// A training-mode tape whose dropout masks come from `seed`.
    pub fn training(rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidRate(rate));
        }
        Ok(Tape {
            dropout: Some(DropoutState {
                rate,
                rng: Xoshiro256PlusPlus::seed_from_u64(seed),
            }),
            ..Self::default()
        })
    }

    pub fn mode(&self) -> Mode {
        if self.dropout.is_some() {
            Mode::Train
        } else {
            Mode::Eval
        }
    }

    /// Test hook: corrupts the adjoint of every op of `kind` during backward.
    pub fn inject_adjoint_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Binds a tensor as a leaf. Tensors with `requires_grad` are bound once
    /// per tape and receive gradients; others are recorded as constants.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        if t.requires_grad() {
            if let Some(&v) = self.leaves.get(&t.id()) {
                return v;
            }
            let v = self.push(t.clone(), Op::Leaf, true);
            self.nodes[v.0].value.zero_grad();
            self.leaves.insert(t.id(), v);
            v
        } else {
            self.constant(t.clone())
        }
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(
            out,
            Op::MatMul {
                a,
                b,
                trans_b: false,
            },
            tracked,
        ))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul_nt(self.value(a), self.value(b))?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(
            out,
            Op::MatMul {
                a,
                b,
                trans_b: true,
            },
            tracked,
        ))
    }

    fn zip_same(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), tracked))
    }

    /// Adds a length-`d` vector to every row of `x: (..., d)`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = ops::add_bias(self.value(x), self.value(bias))?;
        let tracked = self.tracked(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), tracked))
    }

    /// Scales every row of `x: (..., n, d)` channel-wise by `g: (..., d)`.
    pub fn mul_rows(&mut self, x: Var, g: Var) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(g));
        let d = tx.cols();
        let ok = tx.rank() >= 2
            && tg.cols() == d
            && tx.shape()[..tx.rank() - 2] == tg.shape()[..tg.rank() - 1];
        if !ok {
            return Err(shape_err("mul_rows", tx, tg));
        }
        let n = tx.rows();
        let mut out = tx.data().to_vec();
        for (gi, gate) in tg.data().chunks(d).enumerate() {
            for row in out[gi * n * d..(gi + 1) * n * d].chunks_mut(d) {
                row.iter_mut().zip(gate).for_each(|(a, s)| *a *= s);
            }
        }
        let out = Tensor::new(tx.shape(), out)?;
        let tracked = self.tracked(&[x, g]);
        Ok(self.push(out, Op::MulRows(x, g), tracked))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect()).unwrap()
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.map(x, |v| v * c);
        let tracked = self.tracked(&[x]);
        self.push(out, Op::Scale(x, c), tracked)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.map(x, |v| v + c);
        let tracked = self.tracked(&[x]);
        self.push(out, Op::AddScalar(x), tracked)
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = ops::softmax_rows(self.value(x))?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(out, Op::Softmax(x), tracked))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.map(x, ops::sigmoid_scalar);
        let tracked = self.tracked(&[x]);
        self.push(out, Op::Sigmoid(x), tracked)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.map(x, ops::relu_scalar);
        let tracked = self.tracked(&[x]);
        self.push(out, Op::Relu(x), tracked)
    }

    /// Mean over the row axis: `n x d -> d`, `B x n x d -> B x d`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let out = ops::avg_pool_rows(self.value(x))?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(out, Op::MeanRows(x), tracked))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or(Error::EmptyInput { op: "concat" })?);
        let lead = first.shape()[..first.rank() - 1].to_vec();
        for p in parts {
            let t = self.value(*p);
            if t.shape()[..t.rank() - 1] != lead[..] {
                return Err(shape_err("concat", first, t));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        let total: usize = widths.iter().sum();
        let rows = first.len() / first.cols();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let out = Tensor::new(&shape, out)?;
        let tracked = self.tracked(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), tracked))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let d = t.cols();
        if len == 0 || start + len > d {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                left: t.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let out: Vec<f64> = t
            .data()
            .chunks(d)
            .flat_map(|row| &row[start..start + len])
            .copied()
            .collect();
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let out = Tensor::new(&shape, out)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(out, Op::SliceCols { x, start }, tracked))
    }

    /// `(n, d)` or `(B, n, d)` to `(B * heads, n, d / heads)`: head `h` of
    /// instance `b` holds columns `h * d/heads ..` and lands at `b * heads + h`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let t = self.value(x);
        let d = t.cols();
        if heads == 0 || !d.is_multiple_of(heads) || t.rank() < 2 {
            return Err(Error::HeadSplit { dim: d, heads });
        }
        let (n, hd) = (t.rows(), d / heads);
        let batch = t.len() / (n * d);
        let mut out = Vec::with_capacity(t.len());
        for b in 0..batch {
            let inst = &t.data()[b * n * d..(b + 1) * n * d];
            for h in 0..heads {
                for row in inst.chunks(d) {
                    out.extend_from_slice(&row[h * hd..(h + 1) * hd]);
                }
            }
        }
        let out = Tensor::new(&[batch * heads, n, hd], out)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(out, Op::SplitHeads { x, heads }, tracked))
    }

    /// Inverse of [`split_heads`](Self::split_heads). `rank` selects a
    /// `(n, d)` or `(B, n, d)` result.
    pub fn merge_heads(&mut self, x: Var, heads: usize, rank: usize) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if t.rank() != 3
            || heads == 0
            || !s[0].is_multiple_of(heads)
            || !(rank == 2 || rank == 3)
            || (rank == 2 && s[0] != heads)
        {
            return Err(Error::HeadSplit {
                dim: t.cols(),
                heads,
            });
        }
        let (batch, n, hd) = (s[0] / heads, s[1], s[2]);
        let d = hd * heads;
        let mut out = vec![0.0; t.len()];
        merge_into(t.data(), &mut out, batch, heads, n, hd, false);
        let shape = if rank == 2 {
            vec![n, d]
        } else {
            vec![batch, n, d]
        };
        let out = Tensor::new(&shape, out)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(out, Op::MergeHeads { x, heads }, tracked))
    }

    /// Element-wise product with a fixed mask.
    pub fn mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let t = self.value(x);
        if mask.len() != t.len() {
            return Err(Error::ShapeMismatch {
                op: "mask",
                left: t.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let out = Tensor::new(
            t.shape(),
            t.data().iter().zip(&mask).map(|(a, m)| a * m).collect(),
        )?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(out, Op::Mask(x, mask), tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).detached().reshape(shape)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(out, Op::Reshape(x), tracked))
    }

    /// Sum of all elements as a `[1]`-shaped scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let tracked = self.tracked(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), tracked)
    }

    /// Dropout driven by the tape's own mode and generator.
    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some(state) = self.dropout.as_mut() else {
            return Ok(x);
        };
        if state.rate == 0.0 {
            return Ok(x);
        }
        let len = self.nodes[x.0].value.len();
        let mask = ops::dropout_mask(len, state.rate, &mut state.rng)?;
        self.mask(x, mask)
    }

    /// Dropout with an explicit rate, mode and generator.
    pub fn dropout_with<R: rand::Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidRate(rate));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let mask = ops::dropout_mask(self.value(x).len(), rate, rng)?;
        self.mask(x, mask)
    }

    /// Mean softmax cross-entropy of `logits: (n)` or `(B, n)` against one
    /// target per row, via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let classes = t.cols();
        let rows = t.len() / classes;
        if targets.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: t.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut total = 0.0;
        for (row, &target) in t.data().chunks(classes).zip(targets) {
            if target >= classes {
                return Err(Error::TargetOutOfRange { target, classes });
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[target];
        }
        let tracked = self.tracked(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / rows as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            tracked,
        ))
    }

    /// Reverse pass from a scalar `loss`. Each recorded op is visited once,
    /// in reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(idx);
            let Some(gy) = upper[0].as_ref() else {
                continue;
            };
            let corrupt = self.fault.is_some() && node.op.kind() == self.fault;
            if corrupt {
                let bad: Vec<f64> = gy.iter().map(|g| g * 1.5).collect();
                self.adjoint(node, &bad, lower);
            } else {
                self.adjoint(node, gy, lower);
            }
        }
        Ok(Gradients {
            grads,
            leaves: self.leaves.clone(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Accumulates `f(i)` into the gradient of `v`.
    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl Fn(usize) -> f64) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().enumerate().for_each(|(i, x)| *x += f(i)),
            slot => *slot = Some((0..self.nodes[v.0].value.len()).map(f).collect()),
        }
    }

    fn adjoint(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let slot = |grads: &mut [Option<Vec<f64>>], v: Var| -> usize {
            let len = self.nodes[v.0].value.len();
            grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            v.0
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (val(*a), val(*b));
                let plan = plan_matmul(ta.shape(), tb.shape(), *trans_b).unwrap();
                let (m, k, n) = (plan.m, plan.k, plan.n);
                if plan.batch == 1 {
                    // Single product: write fresh gradients directly.
                    if self.wants(*a) && grads[a.0].is_none() {
                        grads[a.0] = Some(gemm_new(m, n, k, gy, false, tb.data(), !*trans_b));
                    } else if self.wants(*a) {
                        let ga = grads[a.0].as_mut().unwrap();
                        gemm(m, n, k, gy, false, tb.data(), !*trans_b, ga, true);
                    }
                    if self.wants(*b) {
                        let fresh = grads[b.0].is_none();
                        let (rows, cols, lhs, rhs) = if *trans_b {
                            (n, k, gy, ta.data())
                        } else {
                            (k, n, ta.data(), gy)
                        };
                        if fresh {
                            grads[b.0] = Some(gemm_new(rows, m, cols, lhs, true, rhs, false));
                        } else {
                            let gb = grads[b.0].as_mut().unwrap();
                            gemm(rows, m, cols, lhs, true, rhs, false, gb, true);
                        }
                    }
                    return;
                }
                for bi in 0..plan.batch {
                    let gy_b = &gy[bi * m * n..(bi + 1) * m * n];
                    let a_b = &ta.data()[bi * m * k..(bi + 1) * m * k];
                    let bs = if plan.shared { 0 } else { bi * k * n };
                    let b_b = &tb.data()[bs..bs + k * n];
                    if self.wants(*a) {
                        let ga = grads[slot(grads, *a)].as_mut().unwrap();
                        let ga_b = &mut ga[bi * m * k..(bi + 1) * m * k];
                        // dA = dC * B^T (or dC * B when C = A * B^T)
                        gemm(m, n, k, gy_b, false, b_b, !*trans_b, ga_b, true);
                    }
                    if self.wants(*b) {
                        let gb = grads[slot(grads, *b)].as_mut().unwrap();
                        let gb_b = &mut gb[bs..bs + k * n];
                        if *trans_b {
                            // dB = dC^T * A, shape n x k
                            gemm(n, m, k, gy_b, true, a_b, false, gb_b, true);
                        } else {
                            // dB = A^T * dC, shape k x n
                            gemm(k, m, n, a_b, true, gy_b, false, gb_b, true);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |i| gy[i]);
                self.acc(grads, *b, |i| gy[i]);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                self.acc(grads, *a, |i| gy[i] * tb[i]);
                self.acc(grads, *b, |i| gy[i] * ta[i]);
            }
            Op::AddBias(x, bias) => {
                self.acc(grads, *x, |i| gy[i]);
                if self.wants(*bias) {
                    let d = val(*bias).len();
                    let g = grads[bias.0].get_or_insert_with(|| vec![0.0; d]);
                    for row in gy.chunks(d) {
                        g.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                }
            }
            Op::MulRows(x, gate) => {
                let (tx, tg) = (val(*x), val(*gate));
                let d = tx.cols();
                let n = tx.rows();
                let gd = tg.data();
                self.acc(grads, *x, |i| gy[i] * gd[(i / (n * d)) * d + i % d]);
                if self.wants(*gate) {
                    let g = grads[gate.0].get_or_insert_with(|| vec![0.0; gd.len()]);
                    for (i, (gyi, xi)) in gy.iter().zip(tx.data()).enumerate() {
                        g[(i / (n * d)) * d + i % d] += gyi * xi;
                    }
                }
            }
            Op::Scale(x, c) => self.acc(grads, *x, |i| gy[i] * c),
            Op::AddScalar(x) | Op::Reshape(x) => self.acc(grads, *x, |i| gy[i]),
            Op::Softmax(x) => {
                if self.wants(*x) {
                    let y = node.value.data();
                    let d = node.value.cols();
                    let g = grads[x.0].get_or_insert_with(|| vec![0.0; y.len()]);
                    for ((gr, yr), gyr) in g.chunks_mut(d).zip(y.chunks(d)).zip(gy.chunks(d)) {
                        let dot: f64 = yr.iter().zip(gyr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            gr[j] += yr[j] * (gyr[j] - dot);
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                self.acc(grads, *x, |i| gy[i] * y[i] * (1.0 - y[i]));
            }
            Op::Relu(x) => {
                let xv = val(*x).data();
                self.acc(grads, *x, |i| if xv[i] > 0.0 { gy[i] } else { 0.0 });
            }
            Op::MeanRows(x) => {
                let tx = val(*x);
                let (n, d) = (tx.rows(), tx.cols());
                let inv = 1.0 / n as f64;
                self.acc(grads, *x, |i| gy[(i / (n * d)) * d + i % d] * inv);
            }
            Op::Concat(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).cols();
                    let o = offset;
                    self.acc(grads, *p, |i| gy[(i / w) * total + o + i % w]);
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                if self.wants(*x) {
                    let d = val(*x).cols();
                    let w = node.value.cols();
                    let g = grads[x.0].get_or_insert_with(|| vec![0.0; val(*x).len()]);
                    for (gr, gyr) in g.chunks_mut(d).zip(gy.chunks(w)) {
                        gr[*start..start + w]
                            .iter_mut()
                            .zip(gyr)
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::SplitHeads { x, heads } => {
                if self.wants(*x) {
                    let s = node.value.shape();
                    let (batch, n, hd) = (s[0] / heads, s[1], s[2]);
                    let len = node.value.len();
                    let g = grads[x.0].get_or_insert_with(|| vec![0.0; len]);
                    merge_into(gy, g, batch, *heads, n, hd, true);
                }
            }
            Op::MergeHeads { x, heads } => {
                if self.wants(*x) {
                    let s = val(*x).shape();
                    let (batch, n, hd) = (s[0] / heads, s[1], s[2]);
                    let d = hd * heads;
                    let mut i = 0;
                    let g = grads[x.0].get_or_insert_with(|| vec![0.0; gy.len()]);
                    for b in 0..batch {
                        for h in 0..*heads {
                            for r in 0..n {
                                let src = &gy[(b * n + r) * d + h * hd..][..hd];
                                g[i..i + hd].iter_mut().zip(src).for_each(|(a, v)| *a += v);
                                i += hd;
                            }
                        }
                    }
                }
            }
            Op::Mask(x, mask) => self.acc(grads, *x, |i| gy[i] * mask[i]),
            Op::Sum(x) => self.acc(grads, *x, |_| gy[0]),
            Op::CrossEntropy { logits, targets } => {
                let t = val(*logits);
                let classes = t.cols();
                let mut probs = t.data().to_vec();
                ops::softmax_in_place(&mut probs, classes);
                let scale = gy[0] / targets.len() as f64;
                self.acc(grads, *logits, |i| {
                    let onehot = if targets[i / classes] == i % classes {
                        1.0
                    } else {
                        0.0
                    };
                    (probs[i] - onehot) * scale
                });
            }
        }
    }
}

/// Scatters head-major `(B * heads, n, hd)` data into `(B, n, heads * hd)`.
fn merge_into(
    src: &[f64],
    dst: &mut [f64],
    batch: usize,
    heads: usize,
    n: usize,
    hd: usize,
    accumulate: bool,
) {
    let d = hd * heads;
    let mut i = 0;
    for b in 0..batch {
        for h in 0..heads {
            for r in 0..n {
                let out = &mut dst[(b * n + r) * d + h * hd..][..hd];
                let part = &src[i..i + hd];
                if accumulate {
                    out.iter_mut().zip(part).for_each(|(a, v)| *a += v);
                } else {
                    out.copy_from_slice(part);
                }
                i += hd;
            }
        }
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    leaves: HashMap<TensorId, Var>,
}

impl Gradients {
    /// Gradient of the loss with respect to any recorded value. `None` when
    /// no gradient reached it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn is_bound(&self, t: &Tensor) -> bool {
        self.leaves.contains_key(&t.id())
    }

    /// Gradient for a parameter leaf; zeros when it was bound but unused.
    pub fn get(&self, t: &Tensor) -> Result<Vec<f64>> {
        let v = self.leaves.get(&t.id()).ok_or(Error::NotOnTape)?;
        Ok(self
            .wrt(*v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.len()]))
    }

    /// Adds this gradient into `t.grad`.
    pub fn accumulate_into(&self, t: &mut Tensor) -> Result<()> {
        let g = self.get(t)?;
        t.accumulate_grad(&g)
    }
}
