//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation appends a node holding its output value and the
//! information its backward rule needs. Nodes are only ever appended
//! after their inputs, so walking the node list from the end visits
//! them in reverse topological order.
//!
//! Parameters are bound by reference ([`Tape::param`]) so that large
//! tables are not copied per forward pass. Leaves bound with
//! [`Tape::sparse_param`] collect the gradient of row gathers as a
//! row map instead of a dense buffer.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, Ordering};

use super::tensor::{axis_split, Tensor};
use crate::error::{Error, Result};

static CORRUPT_TANH_BACKWARD: AtomicBool = AtomicBool::new(false);

/// Deliberately breaks the tanh backward rule (scales it by 1.05).
///
/// Negative control for gradient checks; never enable outside tests.
#[doc(hidden)]
pub fn set_corrupt_tanh_backward(on: bool) {
    CORRUPT_TANH_BACKWARD.store(on, Ordering::SeqCst);
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Squash(Var),
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    Max {
        x: Var,
        axis: usize,
        argmax: Vec<usize>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Reshape(Var),
    L2Norm(Var),
    SumSquares(Var),
    Nll {
        x: Var,
        targets: Vec<usize>,
        floor: f64,
    },
    CapsuleSum {
        c: Var,
        u: Var,
    },
    Agreement {
        u: Var,
        v: Var,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
    sparse_rows: bool,
}

/// Record of executed operations.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
            sparse_rows: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient, value owned by the tape.
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf borrowed from a parameter store.
    pub fn param(&mut self, value: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            needs_grad: true,
            sparse_rows: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf whose row-gather gradients are kept row-sparse.
    pub fn sparse_param(&mut self, value: &'a Tensor) -> Var {
        let v = self.param(value);
        self.nodes[v.0].sparse_rows = true;
        v
    }

    fn expect_2d(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::dim(op, s, &[0, 0])),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::contract(format!(
                "{op}: axis {axis} out of range for shape {:?}",
                self.shape(x)
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.expect_2d("matmul", a)?;
        let (k2, n) = self.expect_2d("matmul", b)?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_nn(self.data(a), self.data(b), m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.expect_2d("transpose", x)?;
        let out = transpose(self.data(x), r, c);
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x), ng))
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a length-`n` vector to every row of an `m × n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.expect_2d("add_row", x)?;
        if self.shape(bias) != [n] {
            return Err(Error::dim("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.data(bias);
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(n) {
            for (o, bi) in row.iter_mut().zip(b) {
                *o += bi;
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::AddRow(x, bias), ng))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let out = self.data(x).iter().map(|v| v * k).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Scale(x, k), ng))
    }

    /// Elementwise product with a constant array (no gradient to the constant).
    pub fn mul_const(&mut self, x: Var, k: Vec<f64>) -> Result<Var> {
        if k.len() != self.value(x).len() {
            return Err(Error::dim("mul_const", self.shape(x), &[k.len()]));
        }
        let out = self.data(x).iter().zip(&k).map(|(a, b)| a * b).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::MulConst(x, k), ng))
    }

    /// Applies an inverted-dropout mask: entries are `0` or `1/keep`.
    pub fn dropout_apply(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        self.mul_const(x, mask)
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, op, ng))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Relu(x), |v| v.max(0.0))
    }

    /// Softmax along `axis`, computed after subtracting the slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let max = (0..n).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..n {
                    let e = (src[at(k)] - max).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..n {
                    out[at(k)] /= z;
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, ng))
    }

    /// Norm-limiting nonlinearity `(‖s‖²/(1+‖s‖²))·s/‖s‖`, applied to every
    /// vector along the last axis. Zero vectors map to zero.
    pub fn squash(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::contract("squash of a scalar"))?;
        let mut out = self.data(x).to_vec();
        if d > 0 {
            for v in out.chunks_mut(d) {
                let n2: f64 = v.iter().map(|a| a * a).sum();
                let n = n2.sqrt();
                let k = if n > 0.0 { n / (1.0 + n2) } else { 0.0 };
                v.iter_mut().for_each(|a| *a *= k);
            }
        }
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Squash(x), ng))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &x in xs {
                let n = self.shape(x)[axis];
                let chunk = n * inner;
                out.extend_from_slice(&self.data(x)[o * chunk..(o + 1) * chunk]);
            }
        }
        let ng = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Range `start..start+len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("slice", x, axis)?;
        let src_shape = self.shape(x).to_vec();
        if start + len > src_shape[axis] {
            return Err(Error::contract(format!(
                "slice {start}..{} exceeds axis {axis} of {src_shape:?}",
                start + len
            )));
        }
        let (outer, n, inner) = axis_split(&src_shape, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            out.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut shape = src_shape;
        shape[axis] = len;
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { x, axis, start }, ng))
    }

    /// Sum along `axis`, removing it from the shape.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum", x, axis)?;
        let src_shape = self.shape(x).to_vec();
        let (outer, n, inner) = axis_split(&src_shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let row = &src[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut shape = src_shape;
        shape.remove(axis);
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Sum { x, axis }, ng))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let ng = self.needs(x);
        Ok(self.push(Tensor::scalar(s), Op::SumAll(x), ng))
    }

    /// Maximum along `axis`; the first maximal index receives the gradient.
    pub fn max(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("max", x, axis)?;
        let src_shape = self.shape(x).to_vec();
        let (outer, n, inner) = axis_split(&src_shape, axis);
        if n == 0 {
            return Err(Error::contract("max over an empty axis"));
        }
        let src = self.data(x);
        let mut out = vec![0.0; outer * inner];
        let mut argmax = vec![0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                for k in 1..n {
                    if src[(o * n + k) * inner + i] > src[(o * n + best) * inner + i] {
                        best = k;
                    }
                }
                out[o * inner + i] = src[(o * n + best) * inner + i];
                argmax[o * inner + i] = best;
            }
        }
        let mut shape = src_shape;
        shape.remove(axis);
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Max { x, axis, argmax }, ng))
    }

    /// Stacks the listed rows of a 2-D tensor; repeats allowed.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.expect_2d("gather_rows", x)?;
        let src = self.data(x);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::Lookup { id: i, size: r });
            }
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let ng = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![rows.len(), c], out)?,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Euclidean norm of all entries.
    pub fn l2norm(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).sum_squares().sqrt();
        let ng = self.needs(x);
        Ok(self.push(Tensor::scalar(n), Op::L2Norm(x), ng))
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).sum_squares();
        let ng = self.needs(x);
        Ok(self.push(Tensor::scalar(n), Op::SumSquares(x), ng))
    }

    /// Mean over rows of `-ln(max(p[row, target], floor))` for a `B × C`
    /// probability matrix.
    pub fn nll(&mut self, probs: Var, targets: &[usize], floor: f64) -> Result<Var> {
        let (b, c) = self.expect_2d("nll", probs)?;
        if targets.len() != b || b == 0 {
            return Err(Error::dim("nll", self.shape(probs), &[targets.len()]));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::contract(format!("label {t} outside {c} classes")));
        }
        let p = self.data(probs);
        let total: f64 = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| -p[r * c + t].max(floor).ln())
            .sum();
        let ng = self.needs(probs);
        Ok(self.push(
            Tensor::scalar(total / b as f64),
            Op::Nll {
                x: probs,
                targets: targets.to_vec(),
                floor,
            },
            ng,
        ))
    }

    /// `s[j] = Σ_i c[i,j] · u[i,j]` for couplings `c: L×M` and messages
    /// `u: L×M×D`, giving `M×D`.
    pub fn capsule_sum(&mut self, c: Var, u: Var) -> Result<Var> {
        let (l, m, d) = self.capsule_dims("capsule_sum", u)?;
        if self.shape(c) != [l, m] {
            return Err(Error::dim("capsule_sum", self.shape(c), self.shape(u)));
        }
        let (cv, uv) = (self.data(c), self.data(u));
        let mut out = vec![0.0; m * d];
        for i in 0..l {
            for j in 0..m {
                let w = cv[i * m + j];
                let msg = &uv[(i * m + j) * d..(i * m + j + 1) * d];
                for (o, x) in out[j * d..(j + 1) * d].iter_mut().zip(msg) {
                    *o += w * x;
                }
            }
        }
        let ng = self.needs(c) || self.needs(u);
        Ok(self.push(Tensor::new(vec![m, d], out)?, Op::CapsuleSum { c, u }, ng))
    }

    /// `a[i,j] = v[j] · u[i,j]` for messages `u: L×M×D` and capsules `v: M×D`.
    pub fn agreement(&mut self, u: Var, v: Var) -> Result<Var> {
        let (l, m, d) = self.capsule_dims("agreement", u)?;
        if self.shape(v) != [m, d] {
            return Err(Error::dim("agreement", self.shape(u), self.shape(v)));
        }
        let (uv, vv) = (self.data(u), self.data(v));
        let mut out = vec![0.0; l * m];
        for i in 0..l {
            for j in 0..m {
                let msg = &uv[(i * m + j) * d..(i * m + j + 1) * d];
                out[i * m + j] = dot(msg, &vv[j * d..(j + 1) * d]);
            }
        }
        let ng = self.needs(u) || self.needs(v);
        Ok(self.push(Tensor::new(vec![l, m], out)?, Op::Agreement { u, v }, ng))
    }

    fn capsule_dims(&self, op: &'static str, u: Var) -> Result<(usize, usize, usize)> {
        match *self.shape(u) {
            [l, m, d] => Ok((l, m, d)),
            ref s => Err(Error::dim(op, s, &[0, 0, 0])),
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut acc = Accumulator {
            dense: vec![None; self.nodes.len()],
            rows: HashMap::new(),
        };
        acc.dense[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = acc.dense[i].take() else {
                continue;
            };
            self.backprop(i, &g, &mut acc);
            acc.dense[i] = Some(g);
        }
        Ok(Gradients {
            dense: acc.dense,
            rows: acc.rows,
        })
    }

    fn backprop(&self, i: usize, g: &[f64], acc: &mut Accumulator) {
        let out = self.nodes[i].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.needs(a) {
                    // dA = G·Bᵀ
                    let bd = self.data(b);
                    acc.add_with(self, a, |da| {
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for kk in 0..k {
                                da[r * k + kk] += dot(grow, &bd[kk * n..(kk + 1) * n]);
                            }
                        }
                    });
                }
                if self.needs(b) {
                    // dB = Aᵀ·G
                    let ad = self.data(a);
                    acc.add_with(self, b, |db| {
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for kk in 0..k {
                                let w = ad[r * k + kk];
                                if w != 0.0 {
                                    axpy(w, grow, &mut db[kk * n..(kk + 1) * n]);
                                }
                            }
                        }
                    });
                }
            }
            &Op::Transpose(x) => {
                let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
                let gt = transpose(g, c, r);
                acc.add_slice(self, x, &gt);
            }
            &Op::Add(a, b) => {
                acc.add_slice(self, a, g);
                acc.add_slice(self, b, g);
            }
            &Op::Sub(a, b) => {
                acc.add_slice(self, a, g);
                acc.add_with(self, b, |db| {
                    db.iter_mut().zip(g).for_each(|(d, gi)| *d -= gi);
                });
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.data(a), self.data(b));
                acc.add_with(self, a, |da| {
                    for ((d, gi), y) in da.iter_mut().zip(g).zip(bv) {
                        *d += gi * y;
                    }
                });
                acc.add_with(self, b, |db| {
                    for ((d, gi), x) in db.iter_mut().zip(g).zip(av) {
                        *d += gi * x;
                    }
                });
            }
            &Op::AddRow(x, bias) => {
                acc.add_slice(self, x, g);
                let n = self.shape(bias)[0];
                acc.add_with(self, bias, |db| {
                    for row in g.chunks(n) {
                        axpy(1.0, row, db);
                    }
                });
            }
            &Op::Scale(x, k) => acc.add_with(self, x, |dx| axpy(k, g, dx)),
            Op::MulConst(x, k) => acc.add_with(self, *x, |dx| {
                for ((d, gi), ki) in dx.iter_mut().zip(g).zip(k) {
                    *d += gi * ki;
                }
            }),
            &Op::Tanh(x) => {
                let factor = if CORRUPT_TANH_BACKWARD.load(Ordering::Relaxed) {
                    1.05
                } else {
                    1.0
                };
                acc.add_with(self, x, |dx| {
                    for ((d, gi), y) in dx.iter_mut().zip(g).zip(out) {
                        *d += factor * gi * (1.0 - y * y);
                    }
                });
            }
            &Op::Sigmoid(x) => acc.add_with(self, x, |dx| {
                for ((d, gi), y) in dx.iter_mut().zip(g).zip(out) {
                    *d += gi * y * (1.0 - y);
                }
            }),
            &Op::Relu(x) => {
                let xv = self.data(x);
                acc.add_with(self, x, |dx| {
                    for ((d, gi), v) in dx.iter_mut().zip(g).zip(xv) {
                        if *v > 0.0 {
                            *d += gi;
                        }
                    }
                });
            }
            &Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_split(self.shape(x), axis);
                acc.add_with(self, x, |dx| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |k: usize| (o * n + k) * inner + ii;
                            let dotp: f64 = (0..n).map(|k| g[at(k)] * out[at(k)]).sum();
                            for k in 0..n {
                                dx[at(k)] += out[at(k)] * (g[at(k)] - dotp);
                            }
                        }
                    }
                });
            }
            &Op::Squash(x) => {
                let d = *self.shape(x).last().unwrap_or(&0);
                if d == 0 {
                    return;
                }
                let xv = self.data(x);
                acc.add_with(self, x, |dx| {
                    for ((s, gs), ds) in xv.chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)) {
                        let n2: f64 = s.iter().map(|a| a * a).sum();
                        let n = n2.sqrt();
                        if n == 0.0 {
                            continue;
                        }
                        // v = k(n)·s with k = n/(1+n²);  dk/dn = (1-n²)/(1+n²)²
                        let k = n / (1.0 + n2);
                        let dk = (1.0 - n2) / ((1.0 + n2) * (1.0 + n2));
                        let coef = dk / n * dot(s, gs);
                        for ((o, si), gi) in ds.iter_mut().zip(s).zip(gs) {
                            *o += k * gi + coef * si;
                        }
                    }
                });
            }
            Op::Concat { xs, axis } => {
                let shape = self.nodes[i].value.shape();
                let (outer, _, inner) = axis_split(shape, *axis);
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &x in xs {
                    let chunk = self.shape(x)[*axis] * inner;
                    acc.add_with(self, x, |dx| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            axpy(1.0, src, &mut dx[o * chunk..(o + 1) * chunk]);
                        }
                    });
                    offset += chunk;
                }
            }
            &Op::Slice { x, axis, start } => {
                let (outer, n, inner) = axis_split(self.shape(x), axis);
                let len = self.nodes[i].value.shape()[axis];
                acc.add_with(self, x, |dx| {
                    for o in 0..outer {
                        let to = (o * n + start) * inner;
                        let from = o * len * inner;
                        axpy(
                            1.0,
                            &g[from..from + len * inner],
                            &mut dx[to..to + len * inner],
                        );
                    }
                });
            }
            &Op::Sum { x, axis } => {
                let (outer, n, inner) = axis_split(self.shape(x), axis);
                acc.add_with(self, x, |dx| {
                    for o in 0..outer {
                        let gs = &g[o * inner..(o + 1) * inner];
                        for k in 0..n {
                            axpy(
                                1.0,
                                gs,
                                &mut dx[(o * n + k) * inner..(o * n + k + 1) * inner],
                            );
                        }
                    }
                });
            }
            &Op::SumAll(x) => acc.add_with(self, x, |dx| dx.iter_mut().for_each(|d| *d += g[0])),
            Op::Max { x, axis, argmax } => {
                let (outer, n, inner) = axis_split(self.shape(*x), *axis);
                acc.add_with(self, *x, |dx| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let k = argmax[o * inner + ii];
                            dx[(o * n + k) * inner + ii] += g[o * inner + ii];
                        }
                    }
                });
            }
            Op::GatherRows { x, rows } => {
                let c = self.shape(*x)[1];
                let x = *x;
                if !self.needs(x) {
                    return;
                }
                if self.nodes[x.0].sparse_rows {
                    let map = acc.rows.entry(x.0).or_default();
                    for (r, gs) in rows.iter().zip(g.chunks(c)) {
                        let slot = map.entry(*r).or_insert_with(|| vec![0.0; c]);
                        axpy(1.0, gs, slot);
                    }
                } else {
                    acc.add_with(self, x, |dx| {
                        for (r, gs) in rows.iter().zip(g.chunks(c)) {
                            axpy(1.0, gs, &mut dx[r * c..(r + 1) * c]);
                        }
                    });
                }
            }
            &Op::Reshape(x) => acc.add_slice(self, x, g),
            &Op::L2Norm(x) => {
                let n = out[0];
                if n > 0.0 {
                    let xv = self.data(x);
                    acc.add_with(self, x, |dx| axpy(g[0] / n, xv, dx));
                }
            }
            &Op::SumSquares(x) => {
                let xv = self.data(x);
                acc.add_with(self, x, |dx| axpy(2.0 * g[0], xv, dx));
            }
            Op::Nll { x, targets, floor } => {
                let c = self.shape(*x)[1];
                let b = targets.len() as f64;
                let p = self.data(*x);
                acc.add_with(self, *x, |dx| {
                    for (r, &t) in targets.iter().enumerate() {
                        let pt = p[r * c + t];
                        if pt > *floor {
                            dx[r * c + t] -= g[0] / (b * pt);
                        }
                    }
                });
            }
            &Op::CapsuleSum { c, u } => {
                let (l, m, d) = (self.shape(u)[0], self.shape(u)[1], self.shape(u)[2]);
                let (cv, uv) = (self.data(c), self.data(u));
                acc.add_with(self, c, |dc| {
                    for ii in 0..l {
                        for j in 0..m {
                            let msg = &uv[(ii * m + j) * d..(ii * m + j + 1) * d];
                            dc[ii * m + j] += dot(msg, &g[j * d..(j + 1) * d]);
                        }
                    }
                });
                acc.add_with(self, u, |du| {
                    for ii in 0..l {
                        for j in 0..m {
                            let w = cv[ii * m + j];
                            let slot = &mut du[(ii * m + j) * d..(ii * m + j + 1) * d];
                            axpy(w, &g[j * d..(j + 1) * d], slot);
                        }
                    }
                });
            }
            &Op::Agreement { u, v } => {
                let (l, m, d) = (self.shape(u)[0], self.shape(u)[1], self.shape(u)[2]);
                let (uv, vv) = (self.data(u), self.data(v));
                acc.add_with(self, u, |du| {
                    for ii in 0..l {
                        for j in 0..m {
                            let slot = &mut du[(ii * m + j) * d..(ii * m + j + 1) * d];
                            axpy(g[ii * m + j], &vv[j * d..(j + 1) * d], slot);
                        }
                    }
                });
                acc.add_with(self, v, |dv| {
                    for ii in 0..l {
                        for j in 0..m {
                            let msg = &uv[(ii * m + j) * d..(ii * m + j + 1) * d];
                            axpy(g[ii * m + j], msg, &mut dv[j * d..(j + 1) * d]);
                        }
                    }
                });
            }
        }
    }
}

struct Accumulator {
    dense: Vec<Option<Vec<f64>>>,
    rows: HashMap<usize, BTreeMap<usize, Vec<f64>>>,
}

impl Accumulator {
    fn add_with(&mut self, tape: &Tape<'_>, v: Var, f: impl FnOnce(&mut [f64])) {
        if !tape.needs(v) {
            return;
        }
        let n = tape.value(v).len();
        let slot = self.dense[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn add_slice(&mut self, tape: &Tape<'_>, v: Var, g: &[f64]) {
        self.add_with(tape, v, |d| axpy(1.0, g, d));
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    dense: Vec<Option<Vec<f64>>>,
    rows: HashMap<usize, BTreeMap<usize, Vec<f64>>>,
}

impl Gradients {
    /// Dense gradient of `v`, if any path reached it densely.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.dense.get(v.0).and_then(|g| g.as_deref())
    }

    /// Row-sparse gradient contributions for a leaf bound with
    /// [`Tape::sparse_param`].
    pub fn rows_wrt(&self, v: Var) -> Option<&BTreeMap<usize, Vec<f64>>> {
        self.rows.get(&v.0)
    }

    /// Full gradient of `v` with sparse rows folded in; zeros if unreached.
    pub fn dense_wrt(&self, v: Var, shape: &[usize]) -> Vec<f64> {
        let n: usize = shape.iter().product();
        let mut out = self.wrt(v).map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
        if let Some(rows) = self.rows_wrt(v) {
            let c = if shape.len() >= 2 { n / shape[0] } else { 1 };
            for (r, g) in rows {
                axpy(1.0, g, &mut out[r * c..(r + 1) * c]);
            }
        }
        out
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(k: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += k * xi;
    }
}

fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let orow = &mut out[r * n..(r + 1) * n];
        for kk in 0..k {
            let w = a[r * k + kk];
            if w != 0.0 {
                axpy(w, &b[kk * n..(kk + 1) * n], orow);
            }
        }
    }
    out
}

fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}
