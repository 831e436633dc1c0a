//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation in creation order. Each op returns a
//! [`Var`] handle to its output node. [`Graph::backward`] walks the record once,
//! newest to oldest, so gradient accumulation order is fixed and repeated runs
//! are bitwise identical.
//!
//! ```
//! use car_core::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.param(Tensor::from_f64(vec![3], &[1.0, -2.0, 3.0]).unwrap());
//! let y = g.square(x);
//! let loss = g.sum(y);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 6.0]);
//! ```

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::{axis_split, broadcast_index_map, broadcast_shape, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Abs(Var),
    Square(Var),
    Relu(Var),
    ReluMax(Var, T),
    BroadcastTo(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Reduce(Var, ReduceKind, Option<usize>),
    Reshape(Var),
    SelectRows(Var, Vec<usize>),
    SliceRows(Var, usize),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Abs(_) => "abs",
            Op::Square(_) => "square",
            Op::Relu(_) => "relu",
            Op::ReluMax(..) => "relu_max",
            Op::BroadcastTo(_) => "broadcast_to",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Reduce(_, ReduceKind::Sum, _) => "sum",
            Op::Reduce(_, ReduceKind::Mean, _) => "mean",
            Op::Reshape(_) => "reshape",
            Op::SelectRows(..) => "select_rows",
            Op::SliceRows(..) => "slice_rows",
            Op::Conv2d { .. } => "conv2d",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation record plus the values (and, after [`Graph::backward`], the
/// gradients) of every node. A graph is confined to one thread.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v`'s current value cut off from the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// Gradient of the last backward pass with respect to `v`, if it was on the
    /// gradient path.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// The earliest node holding a NaN or infinity, with the name of its op.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).ok_or(Error::Shape {
            op: name,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data: Vec<T> = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_index_map(&sa, &out_shape);
            let mb = broadcast_index_map(&sb, &out_shape);
            ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect()
        };
        let op = match name {
            "add" => Op::Add(a, b),
            "sub" => Op::Sub(a, b),
            _ => Op::Mul(a, b),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(out_shape, data)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y)
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), |v| v.abs())
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    /// `max(x - threshold, 0)`; zero gradient wherever `x <= threshold`.
    pub fn relu_max(&mut self, x: Var, threshold: T) -> Var {
        self.unary(x, Op::ReluMax(x, threshold), |v| {
            if v > threshold {
                v - threshold
            } else {
                T::zero()
            }
        })
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if broadcast_shape(&sx, shape).as_deref() != Some(shape) {
            return Err(Error::Shape {
                op: "broadcast_to",
                lhs: sx,
                rhs: shape.to_vec(),
            });
        }
        let src = self.value(x).data();
        let data = broadcast_index_map(&sx, shape)
            .into_iter()
            .map(|i| src[i])
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape.to_vec(), data)?, Op::BroadcastTo(x), rg))
    }

    // ---- linear algebra ----------------------------------------------------

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![0, 0],
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "transpose")?;
        let data = kernels::transpose(self.value(x).data(), r, c);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![c, r], data)?, Op::Transpose(x), rg))
    }

    // ---- normalization -----------------------------------------------------

    fn check_axis(&self, x: Var, axis: usize) -> Result<()> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(Error::Axis {
                axis,
                shape: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Softmax along `axis`, shifted by the line maximum for stability.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let (outer, n, inner) = axis_split(self.shape(x), axis);
        if n == 0 {
            return Err(Error::Empty("softmax"));
        }
        let mut out = self.value(x).clone();
        let d = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let mx = (0..n).map(|j| d[idx(j)]).fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for j in 0..n {
                    let e = (d[idx(j)] - mx).exp();
                    d[idx(j)] = e;
                    s = s + e;
                }
                for j in 0..n {
                    d[idx(j)] = d[idx(j)] / s;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x, axis), rg))
    }

    /// Log-softmax along `axis` via a max-shifted log-sum-exp.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let (outer, n, inner) = axis_split(self.shape(x), axis);
        if n == 0 {
            return Err(Error::Empty("log_softmax"));
        }
        let mut out = self.value(x).clone();
        let d = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let mx = (0..n).map(|j| d[idx(j)]).fold(T::neg_infinity(), T::max);
                let s: T = (0..n).map(|j| (d[idx(j)] - mx).exp()).sum();
                let lse = mx + s.ln();
                for j in 0..n {
                    d[idx(j)] = d[idx(j)] - lse;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::LogSoftmax(x, axis), rg))
    }

    // ---- reductions --------------------------------------------------------

    /// Sum or mean over one axis (removed from the shape) or over everything.
    pub fn reduce(&mut self, x: Var, kind: ReduceKind, axis: Option<usize>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let src = self.value(x).data();
        let (value, count) = match axis {
            None => {
                if src.is_empty() {
                    return Err(Error::Empty("reduce"));
                }
                let s: T = src.iter().copied().sum();
                (Tensor::scalar(s), src.len())
            }
            Some(axis) => {
                self.check_axis(x, axis)?;
                let (outer, n, inner) = axis_split(&shape, axis);
                if n == 0 {
                    return Err(Error::Empty("reduce"));
                }
                let mut out = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    for j in 0..n {
                        let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                        for (a, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                            *a = *a + v;
                        }
                    }
                }
                let mut s = shape.clone();
                s.remove(axis);
                (Tensor::new(s, out)?, n)
            }
        };
        let value = match kind {
            ReduceKind::Sum => value,
            ReduceKind::Mean => {
                let inv = T::one() / T::from_f64(count as f64);
                value.map(|v| v * inv)
            }
        };
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reduce(x, kind, axis), rg))
    }

    /// Sum of all elements.
    pub fn sum(&mut self, x: Var) -> Var {
        self.reduce(x, ReduceKind::Sum, None)
            .expect("sum of an empty tensor")
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, ReduceKind::Sum, Some(axis))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, ReduceKind::Mean, None)
    }

    // ---- structural --------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Gather rows of a 2-D tensor.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(x, "select_rows")?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::invalid(format!("row {bad} out of range for {r} rows")));
        }
        let src = self.value(x).data();
        let data = rows
            .iter()
            .flat_map(|&i| src[i * c..(i + 1) * c].iter().copied())
            .collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![rows.len(), c], data)?,
            Op::SelectRows(x, rows.to_vec()),
            rg,
        ))
    }

    /// Contiguous row range `start..end` of a 2-D tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_rows")?;
        if start > end || end > r {
            return Err(Error::invalid(format!("rows {start}..{end} out of range for {r} rows")));
        }
        let data = self.value(x).data()[start * c..end * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![end - start, c], data)?,
            Op::SliceRows(x, start),
            rg,
        ))
    }

    /// Same-padded, stride-1 convolution: `x` is `[B, H, W, Cin]`, `w` is
    /// `[k, k, Cin, Cout]` with odd `k`, `b` is `[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let sb = self.shape(b).to_vec();
        let (&[batch, height, width, c_in], &[k, k2, wc_in, c_out]) = (sx.as_slice(), sw.as_slice())
        else {
            return Err(Error::Shape {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        };
        if k != k2 || k % 2 == 0 || wc_in != c_in || sb != [c_out] {
            return Err(Error::Shape {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let geom = ConvGeom {
            batch,
            height,
            width,
            c_in,
            c_out,
            kernel: k,
        };
        let data = kernels::conv2d_forward(
            geom,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![batch, height, width, c_out], data)?,
            Op::Conv2d { x, w, b, geom },
            rg,
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Propagate d`loss`/d(node) to every node on the gradient path.
    ///
    /// Nodes are visited once each, newest first. Running backward a second
    /// time on the same graph is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (id, g) in grads.iter_mut().enumerate() {
            if !self.nodes[id].requires_grad {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                self.acc_unbroadcast(grads, *a, out_shape, g.iter().copied());
                self.acc_unbroadcast(grads, *b, out_shape, g.iter().map(|&v| v * sign));
            }
            Op::Mul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                let ma = broadcast_index_map(sa, out_shape);
                let mb = broadcast_index_map(sb, out_shape);
                if self.rg(*a) {
                    let contrib = g.iter().zip(&mb).map(|(&gv, &j)| gv * db[j]);
                    self.acc_unbroadcast(grads, *a, out_shape, contrib);
                }
                if self.rg(*b) {
                    let contrib = g.iter().zip(&ma).map(|(&gv, &i)| gv * da[i]);
                    self.acc_unbroadcast(grads, *b, out_shape, contrib);
                }
            }
            Op::Scale(x, c) => self.acc(grads, *x, g.iter().map(|&v| v * *c)),
            Op::Abs(x) => {
                let xs = self.value(*x).data();
                self.acc(grads, *x, g.iter().zip(xs).map(|(&gv, &v)| gv * sign(v)));
            }
            Op::Square(x) => {
                let xs = self.value(*x).data();
                let two = T::from_f64(2.0);
                self.acc(grads, *x, g.iter().zip(xs).map(|(&gv, &v)| gv * two * v));
            }
            Op::Relu(x) => {
                let xs = self.value(*x).data();
                self.acc(
                    grads,
                    *x,
                    g.iter()
                        .zip(xs)
                        .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() }),
                );
            }
            Op::ReluMax(x, t) => {
                let xs = self.value(*x).data();
                self.acc(
                    grads,
                    *x,
                    g.iter()
                        .zip(xs)
                        .map(|(&gv, &v)| if v > *t { gv } else { T::zero() }),
                );
            }
            Op::BroadcastTo(x) => self.acc_unbroadcast(grads, *x, out_shape, g.iter().copied()),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.rg(*a) {
                    let bt = kernels::transpose(self.value(*b).data(), k, n);
                    let da = kernels::matmul(g, &bt, m, n, k);
                    self.acc(grads, *a, da.into_iter());
                }
                if self.rg(*b) {
                    let at = kernels::transpose(self.value(*a).data(), m, k);
                    let db = kernels::matmul(&at, g, k, m, n);
                    self.acc(grads, *b, db.into_iter());
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (out_shape[0], out_shape[1]);
                self.acc(grads, *x, kernels::transpose(g, r, c).into_iter());
            }
            Op::Softmax(x, axis) => {
                let y = node.value.data();
                let (outer, n, inner) = axis_split(out_shape, *axis);
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let s: T = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..n {
                            dx[idx(j)] = y[idx(j)] * (g[idx(j)] - s);
                        }
                    }
                }
                self.acc(grads, *x, dx.into_iter());
            }
            Op::LogSoftmax(x, axis) => {
                let y = node.value.data();
                let (outer, n, inner) = axis_split(out_shape, *axis);
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let s: T = (0..n).map(|j| g[idx(j)]).sum();
                        for j in 0..n {
                            dx[idx(j)] = g[idx(j)] - y[idx(j)].exp() * s;
                        }
                    }
                }
                self.acc(grads, *x, dx.into_iter());
            }
            Op::Reduce(x, kind, axis) => {
                let in_shape = self.shape(*x);
                let numel: usize = in_shape.iter().product();
                let (dx, count) = match axis {
                    None => (vec![g[0]; numel], numel),
                    Some(axis) => {
                        let (outer, n, inner) = axis_split(in_shape, *axis);
                        let mut dx = vec![T::zero(); numel];
                        for o in 0..outer {
                            for j in 0..n {
                                dx[(o * n + j) * inner..(o * n + j + 1) * inner]
                                    .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                            }
                        }
                        (dx, n)
                    }
                };
                let scale = match kind {
                    ReduceKind::Sum => T::one(),
                    ReduceKind::Mean => T::one() / T::from_f64(count as f64),
                };
                self.acc(grads, *x, dx.into_iter().map(|v| v * scale));
            }
            Op::Reshape(x) => self.acc(grads, *x, g.iter().copied()),
            Op::SelectRows(x, rows) => {
                if !self.rg(*x) {
                    return;
                }
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut dx = vec![T::zero(); r * c];
                for (k, &row) in rows.iter().enumerate() {
                    for j in 0..c {
                        dx[row * c + j] = dx[row * c + j] + g[k * c + j];
                    }
                }
                self.acc(grads, *x, dx.into_iter());
            }
            Op::SliceRows(x, start) => {
                if !self.rg(*x) {
                    return;
                }
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut dx = vec![T::zero(); r * c];
                dx[start * c..start * c + g.len()].copy_from_slice(g);
                self.acc(grads, *x, dx.into_iter());
            }
            Op::Conv2d { x, w, b, geom } => {
                let cg = kernels::conv2d_backward(
                    *geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                );
                self.acc(grads, *x, cg.dx.into_iter());
                self.acc(grads, *w, cg.dw.into_iter());
                self.acc(grads, *b, cg.db.into_iter());
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: impl Iterator<Item = T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e = *e + c;
                }
            }
            slot @ None => *slot = Some(contrib.collect()),
        }
    }

    /// Accumulate an output-shaped gradient into `v`, summing over the
    /// dimensions `v` was broadcast along.
    fn acc_unbroadcast(
        &self,
        grads: &mut [Option<Vec<T>>],
        v: Var,
        out_shape: &[usize],
        contrib: impl Iterator<Item = T>,
    ) {
        if !self.rg(v) {
            return;
        }
        let src_shape = self.shape(v);
        if src_shape == out_shape {
            self.acc(grads, v, contrib);
            return;
        }
        let map = broadcast_index_map(src_shape, out_shape);
        let mut reduced = vec![T::zero(); self.value(v).len()];
        for (&i, c) in map.iter().zip(contrib) {
            reduced[i] = reduced[i] + c;
        }
        self.acc(grads, v, reduced.into_iter());
    }
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}
