//! Tape-based reverse-mode differentiation.
//!
//! Every primitive appends a node holding its forward value. Nodes whose
//! operands need no gradient are stored as constants, so the backward sweep
//! only visits the part of the graph that leads to a trainable leaf.

use crate::element::Element;
use crate::error::{AutogradError, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction extent for `sum` and `mean`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    /// Collapse everything to a rank-0 scalar.
    All,
    /// Reduce the last dimension, keeping it with size 1.
    LastKeepDim,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    Exp(Var),
    Relu(Var),
    Sum(Var, Reduce),
    Mean(Var, Reduce),
    Gather { table: Var, ids: Vec<usize> },
    Transpose(Var),
    LayerNorm { input: Var, rstd: Vec<T> },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    StraightThrough { input: Var },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Ordered record of primitive applications. Operands always precede the
/// nodes that consume them, so a reverse sweep is a valid topological order.
#[derive(Clone, Debug, Default)]
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Leaves with `requires_grad` receive
    /// gradients from [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- elementwise binary ----------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: impl Fn(Var, Var) -> Op<T>,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let map = broadcast_map(name, va.shape(), vb.shape())?;
        let (da, db) = (va.data(), vb.data());
        let data: Vec<T> = match &map {
            None => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            Some(m) => da.iter().zip(m).map(|(&x, &j)| f(x, db[j])).collect(),
        };
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, op(a, b), rg))
    }

    // ---- linear algebra ----------------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(AutogradError::Shape {
                op: "matmul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, va.data(), false, vb.data(), false, T::zero(), &mut out);
        let value = Tensor::new([m, n], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Swaps the last two dimensions.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.rank() < 2 {
            return Err(AutogradError::InvalidArgument {
                op: "transpose",
                msg: format!("needs rank >= 2, got shape {:?}", va.shape()),
            });
        }
        let value = transpose_last_two(va);
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    // ---- elementwise unary -------------------------------------------------

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::cast_from(c);
        let value = self.value(a).map(|x| x * c);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.ln());
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Log(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.exp());
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    // ---- row-wise ----------------------------------------------------------

    /// Softmax over the last dimension, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let d = va.last_dim();
        let mut out = va.data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let value = Tensor::new(va.shape().to_vec(), out).expect("same shape");
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Softmax(a), rg)
    }

    /// `log(softmax(x))` over the last dimension without forming the
    /// probabilities, so saturated logits stay finite.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let d = va.last_dim();
        let mut out = va.data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let lse = row
                .iter()
                .map(|&x| (x - max).as_f64().exp())
                .sum::<f64>()
                .ln();
            let shift = max.as_f64() + lse;
            for x in row.iter_mut() {
                *x = T::cast_from(x.as_f64() - shift);
            }
        }
        let value = Tensor::new(va.shape().to_vec(), out).expect("same shape");
        let rg = self.any_grad(&[a]);
        self.push(value, Op::LogSoftmax(a), rg)
    }

    /// Normalizes the last dimension to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let va = self.value(a);
        let d = va.last_dim();
        let mut out = va.data().to_vec();
        let mut rstds = Vec::with_capacity(va.rows());
        for row in out.chunks_mut(d) {
            let mean = row.iter().map(|x| x.as_f64()).sum::<f64>() / d as f64;
            let var = row
                .iter()
                .map(|x| (x.as_f64() - mean).powi(2))
                .sum::<f64>()
                / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = T::cast_from((x.as_f64() - mean) * rstd);
            }
            rstds.push(T::cast_from(rstd));
        }
        let value = Tensor::new(va.shape().to_vec(), out).expect("same shape");
        let rg = self.any_grad(&[a]);
        self.push(value, Op::LayerNorm { input: a, rstd: rstds }, rg)
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, a: Var, reduce: Reduce) -> Var {
        let value = reduce_value(self.value(a), reduce, false);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Sum(a, reduce), rg)
    }

    pub fn mean(&mut self, a: Var, reduce: Reduce) -> Var {
        let value = reduce_value(self.value(a), reduce, true);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Mean(a, reduce), rg)
    }

    // ---- indexing ----------------------------------------------------------

    /// Selects rows of a `[n, d]` table: result is `[ids.len(), d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        if vt.rank() != 2 {
            return Err(AutogradError::InvalidArgument {
                op: "gather",
                msg: format!("table must be rank 2, got shape {:?}", vt.shape()),
            });
        }
        let (n, d) = (vt.shape()[0], vt.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(AutogradError::InvalidArgument {
                op: "gather",
                msg: format!("index {bad} out of range for table with {n} rows"),
            });
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(vt.row(i));
        }
        let value = Tensor::new([ids.len(), d], out)?;
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Joins tensors along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or(AutogradError::Arity {
            op: "concat",
            expected: 1,
            got: 0,
        })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(AutogradError::InvalidArgument {
                op: "concat",
                msg: format!("axis {axis} out of range for shape {base:?}"),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(AutogradError::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Takes `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(AutogradError::InvalidArgument {
                op: "slice",
                msg: format!("range {start}..{end} on axis {axis} invalid for shape {shape:?}"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let (full, len) = (shape[axis] * inner, (end - start) * inner);
        let mut out = Vec::with_capacity(outer * len);
        for o in 0..outer {
            let base = o * full + start * inner;
            out.extend_from_slice(&va.data()[base..base + len]);
        }
        let mut new_shape = shape;
        new_shape[axis] = end - start;
        let value = Tensor::new(new_shape, out)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Slice { input: a, axis, start }, rg))
    }

    // ---- gradient routing --------------------------------------------------

    /// Identity on values; blocks every gradient into `a`.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::Leaf, false)
    }

    /// Forwards the value of `quantized` while sending the incoming gradient
    /// to `input` unchanged. `quantized` itself receives nothing on this path.
    pub fn straight_through(&mut self, input: Var, quantized: Var) -> Result<Var> {
        let (vi, vq) = (self.value(input), self.value(quantized));
        if vi.shape() != vq.shape() {
            return Err(AutogradError::Shape {
                op: "straight_through",
                lhs: vi.shape().to_vec(),
                rhs: vq.shape().to_vec(),
            });
        }
        let value = vq.clone();
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::StraightThrough { input }, rg))
    }

    // ---- backward ----------------------------------------------------------

    /// Propagates d(loss)/d(node) back to every leaf that requires a
    /// gradient, adding into any gradient already stored there.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(AutogradError::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                let slot = &mut self.nodes[i].grad;
                match slot {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    None => *slot = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.iter().copied());
                self.accumulate_broadcast(grads, *b, i, g.iter().copied());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.iter().copied());
                self.accumulate_broadcast(grads, *b, i, g.iter().map(|&x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let map = self.rhs_map(*a, *b);
                let bj = |k: usize| map.as_ref().map_or(k, |m| m[k]);
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.iter().enumerate().map(|(k, &x)| x * vb[bj(k)]));
                }
                if self.requires_grad(*b) {
                    self.accumulate_broadcast(grads, *b, i, g.iter().zip(va).map(|(&x, &y)| x * y));
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let map = self.rhs_map(*a, *b);
                let bj = |k: usize| map.as_ref().map_or(k, |m| m[k]);
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.iter().enumerate().map(|(k, &x)| x / vb[bj(k)]));
                }
                if self.requires_grad(*b) {
                    let it = g.iter().enumerate().map(|(k, &x)| {
                        let d = vb[bj(k)];
                        -x * va[k] / (d * d)
                    });
                    self.accumulate_broadcast(grads, *b, i, it);
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.requires_grad(*a) {
                    let slot = slot(grads, *a, m * k);
                    T::gemm(m, n, k, g, false, vb.data(), true, T::one(), slot);
                }
                if self.requires_grad(*b) {
                    let slot = slot(grads, *b, k * n);
                    T::gemm(k, m, n, va.data(), true, g, false, T::one(), slot);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.iter().map(|&x| x * *c)),
            Op::Sigmoid(a) => self.accumulate(
                grads,
                *a,
                g.iter().zip(out).map(|(&x, &y)| x * y * (T::one() - y)),
            ),
            Op::Log(a) => {
                let va = self.value(*a).data();
                self.accumulate(grads, *a, g.iter().zip(va).map(|(&x, &y)| x / y));
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.iter().zip(out).map(|(&x, &y)| x * y)),
            Op::Relu(a) => {
                let va = self.value(*a).data();
                self.accumulate(
                    grads,
                    *a,
                    g.iter()
                        .zip(va)
                        .map(|(&x, &y)| if y > T::zero() { x } else { T::zero() }),
                );
            }
            Op::Softmax(a) => {
                let d = node.value.last_dim();
                let mut dx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(d).zip(out.chunks(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(&x, &y)| (x * y).as_f64()).sum();
                    let dot = T::cast_from(dot);
                    dx.extend(gr.iter().zip(yr).map(|(&x, &y)| y * (x - dot)));
                }
                self.accumulate(grads, *a, dx.into_iter());
            }
            Op::LogSoftmax(a) => {
                let d = node.value.last_dim();
                let mut dx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(d).zip(out.chunks(d)) {
                    let total = T::cast_from(gr.iter().map(|x| x.as_f64()).sum());
                    dx.extend(gr.iter().zip(yr).map(|(&x, &y)| x - y.exp() * total));
                }
                self.accumulate(grads, *a, dx.into_iter());
            }
            Op::LayerNorm { input, rstd } => {
                let d = node.value.last_dim();
                let mut dx = Vec::with_capacity(g.len());
                for ((gr, xr), &r) in g.chunks(d).zip(out.chunks(d)).zip(rstd) {
                    let mg = gr.iter().map(|x| x.as_f64()).sum::<f64>() / d as f64;
                    let mgx = gr
                        .iter()
                        .zip(xr)
                        .map(|(&x, &y)| (x * y).as_f64())
                        .sum::<f64>()
                        / d as f64;
                    let r = r.as_f64();
                    dx.extend(
                        gr.iter()
                            .zip(xr)
                            .map(|(&x, &y)| T::cast_from(r * (x.as_f64() - mg - y.as_f64() * mgx))),
                    );
                }
                self.accumulate(grads, *input, dx.into_iter());
            }
            Op::Sum(a, reduce) | Op::Mean(a, reduce) => {
                let va = self.value(*a);
                let n = match reduce {
                    Reduce::All => va.numel(),
                    Reduce::LastKeepDim => va.last_dim(),
                };
                let factor = if matches!(node.op, Op::Mean(..)) {
                    T::cast_from(1.0 / n as f64)
                } else {
                    T::one()
                };
                let it = (0..va.numel()).map(|k| g[k / n] * factor);
                self.accumulate(grads, *a, it);
            }
            Op::Gather { table, ids } => {
                let vt = self.value(*table);
                let d = vt.shape()[1];
                let slot = slot(grads, *table, vt.numel());
                for (r, &id) in ids.iter().enumerate() {
                    for (dst, &src) in slot[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *dst = *dst + src;
                    }
                }
            }
            Op::Transpose(a) => {
                let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec()).expect("grad shape");
                let back = transpose_last_two(&gt);
                self.accumulate(grads, *a, back.into_data().into_iter());
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let full = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = self.shape(v)[*axis] * inner;
                    if self.requires_grad(v) {
                        let it = (0..outer).flat_map(|o| {
                            let base = o * full + offset;
                            g[base..base + chunk].iter().copied()
                        });
                        self.accumulate(grads, v, it);
                    }
                    offset += chunk;
                }
            }
            Op::Slice { input, axis, start } => {
                let in_shape = self.shape(*input).to_vec();
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let full = in_shape[*axis] * inner;
                let len = node.value.shape()[*axis] * inner;
                let slot = slot(grads, *input, outer * full);
                for o in 0..outer {
                    let base = o * full + start * inner;
                    for (dst, &src) in slot[base..base + len].iter_mut().zip(&g[o * len..(o + 1) * len]) {
                        *dst = *dst + src;
                    }
                }
            }
            Op::StraightThrough { input } => self.accumulate(grads, *input, g.iter().copied()),
        }
    }

    fn rhs_map(&self, a: Var, b: Var) -> Option<Vec<usize>> {
        broadcast_map("", self.shape(a), self.shape(b)).expect("checked in forward")
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, it: impl Iterator<Item = T>) {
        if !self.requires_grad(v) {
            return;
        }
        let n = self.value(v).numel();
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(it).for_each(|(a, b)| *a = *a + b),
            slot @ None => {
                let fresh: Vec<T> = it.collect();
                debug_assert_eq!(fresh.len(), n);
                *slot = Some(fresh);
            }
        }
    }

    /// Accumulates a gradient shaped like node `out` into the (possibly
    /// broadcast) right operand `b`.
    fn accumulate_broadcast(
        &self,
        grads: &mut [Option<Vec<T>>],
        b: Var,
        out: usize,
        it: impl Iterator<Item = T>,
    ) {
        if !self.requires_grad(b) {
            return;
        }
        let out_shape = self.nodes[out].value.shape();
        match broadcast_map("", out_shape, self.shape(b)).expect("checked in forward") {
            None => self.accumulate(grads, b, it),
            Some(map) => {
                let n = self.value(b).numel();
                let mut acc = vec![0.0f64; n];
                for (k, x) in it.enumerate() {
                    acc[map[k]] += x.as_f64();
                }
                self.accumulate(grads, b, acc.into_iter().map(T::cast_from));
            }
        }
    }
}

fn slot<T: Element>(grads: &mut [Option<Vec<T>>], v: Var, n: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
}

/// For a right operand broadcast against `lhs`, the rhs flat index of every
/// lhs element. `None` means the shapes are identical.
fn broadcast_map(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Option<Vec<usize>>> {
    if lhs == rhs {
        return Ok(None);
    }
    let err = || AutogradError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    };
    if rhs.len() > lhs.len() {
        return Err(err());
    }
    let pad = lhs.len() - rhs.len();
    let mut rhs_strides = vec![0usize; lhs.len()];
    let mut stride = 1;
    for i in (0..rhs.len()).rev() {
        let (l, r) = (lhs[pad + i], rhs[i]);
        if r == l {
            rhs_strides[pad + i] = stride;
        } else if r != 1 {
            return Err(err());
        }
        stride *= r;
    }
    let n: usize = lhs.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; lhs.len()];
    for _ in 0..n {
        map.push(idx.iter().zip(&rhs_strides).map(|(i, s)| i * s).sum());
        for d in (0..lhs.len()).rev() {
            idx[d] += 1;
            if idx[d] < lhs[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(Some(map))
}

fn transpose_last_two<T: Element>(t: &Tensor<T>) -> Tensor<T> {
    let shape = t.shape();
    let r = shape.len();
    let (rows, cols) = (shape[r - 2], shape[r - 1]);
    let batch = t.numel() / (rows * cols).max(1);
    let mut out = vec![T::zero(); t.numel()];
    let src = t.data();
    for b in 0..batch {
        let base = b * rows * cols;
        for i in 0..rows {
            for j in 0..cols {
                out[base + j * rows + i] = src[base + i * cols + j];
            }
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape.swap(r - 2, r - 1);
    Tensor::new(new_shape, out).expect("same numel")
}

fn reduce_value<T: Element>(t: &Tensor<T>, reduce: Reduce, mean: bool) -> Tensor<T> {
    match reduce {
        Reduce::All => {
            let s: f64 = t.data().iter().map(|x| x.as_f64()).sum();
            let s = if mean { s / t.numel() as f64 } else { s };
            Tensor::scalar(T::cast_from(s))
        }
        Reduce::LastKeepDim => {
            let d = t.last_dim();
            let data = t
                .data()
                .chunks(d)
                .map(|row| {
                    let s: f64 = row.iter().map(|x| x.as_f64()).sum();
                    T::cast_from(if mean { s / d as f64 } else { s })
                })
                .collect();
            let mut shape = t.shape().to_vec();
            match shape.last_mut() {
                Some(last) => *last = 1,
                None => shape.push(1),
            }
            Tensor::new(shape, data).expect("reduced shape")
        }
    }
}

pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_in_place<T: Element>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut total = 0.0f64;
    for x in row.iter_mut() {
        let e = (*x - max).exp();
        total += e.as_f64();
        *x = e;
    }
    let inv = T::cast_from(1.0 / total);
    for x in row.iter_mut() {
        *x = *x * inv;
    }
}
