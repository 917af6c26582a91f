use std::collections::BTreeMap;

use super::array::{gemm, Array};
use super::{Grads, Params};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add { a: Var, b: Var, bcast: bool },
    Sub { a: Var, b: Var, bcast: bool },
    Mul { a: Var, b: Var, bcast: bool },
    Scale { a: Var, c: f64 },
    AddScalar { a: Var },
    Relu { a: Var },
    Tanh { a: Var },
    Sigmoid { a: Var },
    Exp { a: Var },
    Log { a: Var },
    Softmax { a: Var },
    LogSoftmax { a: Var },
    LayerNorm { a: Var, inv_std: Vec<f64> },
    Gather { a: Var, index: Vec<Option<usize>> },
    Concat { parts: Vec<Var> },
    SliceCols { a: Var, start: usize },
    ConcatRows { parts: Vec<Var> },
    SliceRows { a: Var, start: usize },
    Reshape { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    Clamp { a: Var, lo: f64, hi: f64 },
    Minimum { a: Var, b: Var },
}

#[derive(Clone, Debug)]
struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Eager recording of primitive operations for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so the record is topologically
/// sorted by construction. Gradients exist only after [`Tape::backward`].
#[derive(Default, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Array>>>,
}

/// Parameters registered on a tape, by name.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Panics if `name` was not bound; parameter names are fixed by the model
    /// constructors so a miss is a programming error.
    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(&v) => v,
            None => panic!("parameter `{name}` not bound on tape"),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

fn shape_err(op: &'static str, lhs: &Array, rhs: &Array) -> Error {
    Error::Shape {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Array, op: Op, requires_grad: bool) -> Var {
        self.grads = None;
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

    /// Trainable input.
    pub fn leaf(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Registers every parameter as a trainable leaf.
    pub fn bind(&mut self, params: &Params) -> Bound {
        let vars = params
            .iter()
            .map(|(name, value)| (name.clone(), self.leaf(value.clone())))
            .collect();
        Bound { vars }
    }

    /// Registers every parameter as a constant.
    pub fn bind_frozen(&mut self, params: &Params) -> Bound {
        let vars = params
            .iter()
            .map(|(name, value)| (name.clone(), self.constant(value.clone())))
            .collect();
        Bound { vars }
    }

    // ---- primitives ----

    fn matmul_impl(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let value = gemm(self.value(a), ta, self.value(b), tb, "matmul")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul { a, b, ta, tb }, rg))
    }

    /// `a · b` for rank-2 operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, false, b, false)
    }

    /// `a · bᵀ` for rank-2 operands.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, false, b, true)
    }

    /// `aᵀ · b` for rank-2 operands.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, true, b, false)
    }

    /// Same shapes, or `b` of shape `[cols]` broadcast over the rows of `a`.
    fn binary_bcast(&self, op: &'static str, a: Var, b: Var) -> Result<bool> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() == vb.shape() {
            Ok(false)
        } else if vb.rank() == 1 && va.rank() >= 1 && vb.len() == va.cols() {
            Ok(true)
        } else {
            Err(shape_err(op, va, vb))
        }
    }

    fn elementwise2(&mut self, a: Var, b: Var, bcast: bool, f: impl Fn(f64, f64) -> f64) -> Array {
        let (va, vb) = (self.value(a), self.value(b));
        let bd = vb.data();
        let c = va.cols().max(1);
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, if bcast { bd[i % c] } else { bd[i] }))
            .collect();
        Array::from_parts(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bcast = self.binary_bcast("add", a, b)?;
        let value = self.elementwise2(a, b, bcast, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add { a, b, bcast }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let bcast = self.binary_bcast("sub", a, b)?;
        let value = self.elementwise2(a, b, bcast, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub { a, b, bcast }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bcast = self.binary_bcast("mul", a, b)?;
        let value = self.elementwise2(a, b, bcast, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul { a, b, bcast }, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(value, Op::Scale { a, c }, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar { a }, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu { a }, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh { a }, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid { a }, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(value, Op::Exp { a }, rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push(value, Op::Log { a }, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        let rg = self.rg(a);
        self.push(value, Op::Softmax { a }, rg)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let rg = self.rg(a);
        self.push(value, Op::LogSoftmax { a }, rg)
    }

    /// Layer normalization over the last axis without affine parameters:
    /// `(x - mean) / sqrt(var + eps)` with the population variance.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let mut value = self.value(a).clone();
        let rows = value.rows();
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = value.row_mut(r);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * is);
            inv_std.push(is);
        }
        let rg = self.rg(a);
        self.push(value, Op::LayerNorm { a, inv_std }, rg)
    }

    /// Generic gather: output element `k` is `a.flat[index[k]]`, or 0 when the
    /// index is `None`.
    pub fn gather(&mut self, a: Var, index: Vec<Option<usize>>, shape: &[usize]) -> Result<Var> {
        let src = self.value(a);
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::Invalid(format!(
                "gather: {} indices for output shape {shape:?}",
                index.len()
            )));
        }
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= src.len()) {
            return Err(Error::Invalid(format!(
                "gather: index {bad} out of range for {:?}",
                src.shape()
            )));
        }
        let sd = src.data();
        let data = index.iter().map(|i| i.map_or(0.0, |i| sd[i])).collect();
        let value = Array::from_parts(shape.to_vec(), data);
        let rg = self.rg(a);
        Ok(self.push(value, Op::Gather { a, index }, rg))
    }

    /// Rows of a `[k, m]` table selected by `ids`, giving `[ids.len(), m]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::Shape {
                op: "embedding",
                lhs: t.shape().to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let (k, m) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= k) {
            return Err(Error::Invalid(format!("embedding: token {bad} >= vocab {k}")));
        }
        let index = ids
            .iter()
            .flat_map(|&id| (0..m).map(move |j| Some(id * m + j)))
            .collect();
        self.gather(table, index, &[ids.len(), m])
    }

    /// Picks one column per row: `out[r] = a[r, cols[r]]`.
    pub fn pick(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let c = v.cols();
        if v.rows() != cols.len() || cols.iter().any(|&j| j >= c) {
            return Err(Error::Shape {
                op: "pick",
                lhs: v.shape().to_vec(),
                rhs: vec![cols.len()],
            });
        }
        let index = cols.iter().enumerate().map(|(r, &j)| Some(r * c + j)).collect();
        self.gather(a, index, &[cols.len()])
    }

    /// Concatenation along the last axis; all parts share the leading shape.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]).clone();
        let rows = first.rows();
        let mut lead = first.shape().to_vec();
        lead.pop();
        for &p in &parts[1..] {
            let v = self.value(p);
            let mut l = v.shape().to_vec();
            l.pop();
            if l != lead {
                return Err(shape_err("concat", &first, v));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Array::from_parts(shape, data), Op::Concat { parts: parts.to_vec() }, rg))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        let c = v.cols();
        if start + len > c {
            return Err(Error::Invalid(format!(
                "slice_cols: {start}..{} out of {c} columns",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(v.rows() * len);
        for r in 0..v.rows() {
            data.extend_from_slice(&v.row(r)[start..start + len]);
        }
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(a);
        Ok(self.push(Array::from_parts(shape, data), Op::SliceCols { a, start }, rg))
    }

    /// Stacks rank-2 parts with equal column counts along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let cols = first.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rank() != 2 || v.cols() != cols {
                return Err(shape_err("concat_rows", self.value(parts[0]), v));
            }
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Array::from_parts(vec![rows, cols], data),
            Op::ConcatRows { parts: parts.to_vec() },
            rg,
        ))
    }

    /// Rows `start..start + len` of a rank-2 array.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        if v.rank() != 2 || start + len > v.rows() {
            return Err(Error::Invalid(format!(
                "slice_rows: {start}..{} out of {:?}",
                start + len,
                v.shape()
            )));
        }
        let c = v.cols();
        let data = v.data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(a);
        Ok(self.push(Array::from_parts(vec![len, c], data), Op::SliceRows { a, start }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape { a }, rg))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum { a }, rg)
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let value = Array::scalar(v.sum() / v.len() as f64);
        let rg = self.rg(a);
        self.push(value, Op::Mean { a }, rg)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(value, Op::Clamp { a, lo, hi }, rg)
    }

    /// Elementwise minimum of two same-shaped arrays.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err("minimum", self.value(a), self.value(b)));
        }
        let value = self.elementwise2(a, b, false, f64::min);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Minimum { a, b }, rg))
    }

    // ---- composite helpers ----

    /// `x · w + b` for `x: [rows, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    /// Layer normalization followed by a per-feature gain and bias.
    pub fn layer_norm_affine(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let n = self.layer_norm(x, eps);
        let g = self.mul(n, gain)?;
        self.add(g, bias)
    }

    // ---- reverse pass ----

    /// Propagates `out_grad` (shaped like `out`) back through the record.
    pub fn backward(&mut self, out: Var, out_grad: Array) -> Result<()> {
        if out.0 >= self.nodes.len() {
            return Err(Error::Tape(format!(
                "backward from node {} but only {} nodes were recorded; run the forward pass first",
                out.0,
                self.nodes.len()
            )));
        }
        if self.nodes[out.0].value.shape() != out_grad.shape() {
            return Err(shape_err("backward", &self.nodes[out.0].value, &out_grad));
        }
        let mut grads: Vec<Option<Array>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(out_grad);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Backward from a scalar output with seed gradient 1.
    pub fn backward_scalar(&mut self, out: Var) -> Result<()> {
        let shape = self
            .nodes
            .get(out.0)
            .map(|n| n.value.shape().to_vec())
            .ok_or_else(|| Error::Tape("backward before forward: node not recorded".into()))?;
        self.backward(out, Array::full(&shape, 1.0))
    }

    /// Gradient of the last backward pass with respect to `v`; zeros when no
    /// path reached it.
    pub fn grad(&self, v: Var) -> Result<Array> {
        let grads = self
            .grads
            .as_ref()
            .ok_or_else(|| Error::Tape("gradients requested before backward".into()))?;
        Ok(grads
            .get(v.0)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| Array::zeros(self.nodes[v.0].value.shape())))
    }

    /// Gradients for every bound parameter.
    pub fn grads_for(&self, bound: &Bound) -> Result<Grads> {
        bound
            .iter()
            .map(|(name, &v)| Ok((name.clone(), self.grad(v)?)))
            .collect()
    }

    fn propagate(&self, i: usize, g: &Array, grads: &mut [Option<Array>]) {
        let node = &self.nodes[i];
        let acc = |grads: &mut [Option<Array>], v: Var, delta: Array| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (val(*a), val(*b));
                // shapes were validated in the forward pass
                if self.rg(*a) {
                    let da = match (ta, tb) {
                        (false, false) => gemm(g, false, vb, true, "matmul"),
                        (false, true) => gemm(g, false, vb, false, "matmul"),
                        (true, false) => gemm(vb, false, g, true, "matmul"),
                        (true, true) => gemm(vb, true, g, true, "matmul"),
                    }
                    .expect("matmul backward shapes");
                    acc(grads, *a, da);
                }
                if self.rg(*b) {
                    let db = match (ta, tb) {
                        (false, false) => gemm(va, true, g, false, "matmul"),
                        (false, true) => gemm(g, true, va, false, "matmul"),
                        (true, false) => gemm(va, false, g, false, "matmul"),
                        (true, true) => gemm(g, true, va, true, "matmul"),
                    }
                    .expect("matmul backward shapes");
                    acc(grads, *b, db);
                }
            }
            Op::Add { a, b, bcast } | Op::Sub { a, b, bcast } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                acc(grads, *a, g.clone());
                if self.rg(*b) {
                    let db = if *bcast {
                        sum_rows(g).map(|x| sign * x)
                    } else {
                        g.map(|x| sign * x)
                    };
                    acc(grads, *b, db);
                }
            }
            Op::Mul { a, b, bcast } => {
                let (va, vb) = (val(*a), val(*b));
                let c = va.cols().max(1);
                if self.rg(*a) {
                    let bd = vb.data();
                    let data = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(k, &gk)| gk * if *bcast { bd[k % c] } else { bd[k] })
                        .collect();
                    acc(grads, *a, Array::from_parts(va.shape().to_vec(), data));
                }
                if self.rg(*b) {
                    let prod = Array::from_parts(
                        va.shape().to_vec(),
                        g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect(),
                    );
                    acc(grads, *b, if *bcast { sum_rows(&prod) } else { prod });
                }
            }
            Op::Scale { a, c } => acc(grads, *a, g.map(|x| x * c)),
            Op::AddScalar { a } | Op::Reshape { a } => {
                let mut d = g.clone();
                if matches!(node.op, Op::Reshape { .. }) {
                    d = d.reshape(val(*a).shape()).expect("reshape backward");
                }
                acc(grads, *a, d)
            }
            Op::Relu { a } => acc(grads, *a, zip_map(g, val(*a), |gk, x| if x > 0.0 { gk } else { 0.0 })),
            Op::Tanh { a } => acc(grads, *a, zip_map(g, &node.value, |gk, y| gk * (1.0 - y * y))),
            Op::Sigmoid { a } => acc(grads, *a, zip_map(g, &node.value, |gk, y| gk * y * (1.0 - y))),
            Op::Exp { a } => acc(grads, *a, zip_map(g, &node.value, |gk, y| gk * y)),
            Op::Log { a } => acc(grads, *a, zip_map(g, val(*a), |gk, x| gk / x)),
            Op::Softmax { a } => {
                let y = &node.value;
                let mut d = g.clone();
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let s: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for (k, o) in d.row_mut(r).iter_mut().enumerate() {
                        *o = yr[k] * (gr[k] - s);
                    }
                }
                acc(grads, *a, d)
            }
            Op::LogSoftmax { a } => {
                let y = &node.value;
                let mut d = g.clone();
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let s: f64 = gr.iter().sum();
                    for (k, o) in d.row_mut(r).iter_mut().enumerate() {
                        *o = gr[k] - yr[k].exp() * s;
                    }
                }
                acc(grads, *a, d)
            }
            Op::LayerNorm { a, inv_std } => {
                let y = &node.value;
                let mut d = g.clone();
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let n = yr.len() as f64;
                    let mg = gr.iter().sum::<f64>() / n;
                    let mgy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / n;
                    for (k, o) in d.row_mut(r).iter_mut().enumerate() {
                        *o = inv_std[r] * (gr[k] - mg - yr[k] * mgy);
                    }
                }
                acc(grads, *a, d)
            }
            Op::Gather { a, index } => {
                let mut d = Array::zeros(val(*a).shape());
                let dd = d.data_mut();
                for (k, ix) in index.iter().enumerate() {
                    if let Some(ix) = ix {
                        dd[*ix] += g.data()[k];
                    }
                }
                acc(grads, *a, d)
            }
            Op::Concat { parts } => {
                let rows = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let vp = val(p);
                    let c = vp.cols();
                    if self.rg(p) {
                        let mut data = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            data.extend_from_slice(&g.row(r)[offset..offset + c]);
                        }
                        acc(grads, p, Array::from_parts(vp.shape().to_vec(), data));
                    }
                    offset += c;
                }
            }
            Op::SliceCols { a, start } => {
                let va = val(*a);
                let mut d = Array::zeros(va.shape());
                let len = g.cols();
                for r in 0..g.rows() {
                    d.row_mut(r)[*start..*start + len].copy_from_slice(g.row(r));
                }
                acc(grads, *a, d)
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    if self.rg(p) {
                        let d = g.data()[offset..offset + n].to_vec();
                        acc(grads, p, Array::from_parts(val(p).shape().to_vec(), d));
                    }
                    offset += n;
                }
            }
            Op::SliceRows { a, start } => {
                let va = val(*a);
                let mut d = Array::zeros(va.shape());
                let c = va.cols();
                d.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                acc(grads, *a, d)
            }
            Op::Sum { a } => acc(grads, *a, Array::full(val(*a).shape(), g.item())),
            Op::Mean { a } => {
                let va = val(*a);
                acc(grads, *a, Array::full(va.shape(), g.item() / va.len() as f64))
            }
            Op::Clamp { a, lo, hi } => acc(
                grads,
                *a,
                zip_map(g, val(*a), |gk, x| if x >= *lo && x <= *hi { gk } else { 0.0 }),
            ),
            Op::Minimum { a, b } => {
                let (va, vb) = (val(*a), val(*b));
                let pick_a: Vec<bool> = va.data().iter().zip(vb.data()).map(|(x, y)| x <= y).collect();
                let da = g.data().iter().zip(&pick_a).map(|(&gk, &p)| if p { gk } else { 0.0 });
                let db = g.data().iter().zip(&pick_a).map(|(&gk, &p)| if p { 0.0 } else { gk });
                acc(grads, *a, Array::from_parts(va.shape().to_vec(), da.collect()));
                acc(grads, *b, Array::from_parts(vb.shape().to_vec(), db.collect()));
            }
        }
    }
}

fn zip_map(g: &Array, x: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    Array::from_parts(
        x.shape().to_vec(),
        g.data().iter().zip(x.data()).map(|(&a, &b)| f(a, b)).collect(),
    )
}

fn sum_rows(g: &Array) -> Array {
    let c = g.cols();
    let mut out = vec![0.0; c];
    for r in 0..g.rows() {
        for (o, x) in out.iter_mut().zip(g.row(r)) {
            *o += x;
        }
    }
    Array::vector(out)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Numerically stable softmax (max subtracted before exponentiation).
pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    xs.iter_mut().for_each(|x| *x /= total);
}
