//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node to a [`Tape`]; a node only ever refers to
//! nodes recorded before it, so walking the tape from the end visits nodes in
//! reverse topological order. Parameters enter the tape as leaves and their
//! gradients are read back with [`Tape::grad`] after [`Tape::backward`].
//!
//! Broadcasting is limited to the trailing-axis form: the smaller operand's
//! shape must be a suffix of the larger one (a single-element operand
//! broadcasts everywhere).

use crate::error::{Error, Result};
use crate::tensor::{axis_split, Real, Tensor};

/// Normalization guard used by [`Tape::l2_normalize`].
pub const NORM_EPS: f64 = 1e-8;
/// Variance guard used by [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Bmm(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var, usize),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Gelu(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm { x: Var, axis: usize, inv_std: Vec<T> },
    L2Normalize { x: Var, axis: usize, norms: Vec<T> },
    SelectRows(Var, Vec<usize>),
    ScatterRows { target: Var, values: Var, rows: Vec<usize> },
    IndexAddRows { target: Var, values: Var, rows: Vec<usize> },
    RowScale(Var, Var),
    GatherCols(Var, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of operations and their values.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v`'s value with the gradient path cut.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- elementwise binary ----

    fn broadcast_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (na, nb) = (self.value(a).numel(), self.value(b).numel());
        if sa == sb {
            return Ok(sa.to_vec());
        }
        if nb == 1 {
            return Ok(sa.to_vec());
        }
        if na == 1 {
            return Ok(sb.to_vec());
        }
        if sa.len() >= sb.len() && sa.ends_with(sb) {
            return Ok(sa.to_vec());
        }
        if sb.len() > sa.len() && sb.ends_with(sa) {
            return Ok(sb.to_vec());
        }
        Err(Error::shape(op, sa, sb))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let shape = self.broadcast_shape(name, a, b)?;
        let n: usize = shape.iter().product();
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let (la, lb) = (da.len(), db.len());
        let mut data = Vec::with_capacity(n);
        if la == n && lb == n {
            data.extend(da.iter().zip(db).map(|(&x, &y)| f(x, y)));
        } else if la == n {
            for chunk in da.chunks_exact(lb) {
                data.extend(chunk.iter().zip(db).map(|(&x, &y)| f(x, y)));
            }
        } else {
            for chunk in db.chunks_exact(la) {
                data.extend(da.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Batched product of `[b, m, k]` and `[b, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                false,
                &db[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                T::zero(),
            );
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new([batch, m, n], out)?, Op::Bmm(a, b), rg))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", &shape, perm));
        }
        let value = permute_tensor(self.value(a), perm);
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Permute(a, perm.to_vec()), rg))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::shape("transpose", self.shape(a), &[]));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = T::cast(v.numel().max(1) as f64);
        let s: T = v.data().iter().copied().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s / n), Op::MeanAll(a), rg)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", &shape, &[axis]));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + src[base + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::SumAxis(a, axis), rg))
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| Error::shape("mean_axis", self.shape(a), &[axis]))?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, T::one() / T::cast(n.max(1) as f64)))
    }

    // ---- elementwise unary ----

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).map(f);
        let rg = self.any_grad(&[a]);
        self.push(value, op, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, T::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, T::ln, Op::Log(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu_value, Op::Gelu(a))
    }

    // ---- axis-wise normalizers ----

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let shape = self.shape(a);
        if axis >= shape.len() {
            return Err(Error::shape(op, shape, &[axis]));
        }
        Ok(axis_split(shape, axis))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = self.check_axis("softmax", a, axis)?;
        let mut out = self.value(a).clone();
        for_each_lane(out.data_mut(), outer, n, inner, |lane| {
            let m = lane.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut z = T::zero();
            for x in lane.iter_mut() {
                *x = (*x - m).exp();
                z = z + *x;
            }
            for x in lane.iter_mut() {
                *x = *x / z;
            }
        });
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Softmax(a, axis), rg))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = self.check_axis("log_softmax", a, axis)?;
        let mut out = self.value(a).clone();
        for_each_lane(out.data_mut(), outer, n, inner, |lane| {
            let m = lane.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let lse = m + lane.iter().map(|&x| (x - m).exp()).sum::<T>().ln();
            for x in lane.iter_mut() {
                *x = *x - lse;
            }
        });
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::LogSoftmax(a, axis), rg))
    }

    /// Zero-mean, unit-variance normalization along `axis` (no affine terms).
    pub fn layer_norm(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = self.check_axis("layer_norm", a, axis)?;
        let eps = T::cast(LAYER_NORM_EPS);
        let mut out = self.value(a).clone();
        let mut inv_std = Vec::with_capacity(outer * inner);
        for_each_lane(out.data_mut(), outer, n, inner, |lane| {
            let nn = T::cast(lane.len() as f64);
            let mu = lane.iter().copied().sum::<T>() / nn;
            let var = lane.iter().map(|&x| (x - mu) * (x - mu)).sum::<T>() / nn;
            let r = T::one() / (var + eps).sqrt();
            for x in lane.iter_mut() {
                *x = (*x - mu) * r;
            }
            inv_std.push(r);
        });
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::LayerNorm { x: a, axis, inv_std }, rg))
    }

    /// `x / (‖x‖ + ε)` along `axis`.
    pub fn l2_normalize(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = self.check_axis("l2_normalize", a, axis)?;
        let eps = T::cast(NORM_EPS);
        let mut out = self.value(a).clone();
        let mut norms = Vec::with_capacity(outer * inner);
        for_each_lane(out.data_mut(), outer, n, inner, |lane| {
            let norm = lane.iter().map(|&x| x * x).sum::<T>().sqrt();
            let d = norm + eps;
            for x in lane.iter_mut() {
                *x = *x / d;
            }
            norms.push(norm);
        });
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::L2Normalize { x: a, axis, norms }, rg))
    }

    // ---- row routing ----

    /// Rows of a rank ≥ 1 tensor picked by index (repeats allowed).
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (n, _) = self.value(a).rows_cols();
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::shape("select_rows", self.shape(a), &[bad]));
        }
        let value = self.value(a).select_rows(rows);
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::SelectRows(a, rows.to_vec()), rg))
    }

    /// Rows where `mask` is true, in original order.
    pub fn gather_rows(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let (n, _) = self.value(a).rows_cols();
        if mask.len() != n {
            return Err(Error::shape("gather_rows", self.shape(a), &[mask.len()]));
        }
        self.select_rows(a, &mask_indices(mask))
    }

    /// `target` with the rows where `mask` is true replaced, in order, by
    /// the rows of `values`.
    pub fn scatter_rows(&mut self, target: Var, mask: &[bool], values: Var) -> Result<Var> {
        let (n, cols) = self.value(target).rows_cols();
        let rows = mask_indices(mask);
        let (m, vcols) = self.value(values).rows_cols();
        if mask.len() != n || rows.len() != m || (m > 0 && vcols != cols) {
            return Err(Error::shape("scatter_rows", self.shape(target), self.shape(values)));
        }
        let mut out = self.value(target).clone();
        for (k, &r) in rows.iter().enumerate() {
            let src = self.value(values).row(k).to_vec();
            out.row_mut(r).copy_from_slice(&src);
        }
        let rg = self.any_grad(&[target, values]);
        Ok(self.push(out, Op::ScatterRows { target, values, rows }, rg))
    }

    /// `target` with `values[k]` added onto row `rows[k]`.
    pub fn index_add_rows(&mut self, target: Var, rows: &[usize], values: Var) -> Result<Var> {
        let (n, cols) = self.value(target).rows_cols();
        let (m, vcols) = self.value(values).rows_cols();
        if rows.len() != m || (m > 0 && vcols != cols) || rows.iter().any(|&r| r >= n) {
            return Err(Error::shape("index_add_rows", self.shape(target), self.shape(values)));
        }
        let mut out = self.value(target).clone();
        for (k, &r) in rows.iter().enumerate() {
            let src = self.value(values).row(k);
            let dst = &mut out.data_mut()[r * cols..(r + 1) * cols];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = *d + s;
            }
        }
        let rg = self.any_grad(&[target, values]);
        Ok(self.push(
            out,
            Op::IndexAddRows {
                target,
                values,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Multiplies row `i` of `x` by `g[i]`.
    pub fn row_scale(&mut self, x: Var, g: Var) -> Result<Var> {
        let (m, cols) = self.value(x).rows_cols();
        if self.value(g).numel() != m {
            return Err(Error::shape("row_scale", self.shape(x), self.shape(g)));
        }
        let mut out = self.value(x).clone();
        let gd = self.value(g).data().to_vec();
        for (i, &gi) in gd.iter().enumerate() {
            for v in &mut out.data_mut()[i * cols..(i + 1) * cols] {
                *v = *v * gi;
            }
        }
        let rg = self.any_grad(&[x, g]);
        Ok(self.push(out, Op::RowScale(x, g), rg))
    }

    /// `out[i, j] = s[i, idx[i, j]]` for `s: [n, e]`, `idx: [n, k]` (row-major).
    pub fn gather_cols(&mut self, s: Var, idx: &[usize], k: usize) -> Result<Var> {
        let shape = self.shape(s).to_vec();
        if shape.len() != 2 || idx.len() != shape[0] * k || idx.iter().any(|&j| j >= shape[1]) {
            return Err(Error::shape("gather_cols", &shape, &[idx.len(), k]));
        }
        let e = shape[1];
        let src = self.value(s).data();
        let data = idx
            .iter()
            .enumerate()
            .map(|(p, &j)| src[(p / k.max(1)) * e + j])
            .collect();
        let rg = self.any_grad(&[s]);
        Ok(self.push(Tensor::new([shape[0], k], data)?, Op::GatherCols(s, idx.to_vec()), rg))
    }

    // ---- backward ----

    /// Accumulates ∂loss/∂leaf for every trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            if matches!(self.nodes[id].op, Op::Leaf) {
                self.grads[id] = Some(g);
                continue;
            }
            self.propagate(id, &g);
        }
        Ok(())
    }

    /// Gradient of a leaf after [`Tape::backward`]; zeros when the leaf is
    /// not on a path to the loss.
    pub fn grad(&self, v: Var) -> Tensor<T> {
        let shape = self.shape(v).to_vec();
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad shape"),
            None => Tensor::zeros(shape),
        }
    }

    fn slot(&mut self, v: Var) -> Option<&mut [T]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn accumulate(&mut self, v: Var, g: &[T]) {
        if let Some(slot) = self.slot(v) {
            let n = slot.len();
            if n == g.len() {
                for (s, &x) in slot.iter_mut().zip(g) {
                    *s = *s + x;
                }
            } else {
                for chunk in g.chunks_exact(n) {
                    for (s, &x) in slot.iter_mut().zip(chunk) {
                        *s = *s + x;
                    }
                }
            }
        }
    }

    fn propagate(&mut self, id: usize, g: &[T]) {
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(a, g);
                self.accumulate(b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g);
                let neg: Vec<T> = g.iter().map(|&x| -x).collect();
                self.accumulate(b, &neg);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
                let (la, lb) = (ta.numel(), tb.numel());
                if self.requires_grad(a) {
                    let ga: Vec<T> = g.iter().enumerate().map(|(i, &x)| x * tb.data()[i % lb]).collect();
                    self.accumulate(a, &ga);
                }
                if self.requires_grad(b) {
                    let gb: Vec<T> = g.iter().enumerate().map(|(i, &x)| x * ta.data()[i % la]).collect();
                    self.accumulate(b, &gb);
                }
            }
            Op::Scale(a, c) => {
                let ga: Vec<T> = g.iter().map(|&x| x * c).collect();
                self.accumulate(a, &ga);
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.requires_grad(a) {
                    let bv = self.value(b).data().to_vec();
                    let slot = self.slot(a).unwrap();
                    T::gemm(m, n, k, g, false, &bv, true, slot, T::one());
                }
                if self.requires_grad(b) {
                    let av = self.value(a).data().to_vec();
                    let slot = self.slot(b).unwrap();
                    T::gemm(k, m, n, &av, true, g, false, slot, T::one());
                }
            }
            Op::Bmm(a, b) => {
                let (batch, m, k) = (self.shape(a)[0], self.shape(a)[1], self.shape(a)[2]);
                let n = self.shape(b)[2];
                if self.requires_grad(a) {
                    let bv = self.value(b).data().to_vec();
                    let slot = self.slot(a).unwrap();
                    for i in 0..batch {
                        T::gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &bv[i * k * n..(i + 1) * k * n],
                            true,
                            &mut slot[i * m * k..(i + 1) * m * k],
                            T::one(),
                        );
                    }
                }
                if self.requires_grad(b) {
                    let av = self.value(a).data().to_vec();
                    let slot = self.slot(b).unwrap();
                    for i in 0..batch {
                        T::gemm(
                            k,
                            m,
                            n,
                            &av[i * m * k..(i + 1) * m * k],
                            true,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &mut slot[i * k * n..(i + 1) * k * n],
                            T::one(),
                        );
                    }
                }
            }
            Op::Permute(a, perm) => {
                let out_shape = self.nodes[id].value.shape().to_vec();
                let gt = Tensor::new(out_shape, g.to_vec()).expect("grad shape");
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = permute_tensor(&gt, &inv);
                self.accumulate(a, back.data());
            }
            Op::Reshape(a) => self.accumulate(a, g),
            Op::SumAll(a) => {
                let n = self.value(a).numel();
                self.accumulate(a, &vec![g[0]; n]);
            }
            Op::MeanAll(a) => {
                let n = self.value(a).numel();
                let v = g[0] / T::cast(n.max(1) as f64);
                self.accumulate(a, &vec![v; n]);
            }
            Op::SumAxis(a, axis) => {
                let (outer, n, inner) = axis_split(self.shape(a), axis);
                let mut ga = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    for j in 0..n {
                        let base = (o * n + j) * inner;
                        ga[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(a, &ga);
            }
            Op::Exp(a) => {
                let y = self.nodes[id].value.data();
                let ga: Vec<T> = g.iter().zip(y).map(|(&d, &y)| d * y).collect();
                self.accumulate(a, &ga);
            }
            Op::Log(a) => {
                let x = self.value(a).data();
                let ga: Vec<T> = g.iter().zip(x).map(|(&d, &x)| d / x).collect();
                self.accumulate(a, &ga);
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[id].value.data();
                let ga: Vec<T> = g
                    .iter()
                    .zip(y)
                    .map(|(&d, &y)| d * y * (T::one() - y))
                    .collect();
                self.accumulate(a, &ga);
            }
            Op::Gelu(a) => {
                let x = self.value(a).data();
                let ga: Vec<T> = g.iter().zip(x).map(|(&d, &x)| d * gelu(x).1).collect();
                self.accumulate(a, &ga);
            }
            Op::Softmax(a, axis) => {
                let (outer, n, inner) = axis_split(self.shape(a), axis);
                let y = self.nodes[id].value.data().to_vec();
                let mut ga = g.to_vec();
                for_each_lane_pair(&mut ga, &y, outer, n, inner, |gl, yl| {
                    let dot: T = gl.iter().zip(yl).map(|(&d, &y)| d * y).sum();
                    for (d, &y) in gl.iter_mut().zip(yl) {
                        *d = y * (*d - dot);
                    }
                });
                self.accumulate(a, &ga);
            }
            Op::LogSoftmax(a, axis) => {
                let (outer, n, inner) = axis_split(self.shape(a), axis);
                let y = self.nodes[id].value.data().to_vec();
                let mut ga = g.to_vec();
                for_each_lane_pair(&mut ga, &y, outer, n, inner, |gl, yl| {
                    let total: T = gl.iter().copied().sum();
                    for (d, &y) in gl.iter_mut().zip(yl) {
                        *d = *d - y.exp() * total;
                    }
                });
                self.accumulate(a, &ga);
            }
            Op::LayerNorm { x, axis, inv_std } => {
                let (outer, n, inner) = axis_split(self.shape(x), axis);
                let y = self.nodes[id].value.data().to_vec();
                let mut ga = g.to_vec();
                let nn = T::cast(n as f64);
                let mut lane_no = 0;
                for_each_lane_pair(&mut ga, &y, outer, n, inner, |gl, yl| {
                    let r = inv_std[lane_no];
                    lane_no += 1;
                    let mean_g = gl.iter().copied().sum::<T>() / nn;
                    let mean_gy = gl.iter().zip(yl).map(|(&d, &y)| d * y).sum::<T>() / nn;
                    for (d, &y) in gl.iter_mut().zip(yl) {
                        *d = r * (*d - mean_g - y * mean_gy);
                    }
                });
                self.accumulate(x, &ga);
            }
            Op::L2Normalize { x, axis, norms } => {
                let (outer, n, inner) = axis_split(self.shape(x), axis);
                let xv = self.value(x).data().to_vec();
                let mut ga = g.to_vec();
                let eps = T::cast(NORM_EPS);
                let mut lane_no = 0;
                for_each_lane_pair(&mut ga, &xv, outer, n, inner, |gl, xl| {
                    let norm = norms[lane_no];
                    lane_no += 1;
                    let s = norm + eps;
                    let dot: T = gl.iter().zip(xl).map(|(&d, &x)| d * x).sum();
                    let coef = if norm > T::zero() {
                        dot / (s * s * norm)
                    } else {
                        T::zero()
                    };
                    for (d, &x) in gl.iter_mut().zip(xl) {
                        *d = *d / s - x * coef;
                    }
                });
                self.accumulate(x, &ga);
            }
            Op::SelectRows(a, rows) => {
                let (n, cols) = self.value(a).rows_cols();
                let mut ga = vec![T::zero(); n * cols];
                for (k, &r) in rows.iter().enumerate() {
                    for c in 0..cols {
                        ga[r * cols + c] = ga[r * cols + c] + g[k * cols + c];
                    }
                }
                self.accumulate(a, &ga);
            }
            Op::ScatterRows {
                target,
                values,
                rows,
            } => {
                let (_, cols) = self.value(target).rows_cols();
                if self.requires_grad(target) {
                    let mut gt = g.to_vec();
                    for &r in &rows {
                        gt[r * cols..(r + 1) * cols].fill(T::zero());
                    }
                    self.accumulate(target, &gt);
                }
                if self.requires_grad(values) {
                    let gv: Vec<T> = rows
                        .iter()
                        .flat_map(|&r| g[r * cols..(r + 1) * cols].iter().copied())
                        .collect();
                    self.accumulate(values, &gv);
                }
            }
            Op::IndexAddRows {
                target,
                values,
                rows,
            } => {
                let (_, cols) = self.value(target).rows_cols();
                self.accumulate(target, g);
                if self.requires_grad(values) {
                    let gv: Vec<T> = rows
                        .iter()
                        .flat_map(|&r| g[r * cols..(r + 1) * cols].iter().copied())
                        .collect();
                    self.accumulate(values, &gv);
                }
            }
            Op::RowScale(x, s) => {
                let (m, cols) = self.value(x).rows_cols();
                if self.requires_grad(x) {
                    let sv = self.value(s).data();
                    let gx: Vec<T> = g
                        .iter()
                        .enumerate()
                        .map(|(i, &d)| d * sv[i / cols.max(1)])
                        .collect();
                    self.accumulate(x, &gx);
                }
                if self.requires_grad(s) {
                    let xv = self.value(x).data();
                    let gs: Vec<T> = (0..m)
                        .map(|i| {
                            (0..cols)
                                .map(|c| g[i * cols + c] * xv[i * cols + c])
                                .sum()
                        })
                        .collect();
                    self.accumulate(s, &gs);
                }
            }
            Op::GatherCols(s, idx) => {
                let shape = self.shape(s).to_vec();
                let (n, e) = (shape[0], shape[1]);
                let k = idx.len() / n.max(1);
                let mut gs = vec![T::zero(); n * e];
                for (p, &j) in idx.iter().enumerate() {
                    let i = p / k.max(1);
                    gs[i * e + j] = gs[i * e + j] + g[p];
                }
                self.accumulate(s, &gs);
            }
        }
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044715;

/// `tanh` through `exp`, which is markedly cheaper than libm's `tanh`.
fn fast_tanh<T: Real>(u: T) -> T {
    let two = T::one() + T::one();
    if u.abs() > T::cast(15.0) {
        return u.signum();
    }
    T::one() - two / ((two * u).exp() + T::one())
}

fn gelu_value<T: Real>(x: T) -> T {
    let u = T::cast(GELU_C) * (x + T::cast(GELU_A) * x * x * x);
    T::cast(0.5) * x * (T::one() + fast_tanh(u))
}

/// GELU value and derivative (tanh approximation).
pub(crate) fn gelu<T: Real>(x: T) -> (T, T) {
    let c = T::cast(GELU_C);
    let a = T::cast(GELU_A);
    let half = T::cast(0.5);
    let three = T::cast(3.0);
    let u = c * (x + a * x * x * x);
    let th = fast_tanh(u);
    let value = half * x * (T::one() + th);
    let deriv = half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + three * a * x * x);
    (value, deriv)
}

pub fn mask_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect()
}

fn permute_tensor<T: Real>(t: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let shape = t.shape();
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..src.len() {
        out.push(src[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out).expect("permute preserves numel")
}

/// Runs `f` on every lane along the split axis, copying strided lanes when
/// `inner > 1`.
fn for_each_lane<T: Real>(data: &mut [T], outer: usize, n: usize, inner: usize, mut f: impl FnMut(&mut [T])) {
    if inner == 1 {
        for lane in data.chunks_mut(n.max(1)).take(outer) {
            f(lane);
        }
        return;
    }
    let mut buf = vec![T::zero(); n];
    for o in 0..outer {
        for i in 0..inner {
            for j in 0..n {
                buf[j] = data[(o * n + j) * inner + i];
            }
            f(&mut buf);
            for j in 0..n {
                data[(o * n + j) * inner + i] = buf[j];
            }
        }
    }
}

fn for_each_lane_pair<T: Real>(
    data: &mut [T],
    other: &[T],
    outer: usize,
    n: usize,
    inner: usize,
    mut f: impl FnMut(&mut [T], &[T]),
) {
    if inner == 1 {
        for (lane, o) in data.chunks_mut(n.max(1)).zip(other.chunks(n.max(1))).take(outer) {
            f(lane, o);
        }
        return;
    }
    let mut buf = vec![T::zero(); n];
    let mut obuf = vec![T::zero(); n];
    for o in 0..outer {
        for i in 0..inner {
            for j in 0..n {
                buf[j] = data[(o * n + j) * inner + i];
                obuf[j] = other[(o * n + j) * inner + i];
            }
            f(&mut buf, &obuf);
            for j in 0..n {
                data[(o * n + j) * inner + i] = buf[j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn matmul_identity_and_row_sums() {
        let mut tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let y = tape.matmul(i, i).unwrap();
        assert_eq!(tape.value(y).data(), &[1., 0., 0., 1.]);

        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let ones = tape.constant(t(&[2, 1], &[1., 1.]));
        let y = tape.matmul(a, ones).unwrap();
        assert_eq!(tape.value(y).data(), &[3., 7.]);
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        match tape.matmul(a, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn l2_normalize_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[3., 4.]));
        let y = tape.l2_normalize(x, 0).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 0.6).abs() < 1e-8 && (v[1] - 0.8).abs() < 1e-8);

        let z = tape.constant(t(&[2], &[0., 0.]));
        let y = tape.l2_normalize(z, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0., 0.]);
    }

    #[test]
    fn softmax_and_sigmoid_anchors() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0., 0., 0.]));
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let z = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s).item(), 0.5);
    }

    #[test]
    fn backward_simple_losses() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1., -2., 0.5]));
        let l = tape.sum(x);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).data(), &[1., 1., 1.]);

        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1., -2., 0.5]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let l = tape.scale(s, 0.5);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).data(), &[1., -2., 0.5]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unreached_leaf_has_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]));
        let unused = tape.leaf(t(&[2, 2], &[1., 2., 3., 4.]));
        let l = tape.sum(x);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(unused).data(), &[0.; 4]);
    }

    #[test]
    fn gather_scatter_edges() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let all = tape.gather_rows(x, &[true; 3]).unwrap();
        assert_eq!(tape.value(all), tape.value(x));

        let none = tape.gather_rows(x, &[false; 3]).unwrap();
        assert_eq!(tape.shape(none), &[0, 2]);
        let same = tape.scatter_rows(x, &[false; 3], none).unwrap();
        assert_eq!(tape.value(same), tape.value(x));

        let two = tape.gather_rows(x, &[true, false, true]).unwrap();
        assert!(tape.scatter_rows(x, &[true, false, false], two).is_err());
    }

    #[test]
    fn broadcast_trailing_and_scalar() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = tape.constant(t(&[3], &[10., 20., 30.]));
        let y = tape.add(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[11., 22., 33., 14., 25., 36.]);
        let s = tape.constant(Tensor::scalar(2.0));
        let y = tape.mul(s, a).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 3]);
        let bad = tape.constant(t(&[2], &[1., 1.]));
        assert!(tape.add(a, bad).is_err());
    }

    #[test]
    fn permute_roundtrip() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = tape.constant(t(&[2, 3, 4], &data));
        let p = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(p), &[4, 2, 3]);
        // element (i, j, k) of x lands at (k, i, j)
        assert_eq!(tape.value(p).data()[(3 * 2 + 1) * 3 + 2], data[(3 + 2) * 4 + 3]);
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(back).data(), &data[..]);
    }
}
