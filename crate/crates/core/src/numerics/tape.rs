//! Tape-based reverse-mode differentiation.
//!
//! Every operation on a [`Var`] evaluates eagerly and appends a node to its
//! [`Tape`]. [`Tape::backward`] then sweeps the nodes in reverse order,
//! accumulating adjoints. A tape can be swept once; record a new tape for the
//! next step.

use std::cell::{Cell, Ref, RefCell};

use super::tensor::{Real, StridedRef, Tensor};
use crate::error::{shape_err, Error, Result};

/// Epsilon inside the layer-norm variance square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, T),
    Silu(usize),
    Concat(Vec<usize>),
    Slice {
        src: usize,
        start: usize,
    },
    Reshape(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    GatherRows {
        src: usize,
        idx: Vec<usize>,
    },
    IndexAdd {
        src: usize,
        target: Vec<usize>,
    },
    SumAll(usize),
    MeanAll(usize),
    DistBias {
        sigma: usize,
        dist: Vec<T>,
    },
    BallAttention(Box<AttnSaved<T>>),
}

#[derive(Debug)]
struct AttnSaved<T> {
    q: usize,
    k: usize,
    v: usize,
    bias: Option<usize>,
    probs: Vec<T>,
    heads: usize,
    ball: usize,
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    flops: u64,
}

/// Records operations for one forward/backward pass.
#[derive(Debug)]
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    flops: Cell<u64>,
    backward_flops: Cell<u64>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a tape.
#[derive(Debug)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Real> Copy for Var<'_, T> {}

/// Output of a masked softmax.
#[derive(Clone, Copy, Debug)]
pub struct SoftmaxOutput<'t, T: Real> {
    pub probs: Var<'t, T>,
    /// Rows whose entries were all masked; they come out as zeros.
    pub empty_rows: usize,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&[T]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros when nothing flowed into it.
    pub fn wrt(&self, v: Var<'_, T>) -> Vec<T> {
        self.get(v)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); v.numel()])
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            flops: Cell::new(0),
            backward_flops: Cell::new(0),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Abstract floating-point operation count of everything recorded so far.
    pub fn flops(&self) -> u64 {
        self.flops.get()
    }

    /// Abstract cost of the backward sweep: twice the forward count of every
    /// node that propagated a gradient (one product per input adjoint).
    pub fn backward_flops(&self) -> u64 {
        self.backward_flops.get()
    }

    pub fn add_flops(&self, n: u64) {
        self.flops.set(self.flops.get() + n);
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true, 0)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false, 0)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool, flops: u64) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
            flops,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if self.consumed.get() {
            return Err(Error::Tape("tape already swept; record a new forward pass".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        self.consumed.set(true);
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_flops.set(self.backward_flops.get() + 2 * node.flops);
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn acc<'g, T: Real>(nodes: &[Node<T>], grads: &'g mut [Option<Vec<T>>], id: usize) -> Option<&'g mut Vec<T>> {
    if !nodes[id].needs_grad {
        return None;
    }
    let n = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![T::zero(); n]))
}

fn backprop<T: Real>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            // dA += G·Bᵀ, dB += Aᵀ·G
            if let Some(da) = acc(nodes, grads, *a) {
                T::gemm(
                    m,
                    n,
                    k,
                    StridedRef::rows(g, n),
                    StridedRef::transposed(bv.data(), n),
                    T::one(),
                    da,
                );
            }
            if let Some(db) = acc(nodes, grads, *b) {
                T::gemm(
                    k,
                    m,
                    n,
                    StridedRef::transposed(av.data(), k),
                    StridedRef::rows(g, n),
                    T::one(),
                    db,
                );
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (out.shape()[0], out.shape()[1]);
            if let Some(da) = acc(nodes, grads, *a) {
                for i in 0..r {
                    for j in 0..c {
                        da[j * r + i] += g[i * c + j];
                    }
                }
            }
        }
        Op::Add(a, b) => {
            if let Some(da) = acc(nodes, grads, *a) {
                da.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
            }
            if let Some(db) = acc(nodes, grads, *b) {
                db.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
            }
        }
        Op::Sub(a, b) => {
            if let Some(da) = acc(nodes, grads, *a) {
                da.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
            }
            if let Some(db) = acc(nodes, grads, *b) {
                db.iter_mut().zip(g).for_each(|(d, &gv)| *d -= gv);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            if let Some(da) = acc(nodes, grads, *a) {
                for i in 0..g.len() {
                    da[i] += g[i] * bv[i];
                }
            }
            if let Some(db) = acc(nodes, grads, *b) {
                for i in 0..g.len() {
                    db[i] += g[i] * av[i];
                }
            }
        }
        Op::AddRow(a, b) => {
            if let Some(da) = acc(nodes, grads, *a) {
                da.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
            }
            let c = nodes[*b].value.numel();
            if let Some(db) = acc(nodes, grads, *b) {
                for row in g.chunks_exact(c) {
                    db.iter_mut().zip(row).for_each(|(d, &gv)| *d += gv);
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(da) = acc(nodes, grads, *a) {
                da.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv * *s);
            }
        }
        Op::Silu(a) => {
            let x = nodes[*a].value.data();
            if let Some(da) = acc(nodes, grads, *a) {
                for i in 0..g.len() {
                    let s = sigmoid(x[i]);
                    da[i] += g[i] * s * (T::one() + x[i] * (T::one() - s));
                }
            }
        }
        Op::Concat(parts) => {
            let rows = out.rows();
            let total = out.cols();
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p].value.cols();
                if let Some(dp) = acc(nodes, grads, p) {
                    for r in 0..rows {
                        let src = &g[r * total + offset..r * total + offset + w];
                        dp[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(d, &gv)| *d += gv);
                    }
                }
                offset += w;
            }
        }
        Op::Slice { src, start } => {
            let rows = out.rows();
            let w = out.cols();
            let sw = nodes[*src].value.cols();
            if let Some(ds) = acc(nodes, grads, *src) {
                for r in 0..rows {
                    ds[r * sw + start..r * sw + start + w]
                        .iter_mut()
                        .zip(&g[r * w..(r + 1) * w])
                        .for_each(|(d, &gv)| *d += gv);
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(da) = acc(nodes, grads, *a) {
                da.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
            }
        }
        Op::Softmax(a) => {
            let y = out.data();
            let c = out.cols();
            if let Some(da) = acc(nodes, grads, *a) {
                for (r, (yr, gr)) in y.chunks_exact(c).zip(g.chunks_exact(c)).enumerate() {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        da[r * c + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            mean,
            rstd,
        } => {
            let xv = nodes[*x].value.data();
            let gv = nodes[*gain].value.data();
            let c = gv.len();
            let rows = xv.len() / c;
            let cf = T::of(c as f64);
            let mut dgain = vec![T::zero(); c];
            let mut dbias = vec![T::zero(); c];
            let mut dx = vec![T::zero(); xv.len()];
            let mut xhat = vec![T::zero(); c];
            let mut dxhat = vec![T::zero(); c];
            for r in 0..rows {
                let xr = &xv[r * c..(r + 1) * c];
                let gr = &g[r * c..(r + 1) * c];
                for j in 0..c {
                    xhat[j] = (xr[j] - mean[r]) * rstd[r];
                    dgain[j] += gr[j] * xhat[j];
                    dbias[j] += gr[j];
                    dxhat[j] = gr[j] * gv[j];
                }
                let m1: T = dxhat.iter().copied().sum::<T>() / cf;
                let m2: T = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / cf;
                for j in 0..c {
                    dx[r * c + j] = rstd[r] * (dxhat[j] - m1 - xhat[j] * m2);
                }
            }
            if let Some(d) = acc(nodes, grads, *x) {
                d.iter_mut().zip(&dx).for_each(|(a, &b)| *a += b);
            }
            if let Some(d) = acc(nodes, grads, *gain) {
                d.iter_mut().zip(&dgain).for_each(|(a, &b)| *a += b);
            }
            if let Some(d) = acc(nodes, grads, *bias) {
                d.iter_mut().zip(&dbias).for_each(|(a, &b)| *a += b);
            }
        }
        Op::GatherRows { src, idx } => {
            let c = out.cols();
            let rows = nodes[*src].value.rows();
            if let Some(ds) = acc(nodes, grads, *src) {
                for (j, &i) in idx.iter().enumerate() {
                    if i < rows {
                        ds[i * c..(i + 1) * c]
                            .iter_mut()
                            .zip(&g[j * c..(j + 1) * c])
                            .for_each(|(d, &gv)| *d += gv);
                    }
                }
            }
        }
        Op::IndexAdd { src, target } => {
            let c = out.cols();
            if let Some(ds) = acc(nodes, grads, *src) {
                for (e, &t) in target.iter().enumerate() {
                    ds[e * c..(e + 1) * c]
                        .iter_mut()
                        .zip(&g[t * c..(t + 1) * c])
                        .for_each(|(d, &gv)| *d += gv);
                }
            }
        }
        Op::SumAll(a) => {
            if let Some(da) = acc(nodes, grads, *a) {
                da.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::MeanAll(a) => {
            if let Some(da) = acc(nodes, grads, *a) {
                let s = g[0] / T::of(da.len() as f64);
                da.iter_mut().for_each(|d| *d += s);
            }
        }
        Op::DistBias { sigma, dist } => {
            let sv = nodes[*sigma].value.data();
            let h = sv.len();
            let bb = dist.len() / out.shape()[0];
            if let Some(ds) = acc(nodes, grads, *sigma) {
                let two = T::of(2.0);
                for (b, db) in dist.chunks_exact(bb).enumerate() {
                    for hh in 0..h {
                        let gb = &g[(b * h + hh) * bb..(b * h + hh + 1) * bb];
                        let s: T = gb.iter().zip(db).map(|(&x, &y)| x * y).sum();
                        ds[hh] -= two * sv[hh] * s;
                    }
                }
            }
        }
        Op::BallAttention(saved) => attention_backward(nodes, saved, g, grads),
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        self.value().clone()
    }

    pub fn data(&self) -> Vec<T> {
        self.value().data().to_vec()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.value().numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].needs_grad
    }

    fn emit(&self, value: Tensor<T>, op: Op<T>, parents: &[usize], flops: u64) -> Var<'t, T> {
        let needs = self.tape.needs(parents);
        self.tape.add_flops(flops);
        self.tape.push(value, op, needs, flops)
    }

    fn same_tape(&self, other: &Var<'t, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Tape("operands recorded on different tapes".into()))
        }
    }

    /// `[m × k] · [k × n]`.
    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(other)?;
        let value = {
            let (a, b) = (self.value(), other.value());
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(shape_err("matmul", sa, sb));
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let (ad, bd) = (a.data(), b.data());
            let mut out = vec![T::zero(); m * n];
            T::gemm(
                m,
                k,
                n,
                StridedRef::rows(ad, k),
                StridedRef::rows(bd, n),
                T::zero(),
                &mut out,
            );
            Tensor::new(&[m, n], out)?
        };
        let flops = 2 * value.numel() as u64 * self.value().shape()[1] as u64;
        Ok(self.emit(value, Op::MatMul(self.id, other.id), &[self.id, other.id], flops))
    }

    pub fn transpose(&self) -> Result<Var<'t, T>> {
        let value = {
            let a = self.value();
            if a.shape().len() != 2 {
                return Err(Error::Shape(format!("transpose needs a matrix, got {:?}", a.shape())));
            }
            let (r, c) = (a.shape()[0], a.shape()[1]);
            let mut out = vec![T::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = a.data()[i * c + j];
                }
            }
            Tensor::new(&[c, r], out)?
        };
        let n = value.numel() as u64;
        Ok(self.emit(value, Op::Transpose(self.id), &[self.id], n))
    }

    fn zip_with(&self, other: &Var<'t, T>, name: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(shape_err(name, a.shape(), b.shape()));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape(), data)
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.zip_with(other, "add", |x, y| x + y)?;
        let n = v.numel() as u64;
        Ok(self.emit(v, Op::Add(self.id, other.id), &[self.id, other.id], n))
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.zip_with(other, "sub", |x, y| x - y)?;
        let n = v.numel() as u64;
        Ok(self.emit(v, Op::Sub(self.id, other.id), &[self.id, other.id], n))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.zip_with(other, "mul", |x, y| x * y)?;
        let n = v.numel() as u64;
        Ok(self.emit(v, Op::Mul(self.id, other.id), &[self.id, other.id], n))
    }

    /// Adds a vector of length `cols` to every row.
    pub fn add_row(&self, bias: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(bias)?;
        let value = {
            let (a, b) = (self.value(), bias.value());
            let c = a.cols();
            if b.numel() != c {
                return Err(shape_err("add_row", a.shape(), b.shape()));
            }
            let mut data = a.data().to_vec();
            for row in data.chunks_exact_mut(c) {
                row.iter_mut().zip(b.data()).for_each(|(x, &y)| *x += y);
            }
            Tensor::new(a.shape(), data)?
        };
        let n = value.numel() as u64;
        Ok(self.emit(value, Op::AddRow(self.id, bias.id), &[self.id, bias.id], n))
    }

    pub fn scale(&self, s: T) -> Result<Var<'t, T>> {
        let value = {
            let a = self.value();
            Tensor::new(a.shape(), a.data().iter().map(|&x| x * s).collect())?
        };
        let n = value.numel() as u64;
        Ok(self.emit(value, Op::Scale(self.id, s), &[self.id], n))
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&self) -> Result<Var<'t, T>> {
        let value = {
            let a = self.value();
            Tensor::new(a.shape(), a.data().iter().map(|&x| x * sigmoid(x)).collect())?
        };
        let n = 4 * value.numel() as u64;
        Ok(self.emit(value, Op::Silu(self.id), &[self.id], n))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero operands".into()))?;
        for p in parts {
            first.same_tape(p)?;
        }
        let value = {
            let vals: Vec<Ref<'_, Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
            let lead = &vals[0].shape()[..vals[0].shape().len() - 1];
            for v in &vals {
                let s = v.shape();
                if s.is_empty() || &s[..s.len() - 1] != lead {
                    return Err(shape_err("concat", vals[0].shape(), s));
                }
            }
            let rows = vals[0].rows();
            let total: usize = vals.iter().map(|v| v.cols()).sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for v in &vals {
                    let w = v.cols();
                    data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(total);
            Tensor::new(&shape, data)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let n = value.numel() as u64;
        Ok(first.emit(value, Op::Concat(ids.clone()), &ids, n))
    }

    /// Columns `[start, end)` of the last axis.
    pub fn slice_last(&self, start: usize, end: usize) -> Result<Var<'t, T>> {
        let value = {
            let a = self.value();
            let c = a.cols();
            if start > end || end > c {
                return Err(Error::Shape(format!(
                    "slice [{start}, {end}) outside last axis of {:?}",
                    a.shape()
                )));
            }
            let w = end - start;
            let mut data = Vec::with_capacity(a.rows() * w);
            for row in a.data().chunks_exact(c) {
                data.extend_from_slice(&row[start..end]);
            }
            let mut shape = a.shape().to_vec();
            *shape.last_mut().expect("non-empty shape") = w;
            Tensor::new(&shape, data)?
        };
        let n = value.numel() as u64;
        Ok(self.emit(value, Op::Slice { src: self.id, start }, &[self.id], n))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let value = self.to_tensor().reshaped(shape)?;
        Ok(self.emit(value, Op::Reshape(self.id), &[self.id], 0))
    }

    /// `[(n·g) × c] → [n × (g·c)]`: groups of `g` consecutive rows become one row.
    pub fn merge_rows(&self, group: usize) -> Result<Var<'t, T>> {
        let (rows, c) = {
            let v = self.value();
            (v.rows(), v.cols())
        };
        if group == 0 || rows % group != 0 {
            return Err(Error::Shape(format!("cannot merge {rows} rows in groups of {group}")));
        }
        self.reshape(&[rows / group, group * c])
    }

    /// `[n × (g·c)] → [(n·g) × c]`, the inverse of [`merge_rows`](Self::merge_rows).
    pub fn split_rows(&self, group: usize) -> Result<Var<'t, T>> {
        let (rows, c) = {
            let v = self.value();
            (v.rows(), v.cols())
        };
        if group == 0 || c % group != 0 {
            return Err(Error::Shape(format!("cannot split width {c} into {group} rows")));
        }
        self.reshape(&[rows * group, c / group])
    }

    /// Softmax over the last axis after adding `mask`.
    ///
    /// The mask must have the trailing shape of `self` and holds finite values
    /// or `-inf`. Masked entries get exactly zero weight; rows with every entry
    /// masked come out as zeros and are counted in `empty_rows`.
    pub fn softmax_last(&self, mask: Option<&Tensor<T>>) -> Result<SoftmaxOutput<'t, T>> {
        let (value, empty_rows) = {
            let a = self.value();
            let c = a.cols();
            if let Some(m) = mask {
                let (sa, sm) = (a.shape(), m.shape());
                if sm.len() > sa.len() || sa[sa.len() - sm.len()..] != *sm {
                    return Err(shape_err("softmax mask", sa, sm));
                }
                if m.data().iter().any(|v| v.is_nan() || *v == T::infinity()) {
                    return Err(Error::Input("softmax mask holds NaN or +inf".into()));
                }
            }
            let mut data = a.data().to_vec();
            if let Some(m) = mask {
                let md = m.data();
                for (i, x) in data.iter_mut().enumerate() {
                    *x += md[i % md.len()];
                }
            }
            let mut empty = 0;
            for row in data.chunks_exact_mut(c) {
                empty += softmax_row(row) as usize;
            }
            (Tensor::new(a.shape(), data)?, empty)
        };
        let n = 5 * value.numel() as u64;
        let probs = self.emit(value, Op::Softmax(self.id), &[self.id], n);
        Ok(SoftmaxOutput { probs, empty_rows })
    }

    /// Normalises each row to zero mean and unit variance, then applies
    /// `gain` and `bias` (each of length `cols`).
    pub fn layer_norm(&self, gain: &Var<'t, T>, bias: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(gain)?;
        self.same_tape(bias)?;
        let (value, mean, rstd) = {
            let (x, gv, bv) = (self.value(), gain.value(), bias.value());
            let c = x.cols();
            if gv.numel() != c || bv.numel() != c {
                return Err(shape_err("layer_norm", x.shape(), gv.shape()));
            }
            let cf = T::of(c as f64);
            let eps = T::of(LAYER_NORM_EPS);
            let rows = x.rows();
            let mut mean = Vec::with_capacity(rows);
            let mut rstd = Vec::with_capacity(rows);
            let mut out = Vec::with_capacity(x.numel());
            for row in x.data().chunks_exact(c) {
                let mu = row.iter().copied().sum::<T>() / cf;
                let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / cf;
                let rs = T::one() / (var + eps).sqrt();
                for (j, &v) in row.iter().enumerate() {
                    out.push((v - mu) * rs * gv.data()[j] + bv.data()[j]);
                }
                mean.push(mu);
                rstd.push(rs);
            }
            (Tensor::new(x.shape(), out)?, mean, rstd)
        };
        let n = 8 * value.numel() as u64;
        let op = Op::LayerNorm {
            x: self.id,
            gain: gain.id,
            bias: bias.id,
            mean,
            rstd,
        };
        Ok(self.emit(value, op, &[self.id, gain.id, bias.id], n))
    }

    /// Row `j` of the result is row `idx[j]` of `self`; indices at or beyond
    /// the row count produce zero rows.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t, T>> {
        let value = {
            let a = self.value();
            if a.shape().len() != 2 {
                return Err(Error::Shape(format!("gather_rows needs a matrix, got {:?}", a.shape())));
            }
            let (rows, c) = (a.rows(), a.cols());
            let mut data = vec![T::zero(); idx.len() * c];
            for (j, &i) in idx.iter().enumerate() {
                if i < rows {
                    data[j * c..(j + 1) * c].copy_from_slice(&a.data()[i * c..(i + 1) * c]);
                }
            }
            Tensor::new(&[idx.len(), c], data)?
        };
        let op = Op::GatherRows {
            src: self.id,
            idx: idx.to_vec(),
        };
        Ok(self.emit(value, op, &[self.id], 0))
    }

    /// Keeps rows whose flag is set and zeroes the others.
    pub fn mask_rows(&self, keep: &[bool]) -> Result<Var<'t, T>> {
        let rows = self.value().rows();
        if keep.len() != rows {
            return Err(Error::Shape(format!("mask of {} rows for {rows} rows", keep.len())));
        }
        let idx: Vec<usize> = keep
            .iter()
            .enumerate()
            .map(|(j, &k)| if k { j } else { rows })
            .collect();
        self.gather_rows(&idx)
    }

    /// Sums row `e` of `self` into row `target[e]` of an `[n_out × c]` result.
    pub fn index_add_rows(&self, target: &[usize], n_out: usize) -> Result<Var<'t, T>> {
        let value = {
            let a = self.value();
            let (rows, c) = (a.rows(), a.cols());
            if target.len() != rows {
                return Err(Error::Shape(format!("{} targets for {rows} rows", target.len())));
            }
            if let Some(&t) = target.iter().find(|&&t| t >= n_out) {
                return Err(Error::Range(format!("target row {t} outside {n_out}")));
            }
            let mut data = vec![T::zero(); n_out * c];
            for (e, &t) in target.iter().enumerate() {
                data[t * c..(t + 1) * c]
                    .iter_mut()
                    .zip(&a.data()[e * c..(e + 1) * c])
                    .for_each(|(d, &v)| *d += v);
            }
            Tensor::new(&[n_out, c], data)?
        };
        let n = self.numel() as u64;
        let op = Op::IndexAdd {
            src: self.id,
            target: target.to_vec(),
        };
        Ok(self.emit(value, op, &[self.id], n))
    }

    pub fn sum(&self) -> Result<Var<'t, T>> {
        let (s, n) = {
            let a = self.value();
            (a.data().iter().copied().sum::<T>(), a.numel())
        };
        Ok(self.emit(Tensor::scalar(s), Op::SumAll(self.id), &[self.id], n as u64))
    }

    pub fn mean(&self) -> Result<Var<'t, T>> {
        let (s, n) = {
            let a = self.value();
            (a.data().iter().copied().sum::<T>() / T::of(a.numel() as f64), a.numel())
        };
        Ok(self.emit(Tensor::scalar(s), Op::MeanAll(self.id), &[self.id], n as u64))
    }

    /// Mean squared difference to a constant target.
    pub fn mse(&self, target: &Tensor<T>) -> Result<Var<'t, T>> {
        let t = self.tape.constant(target.clone());
        let d = self.sub(&t)?;
        d.mul(&d)?.mean()
    }

    /// `-σ_h² · dist` for every head `h`, with `self` the `[H]` vector of σ and
    /// `dist` a constant `[balls × b × b]` distance array. Result:
    /// `[balls × H × b × b]`.
    pub fn distance_bias(&self, dist: &Tensor<T>) -> Result<Var<'t, T>> {
        let value = {
            let s = self.value();
            let ds = dist.shape();
            if s.shape().len() != 1 || ds.len() != 3 || ds[1] != ds[2] {
                return Err(shape_err("distance_bias", s.shape(), ds));
            }
            let (nb, b, h) = (ds[0], ds[1], s.numel());
            let bb = b * b;
            let mut out = Vec::with_capacity(nb * h * bb);
            for blk in dist.data().chunks_exact(bb) {
                for &sig in s.data() {
                    let w = -(sig * sig);
                    out.extend(blk.iter().map(|&d| w * d));
                }
            }
            Tensor::new(&[nb, h, b, b], out)?
        };
        let n = value.numel() as u64;
        let op = Op::DistBias {
            sigma: self.id,
            dist: dist.data().to_vec(),
        };
        Ok(self.emit(value, op, &[self.id], n))
    }
}

/// Stable in-place softmax of one row that may contain `-inf`.
/// Returns true when every entry was masked.
fn softmax_row<T: Real>(row: &mut [T]) -> bool {
    let max = row
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|v| *v = T::zero());
        return true;
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = if v.is_finite() { (*v - max).exp() } else { T::zero() };
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    false
}

/// Fused scaled dot-product attention restricted to consecutive blocks of
/// `ball` rows.
///
/// `q`, `k`, `v` are `[N × C']` with head `h` in columns
/// `[h·C'/H, (h+1)·C'/H)`. `bias`, when present, is `[N/ball × H × ball × ball]`
/// and is added after the `1/sqrt(C'/H)` scaling. Rows with `valid[i] == false`
/// neither attend nor are attended to, and their outputs are zero.
pub fn ball_attention<'t, T: Real>(
    q: &Var<'t, T>,
    k: &Var<'t, T>,
    v: &Var<'t, T>,
    bias: Option<&Var<'t, T>>,
    valid: &[bool],
    heads: usize,
    ball: usize,
) -> Result<(Var<'t, T>, usize)> {
    q.same_tape(k)?;
    q.same_tape(v)?;
    if let Some(b) = bias {
        q.same_tape(b)?;
    }
    let (out, probs, empty) = {
        let (qv, kv, vv) = (q.value(), k.value(), v.value());
        let s = qv.shape().to_vec();
        if s.len() != 2 || kv.shape() != s.as_slice() || vv.shape() != s.as_slice() {
            return Err(shape_err("ball_attention", &s, kv.shape()));
        }
        let (n, c) = (s[0], s[1]);
        if heads == 0 || c % heads != 0 {
            return Err(Error::Shape(format!("{c} channels do not split into {heads} heads")));
        }
        if ball == 0 || n % ball != 0 {
            return Err(Error::Shape(format!("{n} slots do not split into balls of {ball}")));
        }
        if valid.len() != n {
            return Err(Error::Shape(format!("validity mask of {} for {n} slots", valid.len())));
        }
        let nb = n / ball;
        let bias_ref = bias.map(|b| b.value());
        if let Some(bv) = &bias_ref {
            if bv.shape() != [nb, heads, ball, ball] {
                return Err(shape_err("ball_attention bias", bv.shape(), &[nb, heads, ball, ball]));
            }
        }
        let dh = c / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut out = vec![T::zero(); n * c];
        let mut probs = vec![T::zero(); nb * heads * ball * ball];
        let mut empty = 0;
        for b in 0..nb {
            let base = b * ball;
            for h in 0..heads {
                let col = h * dh;
                let pblk = &mut probs[(b * heads + h) * ball * ball..(b * heads + h + 1) * ball * ball];
                for i in 0..ball {
                    let row = &mut pblk[i * ball..(i + 1) * ball];
                    if !valid[base + i] {
                        empty += 1;
                        continue;
                    }
                    let qi = &qd[(base + i) * c + col..(base + i) * c + col + dh];
                    for j in 0..ball {
                        if !valid[base + j] {
                            row[j] = T::neg_infinity();
                            continue;
                        }
                        let kj = &kd[(base + j) * c + col..(base + j) * c + col + dh];
                        let mut dot = T::zero();
                        for t in 0..dh {
                            dot += qi[t] * kj[t];
                        }
                        row[j] = dot * scale;
                        if let Some(bv) = &bias_ref {
                            row[j] += bv.data()[((b * heads + h) * ball + i) * ball + j];
                        }
                    }
                    softmax_row(row);
                    let oi = &mut out[(base + i) * c + col..(base + i) * c + col + dh];
                    for j in 0..ball {
                        let p = row[j];
                        if p == T::zero() {
                            continue;
                        }
                        let vj = &vd[(base + j) * c + col..(base + j) * c + col + dh];
                        for t in 0..dh {
                            oi[t] += p * vj[t];
                        }
                    }
                }
            }
        }
        (Tensor::new(&[n, c], out)?, probs, empty)
    };
    let n = out.numel() as u64 * ball as u64 * 4;
    let mut parents = vec![q.id, k.id, v.id];
    if let Some(b) = bias {
        parents.push(b.id);
    }
    let saved = AttnSaved {
        q: q.id,
        k: k.id,
        v: v.id,
        bias: bias.map(|b| b.id),
        probs,
        heads,
        ball,
    };
    Ok((q.emit(out, Op::BallAttention(Box::new(saved)), &parents, n), empty))
}

fn attention_backward<T: Real>(nodes: &[Node<T>], s: &AttnSaved<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let qv = &nodes[s.q].value;
    let (n, c) = (qv.shape()[0], qv.shape()[1]);
    let (heads, ball) = (s.heads, s.ball);
    let dh = c / heads;
    let nb = n / ball;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let (qd, kd, vd) = (qv.data(), nodes[s.k].value.data(), nodes[s.v].value.data());
    let mut dq = vec![T::zero(); n * c];
    let mut dk = vec![T::zero(); n * c];
    let mut dv = vec![T::zero(); n * c];
    let mut dbias = vec![T::zero(); s.probs.len()];
    let mut dp = vec![T::zero(); ball];
    for b in 0..nb {
        let base = b * ball;
        for h in 0..heads {
            let col = h * dh;
            let off = (b * heads + h) * ball * ball;
            for i in 0..ball {
                let p = &s.probs[off + i * ball..off + (i + 1) * ball];
                let gi = &g[(base + i) * c + col..(base + i) * c + col + dh];
                let mut dot = T::zero();
                for j in 0..ball {
                    if p[j] == T::zero() {
                        dp[j] = T::zero();
                        continue;
                    }
                    let vj = &vd[(base + j) * c + col..(base + j) * c + col + dh];
                    let dvj = &mut dv[(base + j) * c + col..(base + j) * c + col + dh];
                    let mut d = T::zero();
                    for t in 0..dh {
                        d += gi[t] * vj[t];
                        dvj[t] += p[j] * gi[t];
                    }
                    dp[j] = d;
                    dot += p[j] * d;
                }
                let qi = &qd[(base + i) * c + col..(base + i) * c + col + dh];
                for j in 0..ball {
                    if p[j] == T::zero() {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - dot);
                    dbias[off + i * ball + j] = ds;
                    let kj = &kd[(base + j) * c + col..(base + j) * c + col + dh];
                    let w = ds * scale;
                    for t in 0..dh {
                        dq[(base + i) * c + col + t] += w * kj[t];
                        dk[(base + j) * c + col + t] += w * qi[t];
                    }
                }
            }
        }
    }
    for (id, d) in [(s.q, dq), (s.k, dk), (s.v, dv)] {
        if let Some(dst) = acc(nodes, grads, id) {
            dst.iter_mut().zip(&d).for_each(|(a, &b)| *a += b);
        }
    }
    if let Some(bid) = s.bias {
        if let Some(dst) = acc(nodes, grads, bid) {
            dst.iter_mut().zip(&dbias).for_each(|(a, &b)| *a += b);
        }
    }
}
