//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its forward value and enough cached
//! state to run its vector-Jacobian product later. Parents always precede
//! children, so `backward` is a single reverse sweep over the node list.
//! Nodes whose inputs all have `requires_grad == false` are marked inert and
//! skipped during the sweep.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{axpy, dot, softmax_in_place, Real, Tensor};

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// `tanh` through one `exp`, several times cheaper than the library call.
fn tanh<T: Real>(u: T) -> T {
    let one = T::one();
    one - (one + one) / ((u + u).exp() + one)
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    Scale(Var, T),
    Matmul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Relu(Var),
    Gelu(Var),
    Softmax {
        x: Var,
        outer: usize,
        axis: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        // normalized activations and per-row reciprocal std
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    MeanAxis1(Var),
    Sum(Var),
    Mean(Var),
    SelectRow(Var, usize),
    ConcatRows(Vec<Var>),
    Combine {
        base: Var,
        deltas: Vec<Var>,
        coeffs: Var,
        row: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Entropy {
        logits: Var,
        probs: Vec<T>,
        logs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Append-only record of a forward computation.
#[derive(Debug)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `var`; all zeros when `var` does not influence the loss.
    pub fn wrt(&self, var: Var) -> Tensor<T> {
        let shape = self.shapes[var.0].clone();
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape matches value"),
            None => Tensor::zeros(shape),
        }
    }

    /// Raw gradient buffer, if any flowed into `var`.
    pub fn raw(&self, var: Var) -> Option<&[T]> {
        self.grads[var.0].as_deref()
    }
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self { nodes: Vec::new() }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn needs_grad(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn data(&self, var: Var) -> &[T] {
        self.nodes[var.0].value.data()
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf; it receives gradients iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err("mul", self.shape(a), self.shape(b)));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let v = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    /// `x + y` where `y`'s shape is a suffix of `x`'s shape (y is tiled).
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xs, ys) = (self.shape(x), self.shape(y));
        if ys.len() > xs.len() || xs[xs.len() - ys.len()..] != *ys {
            return Err(dim_err("add_broadcast", xs, ys));
        }
        let yd = self.data(y);
        let mut out = self.value(x).clone().with_requires_grad(false);
        for chunk in out.data_mut().chunks_mut(yd.len()) {
            for (o, &b) in chunk.iter_mut().zip(yd) {
                *o += b;
            }
        }
        self.push("add_broadcast", out, Op::AddBroadcast(x, y), &[x, y])
    }

    pub fn scale(&mut self, x: Var, alpha: T) -> Result<Var> {
        let v = self.value(x).scaled(alpha);
        self.push("scale", v, Op::Scale(x, alpha), &[x])
    }

    /// Plain matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a), self.shape(b));
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(dim_err("matmul", ash, bsh));
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                axpy(ad[i * k + p], &bd[p * n..(p + 1) * n], orow);
            }
        }
        let v = Tensor::new([m, n], out)?;
        self.push("matmul", v, Op::Matmul(a, b), &[a, b])
    }

    /// Affine map over the last axis: `x · wᵀ + b` with `w: [out × in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if ws.len() != 2 || *xs.last().unwrap() != ws[1] {
            return Err(dim_err("linear", xs, ws));
        }
        let (n_out, n_in) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [n_out] {
                return Err(dim_err("linear bias", ws, self.shape(b)));
            }
        }
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = n_out;
        let (xd, wd) = (self.data(x), self.data(w));
        let rows = xd.len() / n_in;
        // Row-wise axpy against wᵀ keeps the inner loop contiguous.
        let mut wt = vec![T::zero(); n_in * n_out];
        for o in 0..n_out {
            for i in 0..n_in {
                wt[i * n_out + o] = wd[o * n_in + i];
            }
        }
        let mut out = vec![T::zero(); rows * n_out];
        for r in 0..rows {
            let xr = &xd[r * n_in..(r + 1) * n_in];
            let orow = &mut out[r * n_out..(r + 1) * n_out];
            for (i, &xi) in xr.iter().enumerate() {
                axpy(xi, &wt[i * n_out..(i + 1) * n_out], orow);
            }
        }
        if let Some(b) = b {
            let bd = self.data(b);
            for orow in out.chunks_mut(n_out) {
                for (slot, &bv) in orow.iter_mut().zip(bd) {
                    *slot += bv;
                }
            }
        }
        let v = Tensor::new(shape, out)?;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push("linear", v, Op::Linear { x, w, b }, &parents)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| a.max(T::zero()));
        self.push("relu", v, Op::Relu(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| {
            let (k, c, half) = (T::c(GELU_K), T::c(GELU_C), T::c(0.5));
            let t = tanh(k * (a + c * a * a * a));
            half * a * (T::one() + t)
        });
        self.push("gelu", v, Op::Gelu(x), &[x])
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::OutOfRange {
                index: axis,
                len: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let len = shape[axis];
        let xd = self.data(x);
        let mut out = vec![T::zero(); xd.len()];
        let mut buf = vec![T::zero(); len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                for a in 0..len {
                    buf[a] = xd[base + a * inner];
                }
                softmax_in_place(&mut buf);
                for a in 0..len {
                    out[base + a * inner] = buf[a];
                }
            }
        }
        let v = Tensor::new(shape, out)?;
        self.push(
            "softmax",
            v,
            Op::Softmax {
                x,
                outer,
                axis: len,
                inner,
            },
            &[x],
        )
    }

    /// LayerNorm over the last axis with biased variance.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let xs = self.shape(x);
        let d = *xs.last().unwrap();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(dim_err("layernorm", xs, self.shape(gain)));
        }
        let shape = xs.to_vec();
        let (xd, gd, bd) = (self.data(x), self.data(gain), self.data(bias));
        let rows = xd.len() / d;
        let mut xhat = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let dn = T::c(d as f64);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gd[j] + bd[j];
            }
        }
        let v = Tensor::new(shape, out)?;
        self.push(
            "layernorm",
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// Multi-head scaled dot-product attention over `[B × N × d]` projections.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        if qs.len() != 3 || self.shape(k) != qs.as_slice() || self.shape(v) != qs.as_slice() {
            return Err(dim_err("attention", &qs, self.shape(k)));
        }
        let (b, n, d) = (qs[0], qs[1], qs[2]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(alloc::format!(
                "width {d} not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = T::one() / T::c(dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![T::zero(); b * heads * n * n];
        let mut out = vec![T::zero(); b * n * d];
        for bi in 0..b {
            for h in 0..heads {
                let p = &mut probs[(bi * heads + h) * n * n..(bi * heads + h + 1) * n * n];
                for i in 0..n {
                    let qi = &qd[(bi * n + i) * d + h * dh..][..dh];
                    let prow = &mut p[i * n..(i + 1) * n];
                    for (j, slot) in prow.iter_mut().enumerate() {
                        let kj = &kd[(bi * n + j) * d + h * dh..][..dh];
                        *slot = dot(qi, kj) * scale;
                    }
                    softmax_in_place(prow);
                    let orow = &mut out[(bi * n + i) * d + h * dh..][..dh];
                    for (j, &pij) in prow.iter().enumerate() {
                        axpy(pij, &vd[(bi * n + j) * d + h * dh..][..dh], orow);
                    }
                }
            }
        }
        let value = Tensor::new(qs, out)?;
        self.push("attention", value, Op::Attention { q, k, v, heads, probs }, &[q, k, v])
    }

    /// Mean over axis 1 of a rank-3 tensor: `[B × N × C] -> [B × C]`.
    pub fn mean_axis1(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 3 {
            return Err(dim_err("mean_axis1", xs, &[0, 0, 0]));
        }
        let (b, n, c) = (xs[0], xs[1], xs[2]);
        let xd = self.data(x);
        let mut out = vec![T::zero(); b * c];
        let inv = T::one() / T::c(n as f64);
        for bi in 0..b {
            let orow = &mut out[bi * c..(bi + 1) * c];
            for t in 0..n {
                axpy(inv, &xd[(bi * n + t) * c..][..c], orow);
            }
        }
        let v = Tensor::new([b, c], out)?;
        self.push("mean_axis1", v, Op::MeanAxis1(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        self.push("sum", v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).mean());
        self.push("mean", v, Op::Mean(x), &[x])
    }

    /// Row `row` of axis 0, keeping a leading axis of size one.
    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let xs = self.shape(x);
        if row >= xs[0] {
            return Err(Error::OutOfRange { index: row, len: xs[0] });
        }
        let mut shape = xs.to_vec();
        shape[0] = 1;
        let stride: usize = shape.iter().product();
        let v = Tensor::from_slice(shape, &self.data(x)[row * stride..(row + 1) * stride])?;
        self.push("select_row", v, Op::SelectRow(x, row), &[x])
    }

    /// Concatenates along axis 0.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let ps = self.shape(p);
            if ps[1..] != *tail {
                return Err(dim_err("concat_rows", self.shape(*first), ps));
            }
            rows += ps[0];
            data.extend_from_slice(self.data(p));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let v = Tensor::new(shape, data)?;
        self.push("concat_rows", v, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// `base + Σᵢ coeffs[row, i] · deltas[i]`.
    ///
    /// `coeffs` is either `[T]` (then `row` must be 0) or `[R × T]`.
    pub fn combine(&mut self, base: Var, deltas: &[Var], coeffs: Var, row: usize) -> Result<Var> {
        let cs = self.shape(coeffs);
        let (rows, t) = match cs {
            [t] => (1, *t),
            [r, t] => (*r, *t),
            _ => return Err(dim_err("combine coeffs", cs, &[deltas.len()])),
        };
        if t != deltas.len() {
            return Err(dim_err("combine coeffs", cs, &[deltas.len()]));
        }
        if row >= rows {
            return Err(Error::OutOfRange { index: row, len: rows });
        }
        for &dv in deltas {
            if self.shape(dv) != self.shape(base) {
                return Err(dim_err("combine", self.shape(base), self.shape(dv)));
            }
        }
        let c = self.data(coeffs)[row * t..(row + 1) * t].to_vec();
        let mut out = self.value(base).clone().with_requires_grad(false);
        for (&dv, &ci) in deltas.iter().zip(&c) {
            axpy(ci, self.data(dv), out.data_mut());
        }
        let mut parents = vec![base, coeffs];
        parents.extend_from_slice(deltas);
        self.push(
            "combine",
            out,
            Op::Combine {
                base,
                deltas: deltas.to_vec(),
                coeffs,
                row,
            },
            &parents,
        )
    }

    /// Mean softmax cross-entropy of `[B × C]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits);
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(dim_err("cross_entropy", ls, &[labels.len()]));
        }
        let c = ls[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::OutOfRange { index: bad, len: c });
        }
        let probs = self.value(logits).softmax_last().into_data();
        let loss = labels
            .iter()
            .enumerate()
            .map(|(b, &y)| -probs[b * c + y].max(T::c(1e-12)).ln())
            .sum::<T>()
            / T::c(labels.len() as f64);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Mean Shannon entropy (natural log) of the row-wise softmax of `[B × C]`
    /// logits, with probabilities clamped at `1e-12` inside the log.
    pub fn entropy(&mut self, logits: Var) -> Result<Var> {
        let ls = self.shape(logits);
        if ls.len() != 2 {
            return Err(dim_err("entropy", ls, &[0, 0]));
        }
        let b = ls[0];
        let probs = self.value(logits).softmax_last().into_data();
        let logs: Vec<T> = probs.iter().map(|&p| p.max(T::c(1e-12)).ln()).collect();
        let total: T = probs.iter().zip(&logs).map(|(&p, &l)| -p * l).sum();
        self.push(
            "entropy",
            Tensor::scalar(total / T::c(b as f64)),
            Op::Entropy { logits, probs, logs },
            &[logits],
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.vjp(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], var: Var) -> Option<&'g mut [T]> {
        if !self.nodes[var.0].needs_grad {
            return None;
        }
        let len = self.nodes[var.0].value.numel();
        Some(grads[var.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn vjp(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for p in [*a, *b] {
                    if let Some(s) = self.grad_slot(grads, p) {
                        axpy(T::one(), g, s);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = self.grad_slot(grads, *a) {
                    axpy(T::one(), g, s);
                }
                if let Some(s) = self.grad_slot(grads, *b) {
                    axpy(-T::one(), g, s);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(s) = self.grad_slot(grads, *a) {
                    for ((si, gi), bi) in s.iter_mut().zip(g).zip(bd) {
                        *si += *gi * *bi;
                    }
                }
                if let Some(s) = self.grad_slot(grads, *b) {
                    for ((si, gi), ai) in s.iter_mut().zip(g).zip(ad) {
                        *si += *gi * *ai;
                    }
                }
            }
            Op::AddBroadcast(x, y) => {
                if let Some(s) = self.grad_slot(grads, *x) {
                    axpy(T::one(), g, s);
                }
                if let Some(s) = self.grad_slot(grads, *y) {
                    let len = s.len();
                    for chunk in g.chunks(len) {
                        axpy(T::one(), chunk, s);
                    }
                }
            }
            Op::Scale(x, alpha) => {
                if let Some(s) = self.grad_slot(grads, *x) {
                    axpy(*alpha, g, s);
                }
            }
            Op::Matmul(a, b) => {
                let (ash, bsh) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (ash[0], ash[1], bsh[1]);
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(s) = self.grad_slot(grads, *a) {
                    // dA = G · Bᵀ
                    for i in 0..m {
                        for p in 0..k {
                            s[i * k + p] += dot(&g[i * n..(i + 1) * n], &bd[p * n..(p + 1) * n]);
                        }
                    }
                }
                if let Some(s) = self.grad_slot(grads, *b) {
                    // dB = Aᵀ · G
                    for i in 0..m {
                        for p in 0..k {
                            axpy(ad[i * k + p], &g[i * n..(i + 1) * n], &mut s[p * n..(p + 1) * n]);
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (n_out, n_in) = (ws[0], ws[1]);
                let (xd, wd) = (self.data(*x), self.data(*w));
                let rows = xd.len() / n_in;
                if let Some(s) = self.grad_slot(grads, *x) {
                    for r in 0..rows {
                        let dx = &mut s[r * n_in..(r + 1) * n_in];
                        for o in 0..n_out {
                            axpy(g[r * n_out + o], &wd[o * n_in..(o + 1) * n_in], dx);
                        }
                    }
                }
                if let Some(s) = self.grad_slot(grads, *w) {
                    for r in 0..rows {
                        let xr = &xd[r * n_in..(r + 1) * n_in];
                        for o in 0..n_out {
                            axpy(g[r * n_out + o], xr, &mut s[o * n_in..(o + 1) * n_in]);
                        }
                    }
                }
                if let Some(b) = b {
                    if let Some(s) = self.grad_slot(grads, *b) {
                        for chunk in g.chunks(n_out) {
                            axpy(T::one(), chunk, s);
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xd = self.data(*x);
                if let Some(s) = self.grad_slot(grads, *x) {
                    for ((si, gi), xi) in s.iter_mut().zip(g).zip(xd) {
                        if *xi > T::zero() {
                            *si += *gi;
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xd = self.data(*x);
                if let Some(s) = self.grad_slot(grads, *x) {
                    for ((si, gi), &a) in s.iter_mut().zip(g).zip(xd) {
                        let (k, c, half, one) = (T::c(GELU_K), T::c(GELU_C), T::c(0.5), T::one());
                        let t = tanh(k * (a + c * a * a * a));
                        let dt = (one - t * t) * k * (one + T::c(3.0) * c * a * a);
                        *si += *gi * (half * (one + t) + half * a * dt);
                    }
                }
            }
            Op::Softmax { x, outer, axis, inner } => {
                let p = node.value.data();
                if let Some(s) = self.grad_slot(grads, *x) {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let base = o * axis * inner + i;
                            let mut acc = T::zero();
                            for a in 0..*axis {
                                acc += g[base + a * inner] * p[base + a * inner];
                            }
                            for a in 0..*axis {
                                let at = base + a * inner;
                                s[at] += p[at] * (g[at] - acc);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gain)[0];
                let gd = self.data(*gain);
                let rows = xhat.len() / d;
                if let Some(s) = self.grad_slot(grads, *x) {
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gd[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 = m1 / T::c(d as f64);
                        m2 = m2 / T::c(d as f64);
                        for j in 0..d {
                            let dh = gr[j] * gd[j];
                            s[r * d + j] += rstd[r] * (dh - m1 - hr[j] * m2);
                        }
                    }
                }
                if let Some(s) = self.grad_slot(grads, *gain) {
                    for r in 0..rows {
                        for j in 0..d {
                            s[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(s) = self.grad_slot(grads, *bias) {
                    for chunk in g.chunks(d) {
                        axpy(T::one(), chunk, s);
                    }
                }
            }
            Op::Attention { q, k, v, heads, probs } => self.attention_vjp(g, *q, *k, *v, *heads, probs, grads),
            Op::MeanAxis1(x) => {
                let xs = self.shape(*x);
                let (b, n, c) = (xs[0], xs[1], xs[2]);
                let inv = T::one() / T::c(n as f64);
                if let Some(s) = self.grad_slot(grads, *x) {
                    for bi in 0..b {
                        for t in 0..n {
                            axpy(inv, &g[bi * c..(bi + 1) * c], &mut s[(bi * n + t) * c..][..c]);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(s) = self.grad_slot(grads, *x) {
                    s.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(s) = self.grad_slot(grads, *x) {
                    let inv = g[0] / T::c(s.len() as f64);
                    s.iter_mut().for_each(|v| *v += inv);
                }
            }
            Op::SelectRow(x, row) => {
                if let Some(s) = self.grad_slot(grads, *x) {
                    let stride = g.len();
                    axpy(T::one(), g, &mut s[row * stride..(row + 1) * stride]);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.numel();
                    if let Some(s) = self.grad_slot(grads, p) {
                        axpy(T::one(), &g[offset..offset + len], s);
                    }
                    offset += len;
                }
            }
            Op::Combine {
                base,
                deltas,
                coeffs,
                row,
            } => {
                if let Some(s) = self.grad_slot(grads, *base) {
                    axpy(T::one(), g, s);
                }
                let t = deltas.len();
                let c = self.data(*coeffs)[row * t..(row + 1) * t].to_vec();
                if let Some(s) = self.grad_slot(grads, *coeffs) {
                    for (i, &dv) in deltas.iter().enumerate() {
                        s[row * t + i] += dot(g, self.data(dv));
                    }
                }
                for (&dv, &ci) in deltas.iter().zip(&c) {
                    if let Some(s) = self.grad_slot(grads, dv) {
                        axpy(ci, g, s);
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = probs.len() / labels.len();
                let scale = g[0] / T::c(labels.len() as f64);
                if let Some(s) = self.grad_slot(grads, *logits) {
                    for (b, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let ind = if j == y { T::one() } else { T::zero() };
                            s[b * c + j] += scale * (probs[b * c + j] - ind);
                        }
                    }
                }
            }
            Op::Entropy { logits, probs, logs } => {
                let ls = self.shape(*logits);
                let (b, c) = (ls[0], ls[1]);
                let scale = g[0] / T::c(b as f64);
                if let Some(s) = self.grad_slot(grads, *logits) {
                    for bi in 0..b {
                        let p = &probs[bi * c..(bi + 1) * c];
                        let l = &logs[bi * c..(bi + 1) * c];
                        // dH/dp_c = -(log p_c + 1) where the clamp is inactive.
                        let a: Vec<T> = p
                            .iter()
                            .zip(l)
                            .map(|(&pc, &lc)| -(lc + if pc > T::c(1e-12) { T::one() } else { T::zero() }))
                            .collect();
                        let mean_a = dot(p, &a);
                        for j in 0..c {
                            s[bi * c + j] += scale * p[j] * (a[j] - mean_a);
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_vjp(&self, g: &[T], q: Var, k: Var, v: Var, heads: usize, probs: &[T], grads: &mut [Option<Vec<T>>]) {
        let qs = self.shape(q);
        let (b, n, d) = (qs[0], qs[1], qs[2]);
        let dh = d / heads;
        let scale = T::one() / T::c(dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut dq = vec![T::zero(); qd.len()];
        let mut dk = vec![T::zero(); kd.len()];
        let mut dv = vec![T::zero(); vd.len()];
        let mut dscore = vec![T::zero(); n];
        for bi in 0..b {
            for h in 0..heads {
                let p = &probs[(bi * heads + h) * n * n..(bi * heads + h + 1) * n * n];
                for i in 0..n {
                    let gi = &g[(bi * n + i) * d + h * dh..][..dh];
                    let prow = &p[i * n..(i + 1) * n];
                    // dP_ij = <dO_i, V_j>; dV_j += P_ij dO_i
                    let mut acc = T::zero();
                    for j in 0..n {
                        let vj = &vd[(bi * n + j) * d + h * dh..][..dh];
                        dscore[j] = dot(gi, vj);
                        acc += dscore[j] * prow[j];
                        axpy(prow[j], gi, &mut dv[(bi * n + j) * d + h * dh..][..dh]);
                    }
                    let qi_off = (bi * n + i) * d + h * dh;
                    for j in 0..n {
                        let ds = prow[j] * (dscore[j] - acc) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let kj_off = (bi * n + j) * d + h * dh;
                        axpy(ds, &kd[kj_off..kj_off + dh], &mut dq[qi_off..qi_off + dh]);
                        axpy(ds, &qd[qi_off..qi_off + dh], &mut dk[kj_off..kj_off + dh]);
                    }
                }
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(s) = self.grad_slot(grads, var) {
                axpy(T::one(), &buf, s);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::from_slice(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape: Tape<f32> = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let out = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out).data(), &[11.0]);

        let z = tape.constant(Tensor::zeros([2, 3]));
        let any = tape.constant(t(&[3, 2], &[1.0, -2.0, 3.5, 4.0, 0.25, 9.0]));
        let out = tape.matmul(z, any).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0; 4]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape: Tape<f32> = Tape::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        match tape.matmul(a, b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, [2, 3]);
                assert_eq!(rhs, [2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_examples() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let s = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);

        let x = tape.constant(t(&[2], &[0.0, 3.0f32.ln()]));
        let s = tape.softmax(x, 0).unwrap();
        let d = tape.value(s).data();
        assert!((d[0] - 0.25).abs() < 1e-6 && (d[1] - 0.75).abs() < 1e-6);

        let x = tape.constant(t(&[2], &[1000.0, 1000.0]));
        let s = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);

        assert!(tape.softmax(x, 1).is_err());
    }

    #[test]
    fn softmax_along_leading_axis() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.constant(t(&[2, 3], &[0.0, 1.0, 2.0, 0.0, 1.0, 2.0]));
        let s = tape.softmax(x, 0).unwrap();
        assert!(tape.value(s).data().iter().all(|&v| (v - 0.5).abs() < 1e-7));
    }

    #[test]
    fn layernorm_examples() {
        let mut tape: Tape<f32> = Tape::new();
        let ones = tape.constant(Tensor::full([2], 1.0));
        let zeros = tape.constant(Tensor::zeros([2]));
        let x = tape.constant(t(&[1, 2], &[1.0, 3.0]));
        let y = tape.layernorm(x, ones, zeros, 0.0).unwrap();
        assert_eq!(tape.value(y).data(), &[-1.0, 1.0]);

        let c = tape.constant(t(&[1, 2], &[4.0, 4.0]));
        let y = tape.layernorm(c, ones, zeros, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);

        let bias = tape.constant(t(&[2], &[0.7, -0.2]));
        let y = tape.layernorm(x, zeros, bias, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.7, -0.2]);

        let wrong = tape.constant(Tensor::zeros([3]));
        assert!(matches!(
            tape.layernorm(x, wrong, zeros, 1e-5),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn backward_simple_cases() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf(t(&[3], &[0.3, -1.0, 2.0]).with_requires_grad(true));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0, 1.0, 1.0]);

        let mut tape: Tape<f32> = Tape::new();
        let yv = [0.5, 2.0, -3.0];
        let x = tape.leaf(t(&[3], &[1.0, 1.0, 1.0]).with_requires_grad(true));
        let y = tape.constant(t(&[3], &yv));
        let p = tape.mul(x, y).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &yv);
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf(Tensor::full([2], 1.0).with_requires_grad(true));
        let unused = tape.leaf(Tensor::full([3], 1.0).with_requires_grad(true));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(unused).data(), &[0.0; 3]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf(Tensor::full([2], 1.0).with_requires_grad(true));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn entropy_of_fair_coin() {
        let mut tape: Tape<f32> = Tape::new();
        let z = tape.constant(Tensor::zeros([1, 2]));
        let h = tape.entropy(z).unwrap();
        assert!((tape.value(h).data()[0] - core::f32::consts::LN_2).abs() < 1e-6);
    }
}
