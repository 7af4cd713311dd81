//! Reverse-mode differentiation over complex matrices.
//!
//! Gradients follow the convention `G = ∂L/∂Re(x) + i ∂L/∂Im(x)` for a real
//! scalar loss `L`, so a first-order change is `dL = Re Σ conj(G) dx`. With
//! that convention a holomorphic `y = f(x)` back-propagates as
//! `G_x = conj(f'(x)) G_y`. Ops documented as real read only `Re(x)` and emit
//! real values; their adjoints only use `Re(G_y)`.

use std::collections::HashMap;

use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::{ComplexTensor, C64, ONE, ZERO};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulSplit(Var, Var),
    MatMul(Var, Var),
    MatMulAdj(Var, Var),
    Scale(Var, C64),
    RealPart(Var),
    Abs(Var),
    Exp(Var),
    ExpI(Var),
    Sqrt(Var),
    Silu(Var),
    SoftmaxRows(Var),
    RmsNorm(Var, Vec<f64>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    AddRows(Var, Var, usize),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    RepeatCols(Var, usize),
    ReIm(Var),
    Pairs(Var),
    SumSq(Var),
    Sum(Var),
    CrossEntropy(Var, Vec<usize>),
}

struct Node {
    value: ComplexTensor,
    op: Op,
    needs_grad: bool,
}

/// Records a computation so that gradients of a scalar can be pulled back.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Adjoints for every node of a tape, indexed by [`Var`].
pub struct Gradients(Vec<Option<ComplexTensor>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&ComplexTensor> {
        self.0[v.0].as_ref()
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Bcast {
    Same,
    Row,
    Scalar,
}

fn bcast(a: &ComplexTensor, b: &ComplexTensor) -> Bcast {
    if a.shape() == b.shape() {
        Bcast::Same
    } else if b.shape() == (1, 1) {
        Bcast::Scalar
    } else if b.rows() == 1 && b.cols() == a.cols() {
        Bcast::Row
    } else {
        panic!("cannot broadcast {:?} onto {:?}", b.shape(), a.shape())
    }
}

fn b_at(b: &ComplexTensor, mode: Bcast, idx: usize, cols: usize) -> C64 {
    match mode {
        Bcast::Same => b.data()[idx],
        Bcast::Row => b.data()[idx % cols],
        Bcast::Scalar => b.data()[0],
    }
}

/// Sums a full-shape adjoint back down to a broadcast operand's shape.
fn reduce(g: ComplexTensor, mode: Bcast) -> ComplexTensor {
    match mode {
        Bcast::Same => g,
        Bcast::Scalar => ComplexTensor::from_vec(1, 1, vec![g.sum()]),
        Bcast::Row => {
            let mut out = ComplexTensor::zeros(1, g.cols());
            for r in 0..g.rows() {
                for (o, v) in out.data_mut().iter_mut().zip(g.row(r)) {
                    *o += v;
                }
            }
            out
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn real(x: f64) -> C64 {
    C64::new(x, 0.0)
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

    pub fn value(&self, v: Var) -> &ComplexTensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: ComplexTensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: ComplexTensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable input that is not a stored parameter.
    pub fn input(&mut self, t: ComplexTensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// The leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let mode = bcast(va, vb);
        let cols = va.cols();
        let mut out = va.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += b_at(vb, mode, i, cols);
        }
        let n = self.needs(&[a, b]);
        self.push(out, Op::Add(a, b), n)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let mode = bcast(va, vb);
        let cols = va.cols();
        let mut out = va.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o -= b_at(vb, mode, i, cols);
        }
        let n = self.needs(&[a, b]);
        self.push(out, Op::Sub(a, b), n)
    }

    /// Elementwise complex product; `b` may broadcast as a row or scalar.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let mode = bcast(va, vb);
        let cols = va.cols();
        let mut out = va.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o *= b_at(vb, mode, i, cols);
        }
        let n = self.needs(&[a, b]);
        self.push(out, Op::Mul(a, b), n)
    }

    /// Product of real parts plus `i` times product of imaginary parts.
    pub fn mul_split(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let mode = bcast(va, vb);
        let cols = va.cols();
        let mut out = va.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            let y = b_at(vb, mode, i, cols);
            *o = C64::new(o.re * y.re, o.im * y.im);
        }
        let n = self.needs(&[a, b]);
        self.push(out, Op::MulSplit(a, b), n)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let n = self.needs(&[a, b]);
        self.push(out, Op::MatMul(a, b), n)
    }

    /// `a · bᴴ`.
    pub fn matmul_adjoint(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_adjoint(self.value(b));
        let n = self.needs(&[a, b]);
        self.push(out, Op::MatMulAdj(a, b), n)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.scale_complex(a, real(s))
    }

    pub fn scale_complex(&mut self, a: Var, s: C64) -> Var {
        let out = self.value(a).map(|z| z * s);
        let n = self.needs(&[a]);
        self.push(out, Op::Scale(a, s), n)
    }

    pub fn real_part(&mut self, a: Var) -> Var {
        let out = self.value(a).re();
        let n = self.needs(&[a]);
        self.push(out, Op::RealPart(a), n)
    }

    /// Elementwise modulus (real).
    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|z| real(z.norm()));
        let n = self.needs(&[a]);
        self.push(out, Op::Abs(a), n)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|z| z.exp());
        let n = self.needs(&[a]);
        self.push(out, Op::Exp(a), n)
    }

    /// `exp(i Re(a))`, a unit phasor per element.
    pub fn exp_i(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|z| C64::from_polar(1.0, z.re));
        let n = self.needs(&[a]);
        self.push(out, Op::ExpI(a), n)
    }

    /// Square root of real, positive values.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|z| real(z.re.sqrt()));
        let n = self.needs(&[a]);
        self.push(out, Op::Sqrt(a), n)
    }

    /// SiLU applied separately to the real and imaginary parts.
    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|z| C64::new(silu(z.re), silu(z.im)));
        let n = self.needs(&[a]);
        self.push(out, Op::Silu(a), n)
    }

    /// Row-wise softmax of the real parts.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = ComplexTensor::zeros(va.rows(), va.cols());
        for r in 0..va.rows() {
            let row = va.row(r);
            let m = row.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            let dst = out.row_mut(r);
            for (d, z) in dst.iter_mut().zip(row) {
                let e = (z.re - m).exp();
                total += e;
                *d = real(e);
            }
            for d in dst.iter_mut() {
                *d = real(d.re / total);
            }
        }
        let n = self.needs(&[a]);
        self.push(out, Op::SoftmaxRows(a), n)
    }

    /// `x / sqrt(mean |x|² + eps)` per row.
    pub fn rms_normalize(&mut self, a: Var, eps: f64) -> Var {
        let va = self.value(a);
        let d = va.cols() as f64;
        let mut out = va.clone();
        let mut scales = Vec::with_capacity(va.rows());
        for r in 0..va.rows() {
            let ms = va.row(r).iter().map(|z| z.norm_sqr()).sum::<f64>() / d;
            let s = 1.0 / (ms + eps).sqrt();
            for z in out.row_mut(r) {
                *z *= s;
            }
            scales.push(s);
        }
        let n = self.needs(&[a]);
        self.push(out, Op::RmsNorm(a, scales), n)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_rows(start, len);
        let n = self.needs(&[a]);
        self.push(out, Op::SliceRows(a, start), n)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_cols(start, len);
        let n = self.needs(&[a]);
        self.push(out, Op::SliceCols(a, start), n)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&ComplexTensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ComplexTensor::concat_rows(&vals);
        let n = self.needs(parts);
        self.push(out, Op::ConcatRows(parts.to_vec()), n)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&ComplexTensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ComplexTensor::concat_cols(&vals);
        let n = self.needs(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), n)
    }

    /// Copy of `a` with `b` added to rows `offset..offset + b.rows()`.
    pub fn add_rows(&mut self, a: Var, b: Var, offset: usize) -> Var {
        let mut out = self.value(a).clone();
        let vb = self.value(b);
        assert_eq!(vb.cols(), out.cols(), "column count mismatch");
        assert!(offset + vb.rows() <= out.rows(), "row block out of range");
        for r in 0..vb.rows() {
            for (o, v) in out.row_mut(offset + r).iter_mut().zip(vb.row(r)) {
                *o += v;
            }
        }
        let n = self.needs(&[a, b]);
        self.push(out, Op::AddRows(a, b, offset), n)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let va = self.value(a);
        let rows: Vec<ComplexTensor> = idx.iter().map(|&i| va.slice_rows(i, 1)).collect();
        let refs: Vec<&ComplexTensor> = rows.iter().collect();
        let out = ComplexTensor::concat_rows(&refs);
        let n = self.needs(&[a]);
        self.push(out, Op::GatherRows(a, idx.to_vec()), n)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let out = self.value(a).reshape(rows, cols);
        let n = self.needs(&[a]);
        self.push(out, Op::Reshape(a), n)
    }

    /// Repeats every column `k` times in place: `[a, b] -> [a, a, b, b]` for `k = 2`.
    pub fn repeat_cols(&mut self, a: Var, k: usize) -> Var {
        let va = self.value(a);
        let out = ComplexTensor::from_fn(va.rows(), va.cols() * k, |r, c| va.get(r, c / k));
        let n = self.needs(&[a]);
        self.push(out, Op::RepeatCols(a, k), n)
    }

    /// Complex `r x c` to real `r x 2c` as `[Re | Im]`.
    pub fn re_im(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let c = va.cols();
        let out = ComplexTensor::from_fn(va.rows(), 2 * c, |r, j| {
            let z = va.get(r, j % c);
            real(if j < c { z.re } else { z.im })
        });
        let n = self.needs(&[a]);
        self.push(out, Op::ReIm(a), n)
    }

    /// Real `r x 2c` as `[Re | Im]` to complex `r x c`.
    pub fn pairs(&mut self, a: Var) -> Var {
        let va = self.value(a);
        assert!(va.cols().is_multiple_of(2), "pairs needs an even column count");
        let c = va.cols() / 2;
        let out = ComplexTensor::from_fn(va.rows(), c, |r, j| C64::new(va.get(r, j).re, va.get(r, c + j).re));
        let n = self.needs(&[a]);
        self.push(out, Op::Pairs(a), n)
    }

    /// `Σ |a|²` as a real scalar.
    pub fn sum_sq(&mut self, a: Var) -> Var {
        let out = ComplexTensor::scalar(self.value(a).norm_sqr());
        let n = self.needs(&[a]);
        self.push(out, Op::SumSq(a), n)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = ComplexTensor::from_vec(1, 1, vec![self.value(a).sum()]);
        let n = self.needs(&[a]);
        self.push(out, Op::Sum(a), n)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let len = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / len)
    }

    /// Mean over rows of `-log softmax(Re(logits))[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let v = self.value(logits);
        assert_eq!(v.rows(), targets.len(), "one target per row");
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = v.row(r);
            let m = row.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|z| (z.re - m).exp()).sum::<f64>().ln();
            total += lse - row[t].re;
        }
        let out = ComplexTensor::scalar(total / targets.len() as f64);
        let n = self.needs(&[logits]);
        self.push(out, Op::CrossEntropy(logits, targets.to_vec()), n)
    }

    /// Adjoints of every node with respect to the real part of scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).shape(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<ComplexTensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(ComplexTensor::from_vec(1, 1, vec![ONE]));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.pull_back(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients(grads)
    }

    fn pull_back(&self, i: usize, g: &ComplexTensor, grads: &mut [Option<ComplexTensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut acc = |v: Var, delta: ComplexTensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let mode = bcast(self.value(*a), self.value(*b));
                let sign = if matches!(node.op, Op::Add(..)) { 1.0 } else { -1.0 };
                acc(*a, g.clone());
                acc(*b, reduce(g.scale(sign), mode));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let mode = bcast(va, vb);
                let cols = va.cols();
                let mut ga = g.clone();
                let mut gb = g.clone();
                for (k, (x, z)) in ga.data_mut().iter_mut().zip(gb.data_mut()).enumerate() {
                    *x *= b_at(vb, mode, k, cols).conj();
                    *z *= va.data()[k].conj();
                }
                acc(*a, ga);
                acc(*b, reduce(gb, mode));
            }
            Op::MulSplit(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let mode = bcast(va, vb);
                let cols = va.cols();
                let mut ga = g.clone();
                let mut gb = g.clone();
                for (k, (x, z)) in ga.data_mut().iter_mut().zip(gb.data_mut()).enumerate() {
                    let bv = b_at(vb, mode, k, cols);
                    let av = va.data()[k];
                    *x = C64::new(x.re * bv.re, x.im * bv.im);
                    *z = C64::new(z.re * av.re, z.im * av.im);
                }
                acc(*a, ga);
                acc(*b, reduce(gb, mode));
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].needs_grad {
                    acc(*a, g.matmul_adjoint(vb));
                }
                if self.nodes[b.0].needs_grad {
                    acc(*b, va.adjoint_matmul(g));
                }
            }
            Op::MatMulAdj(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].needs_grad {
                    acc(*a, g.matmul(vb));
                }
                if self.nodes[b.0].needs_grad {
                    acc(*b, g.adjoint_matmul(va));
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|z| z * s.conj())),
            Op::RealPart(a) => acc(*a, g.re()),
            Op::Abs(a) => {
                let va = self.value(*a);
                acc(
                    *a,
                    g.zip_map(va, |gz, x| {
                        let m = x.norm();
                        if m > 0.0 {
                            x * (gz.re / m)
                        } else {
                            ZERO
                        }
                    }),
                );
            }
            Op::Exp(a) => acc(*a, g.zip_map(y, |gz, yz| gz * yz.conj())),
            Op::ExpI(a) => acc(*a, g.zip_map(y, |gz, yz| real(gz.im * yz.re - gz.re * yz.im))),
            Op::Sqrt(a) => acc(*a, g.zip_map(y, |gz, yz| real(gz.re / (2.0 * yz.re)))),
            Op::Silu(a) => {
                let va = self.value(*a);
                acc(*a, g.zip_map(va, |gz, x| C64::new(gz.re * silu_grad(x.re), gz.im * silu_grad(x.im))));
            }
            Op::SoftmaxRows(a) => {
                let mut ga = ComplexTensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p.re * q.re).sum();
                    for ((d, p), q) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *d = real(p.re * (q.re - dot));
                    }
                }
                acc(*a, ga);
            }
            Op::RmsNorm(a, scales) => {
                let va = self.value(*a);
                let d = va.cols() as f64;
                let mut ga = ComplexTensor::zeros(va.rows(), va.cols());
                for (r, &s) in scales.iter().enumerate() {
                    let (xr, gr) = (va.row(r), g.row(r));
                    let c: f64 = xr.iter().zip(gr).map(|(x, q)| (q.conj() * x).re).sum();
                    let k = s * s * s * c / d;
                    for ((o, x), q) in ga.row_mut(r).iter_mut().zip(xr).zip(gr) {
                        *o = q * s - x * k;
                    }
                }
                acc(*a, ga);
            }
            Op::SliceRows(a, start) => {
                let va = self.value(*a);
                let mut ga = ComplexTensor::zeros(va.rows(), va.cols());
                for r in 0..g.rows() {
                    ga.row_mut(start + r).copy_from_slice(g.row(r));
                }
                acc(*a, ga);
            }
            Op::SliceCols(a, start) => {
                let va = self.value(*a);
                let mut ga = ComplexTensor::zeros(va.rows(), va.cols());
                for r in 0..g.rows() {
                    ga.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = self.value(*p).rows();
                    acc(*p, g.slice_rows(start, rows));
                    start += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let cols = self.value(*p).cols();
                    acc(*p, g.slice_cols(start, cols));
                    start += cols;
                }
            }
            Op::AddRows(a, b, offset) => {
                let rows = self.value(*b).rows();
                acc(*a, g.clone());
                acc(*b, g.slice_rows(*offset, rows));
            }
            Op::GatherRows(a, idx) => {
                let va = self.value(*a);
                let mut ga = ComplexTensor::zeros(va.rows(), va.cols());
                for (r, &src) in idx.iter().enumerate() {
                    for (o, q) in ga.row_mut(src).iter_mut().zip(g.row(r)) {
                        *o += q;
                    }
                }
                acc(*a, ga);
            }
            Op::Reshape(a) => {
                let (r, c) = self.value(*a).shape();
                acc(*a, g.reshape(r, c));
            }
            Op::RepeatCols(a, k) => {
                let va = self.value(*a);
                let mut ga = ComplexTensor::zeros(va.rows(), va.cols());
                for r in 0..g.rows() {
                    for (j, q) in g.row(r).iter().enumerate() {
                        ga.row_mut(r)[j / k] += q;
                    }
                }
                acc(*a, ga);
            }
            Op::ReIm(a) => {
                let c = self.value(*a).cols();
                acc(*a, ComplexTensor::from_fn(g.rows(), c, |r, j| C64::new(g.get(r, j).re, g.get(r, c + j).re)));
            }
            Op::Pairs(a) => {
                let c = g.cols();
                acc(
                    *a,
                    ComplexTensor::from_fn(g.rows(), 2 * c, |r, j| {
                        let q = g.get(r, j % c);
                        real(if j < c { q.re } else { q.im })
                    }),
                );
            }
            Op::SumSq(a) => {
                let s = 2.0 * g.item();
                acc(*a, self.value(*a).scale(s));
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                acc(*a, ComplexTensor::filled(r, c, g.data()[0]));
            }
            Op::CrossEntropy(logits, targets) => {
                let v = self.value(*logits);
                let scale = g.item() / targets.len() as f64;
                let mut ga = ComplexTensor::zeros(v.rows(), v.cols());
                for (r, &t) in targets.iter().enumerate() {
                    let row = v.row(r);
                    let m = row.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
                    let total: f64 = row.iter().map(|z| (z.re - m).exp()).sum();
                    for (j, (o, z)) in ga.row_mut(r).iter_mut().zip(row).enumerate() {
                        let p = (z.re - m).exp() / total;
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        *o = real(scale * (p - onehot));
                    }
                }
                acc(*logits, ga);
            }
        }
    }

    /// Gradients of the stored parameters, projected onto the real axis for
    /// real parameters; parameters that never entered the tape get zeros.
    pub fn param_grads(&self, grads: &Gradients, store: &ParamStore) -> ParamGrads {
        let mut out = store.zero_grads();
        for (&id, &v) in &self.params {
            if let Some(g) = grads.get(v) {
                let g = if store.is_real(id) { g.re() } else { g.clone() };
                out.set(id, g);
            }
        }
        out
    }
}
