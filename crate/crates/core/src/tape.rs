//! Reverse-mode differentiation over [`Tensor2`] values.
//!
//! A [`Tape`] records every primitive applied to its variables. Nodes are
//! appended in evaluation order, so a node's parents always have smaller
//! indices and a single reverse sweep over the node list is a reverse
//! topological traversal.
//!
//! ```
//! use kgeu::{Tape, Tensor2};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor2::from_rows(&[vec![1.0, -2.0]]).unwrap());
//! let y = tape.relu(x);
//! let s = tape.sum(y);
//! let grads = tape.backward(s).unwrap();
//! assert_eq!(grads.wrt(x).data(), &[1.0, 0.0]);
//! ```
//!
//! Subgradients at the kinks of `relu`, `row_l1` and `row_l2` are zero.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{dot, SparseRows, Tensor2};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Constant,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    ScaleBy(usize, usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize),
    Relu(usize),
    Cos(usize),
    Sin(usize),
    GatherRows(usize, Arc<[usize]>),
    ScatterRows {
        base: usize,
        src: usize,
        index: Arc<[usize]>,
    },
    MeanRows(usize),
    Sum(usize),
    RowSum(usize),
    RowL1(usize),
    RowL2(usize),
    SpMM(Arc<SparseRows<T>>, usize),
    RelMessage {
        h: usize,
        w: usize,
        adj: Arc<SparseRows<T>>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor2<T>,
    op: Op<T>,
}

/// Recording of a differentiable computation. Confined to one worker.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar output with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor2<T>>>,
    shapes: Vec<(usize, usize)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor2<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient with respect to `v`, zero if `v` does not influence the output.
    pub fn wrt(&self, v: Var) -> Tensor2<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor2::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor2<T> {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor2::zeros(r, c)
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor2<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor2<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> Result<T> {
        self.value(v).item()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor2<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// An input that receives no gradient.
    pub fn constant(&mut self, value: Tensor2<T>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a.0, b.0)))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(value, Op::MatMulNt(a.0, b.0)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a.0, b.0)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(value, Op::Mul(a.0, b.0)))
    }

    pub fn scale(&mut self, a: Var, alpha: T) -> Var {
        let value = self.value(a).scale(alpha);
        self.push(value, Op::Scale(a.0, alpha))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|v| v + c);
        self.push(value, Op::AddScalar(a.0))
    }

    /// Multiplies every entry of `a` by the 1×1 variable `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let k = self.value(s).item()?;
        let value = self.value(a).scale(k);
        Ok(self.push(value, Op::ScaleBy(a.0, s.0)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor2<T>> = parts.iter().map(|p| self.value(*p)).collect();
        let value = Tensor2::concat_cols(&values)?;
        Ok(self.push(value, Op::ConcatCols(parts.iter().map(|p| p.0).collect())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor2<T>> = parts.iter().map(|p| self.value(*p)).collect();
        let value = Tensor2::concat_rows(&values)?;
        Ok(self.push(value, Op::ConcatRows(parts.iter().map(|p| p.0).collect())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(a).slice_cols(start, end)?;
        Ok(self.push(value, Op::SliceCols(a.0, start)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).relu();
        self.push(value, Op::Relu(a.0))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::cos);
        self.push(value, Op::Cos(a.0))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::sin);
        self.push(value, Op::Sin(a.0))
    }

    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let value = self.value(a).gather_rows(index)?;
        Ok(self.push(value, Op::GatherRows(a.0, index.into())))
    }

    /// Copy of `base` with row `index[k]` replaced by row `k` of `src`.
    pub fn scatter_rows(&mut self, base: Var, src: Var, index: &[usize]) -> Result<Var> {
        let (b, s) = (self.value(base), self.value(src));
        if b.cols() != s.cols() || s.rows() != index.len() {
            return Err(Error::dim(
                "scatter_rows",
                format!("{:?} into {:?} at {} rows", s.shape(), b.shape(), index.len()),
            ));
        }
        let mut value = b.clone();
        for (k, &i) in index.iter().enumerate() {
            if i >= b.rows() {
                return Err(Error::Index {
                    what: "scatter_rows",
                    index: i,
                    size: b.rows(),
                });
            }
            value.row_mut(i).copy_from_slice(s.row(k));
        }
        Ok(self.push(
            value,
            Op::ScatterRows {
                base: base.0,
                src: src.0,
                index: index.into(),
            },
        ))
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).mean_rows()?;
        Ok(self.push(value, Op::MeanRows(a.0)))
    }

    /// Sum of all entries, as a 1×1 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor2::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a.0))
    }

    /// Per-row sums, as a `rows × 1` tensor.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = (0..x.rows()).map(|i| x.row(i).iter().copied().sum()).collect();
        let value = Tensor2::from_vec(x.rows(), 1, data).expect("shape");
        self.push(value, Op::RowSum(a.0))
    }

    /// Per-row L1 norms, as a `rows × 1` tensor.
    pub fn row_l1(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = (0..x.rows())
            .map(|i| x.row(i).iter().map(|v| v.abs()).sum())
            .collect();
        let value = Tensor2::from_vec(x.rows(), 1, data).expect("shape");
        self.push(value, Op::RowL1(a.0))
    }

    /// Per-row L2 norms, as a `rows × 1` tensor.
    pub fn row_l2(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = (0..x.rows())
            .map(|i| dot(x.row(i), x.row(i)).sqrt())
            .collect();
        let value = Tensor2::from_vec(x.rows(), 1, data).expect("shape");
        self.push(value, Op::RowL2(a.0))
    }

    /// Sparse row combination `S · a`.
    pub fn spmm(&mut self, s: Arc<SparseRows<T>>, a: Var) -> Result<Var> {
        let value = s.apply(self.value(a))?;
        Ok(self.push(value, Op::SpMM(s, a.0)))
    }

    /// Relational message passing: row `i` of the result is `Σ_j adj_ij · W h_j`.
    ///
    /// Equivalent to `matmul_nt(spmm(adj, h), w)` but skips rows of `adj`
    /// without entries.
    pub fn rel_message(&mut self, h: Var, w: Var, adj: Arc<SparseRows<T>>) -> Result<Var> {
        let (hv, wv) = (self.value(h), self.value(w));
        let d = hv.cols();
        if wv.shape() != (d, d) || adj.cols() != hv.rows() {
            return Err(Error::dim(
                "rel_message",
                format!(
                    "h {:?}, w {:?}, adjacency {}x{}",
                    hv.shape(),
                    wv.shape(),
                    adj.rows(),
                    adj.cols()
                ),
            ));
        }
        let mut value = Tensor2::zeros(adj.rows(), d);
        let mut y = vec![T::zero(); d];
        for i in 0..adj.rows() {
            if adj.row_is_empty(i) {
                continue;
            }
            aggregate_row(&adj, i, hv, &mut y);
            let out = value.row_mut(i);
            for (k, o) in out.iter_mut().enumerate() {
                *o = dot(wv.row(k), &y);
            }
        }
        Ok(self.push(value, Op::RelMessage { h: h.0, w: w.0, adj }))
    }

    /// Smallest distance of any recorded `relu`, `row_l1` or `row_l2` input from its kink.
    ///
    /// Finite-difference checks are only meaningful when this is well above the step size.
    pub fn kink_margin(&self) -> T {
        let mut margin = T::infinity();
        for node in &self.nodes {
            match node.op {
                Op::Relu(a) | Op::RowL1(a) => {
                    for &v in self.nodes[a].value.data() {
                        margin = margin.min(v.abs());
                    }
                }
                Op::RowL2(_) => {
                    for &v in node.value.data() {
                        margin = margin.min(v);
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Gradients of the scalar `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor2::scalar(T::one()));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn propagate(&self, idx: usize, g: &Tensor2<T>, grads: &mut [Option<Tensor2<T>>]) {
        let node = &self.nodes[idx];
        let val = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                // dA = G Bᵀ, dB = Aᵀ G
                let ga = g.matmul_nt(val(*b)).expect("shape");
                let gb = val(*a).transpose().matmul(g).expect("shape");
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::MatMulNt(a, b) => {
                // C = A Bᵀ: dA = G B, dB = Gᵀ A
                let ga = g.matmul(val(*b)).expect("shape");
                let gb = g.transpose().matmul(val(*a)).expect("shape");
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                let ga = g.hadamard(val(*b)).expect("shape");
                let gb = g.hadamard(val(*a)).expect("shape");
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Scale(a, alpha) => accumulate(grads, *a, g.scale(*alpha)),
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::ScaleBy(a, s) => {
                let k = val(*s).data()[0];
                let gs = dot(g.data(), val(*a).data());
                accumulate(grads, *a, g.scale(k));
                accumulate(grads, *s, Tensor2::scalar(gs));
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = val(p).cols();
                    accumulate(grads, p, g.slice_cols(start, start + w).expect("shape"));
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let (r, c) = val(p).shape();
                    let data = g.data()[start * c..(start + r) * c].to_vec();
                    accumulate(grads, p, Tensor2::from_vec(r, c, data).expect("shape"));
                    start += r;
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = val(*a).shape();
                let mut ga = Tensor2::zeros(r, c);
                let w = g.cols();
                for i in 0..r {
                    ga.row_mut(i)[*start..*start + w].copy_from_slice(g.row(i));
                }
                accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let x = val(*a);
                let mut ga = g.clone();
                for (gv, &xv) in ga.data_mut().iter_mut().zip(x.data()) {
                    if xv <= T::zero() {
                        *gv = T::zero();
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Cos(a) => {
                let x = val(*a);
                let mut ga = g.clone();
                for (gv, &xv) in ga.data_mut().iter_mut().zip(x.data()) {
                    *gv *= -xv.sin();
                }
                accumulate(grads, *a, ga);
            }
            Op::Sin(a) => {
                let x = val(*a);
                let mut ga = g.clone();
                for (gv, &xv) in ga.data_mut().iter_mut().zip(x.data()) {
                    *gv *= xv.cos();
                }
                accumulate(grads, *a, ga);
            }
            Op::GatherRows(a, index) => {
                let (r, c) = val(*a).shape();
                let mut ga = Tensor2::zeros(r, c);
                for (k, &i) in index.iter().enumerate() {
                    for (o, &v) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::ScatterRows { base, src, index } => {
                let mut gb = g.clone();
                let (r, c) = val(*src).shape();
                let mut gs = Tensor2::zeros(r, c);
                // the last write to a row wins in the forward pass
                let mut owner = vec![usize::MAX; g.rows()];
                for (k, &i) in index.iter().enumerate() {
                    owner[i] = k;
                }
                for (i, &k) in owner.iter().enumerate() {
                    if k != usize::MAX {
                        gs.row_mut(k).copy_from_slice(g.row(i));
                        gb.row_mut(i).iter_mut().for_each(|v| *v = T::zero());
                    }
                }
                accumulate(grads, *base, gb);
                accumulate(grads, *src, gs);
            }
            Op::MeanRows(a) => {
                let (r, c) = val(*a).shape();
                let n = T::from_usize_lossy(r);
                let mut ga = Tensor2::zeros(r, c);
                for i in 0..r {
                    for (o, &v) in ga.row_mut(i).iter_mut().zip(g.row(0)) {
                        *o = v / n;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                accumulate(grads, *a, Tensor2::filled(r, c, g.data()[0]));
            }
            Op::RowSum(a) => {
                let (r, c) = val(*a).shape();
                let mut ga = Tensor2::zeros(r, c);
                for i in 0..r {
                    let gi = g.data()[i];
                    ga.row_mut(i).iter_mut().for_each(|v| *v = gi);
                }
                accumulate(grads, *a, ga);
            }
            Op::RowL1(a) => {
                let x = val(*a);
                let mut ga = Tensor2::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    let gi = g.data()[i];
                    for (o, &v) in ga.row_mut(i).iter_mut().zip(x.row(i)) {
                        *o = if v > T::zero() {
                            gi
                        } else if v < T::zero() {
                            -gi
                        } else {
                            T::zero()
                        };
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::RowL2(a) => {
                let x = val(*a);
                let norms = &node.value;
                let mut ga = Tensor2::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    let n = norms.data()[i];
                    if n == T::zero() {
                        continue;
                    }
                    let k = g.data()[i] / n;
                    for (o, &v) in ga.row_mut(i).iter_mut().zip(x.row(i)) {
                        *o = k * v;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::SpMM(s, a) => {
                let (r, c) = val(*a).shape();
                let mut ga = Tensor2::zeros(r, c);
                for i in 0..s.rows() {
                    for (j, w) in s.row(i) {
                        for (o, &v) in ga.row_mut(j).iter_mut().zip(g.row(i)) {
                            *o += w * v;
                        }
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::RelMessage { h, w, adj } => {
                let (hv, wv) = (val(*h), val(*w));
                let d = hv.cols();
                let mut gh = Tensor2::zeros(hv.rows(), d);
                let mut gw = Tensor2::zeros(d, d);
                let mut y = vec![T::zero(); d];
                let mut gy = vec![T::zero(); d];
                for i in 0..adj.rows() {
                    if adj.row_is_empty(i) {
                        continue;
                    }
                    let go = g.row(i);
                    if go.iter().all(|v| *v == T::zero()) {
                        continue;
                    }
                    aggregate_row(adj, i, hv, &mut y);
                    gy.iter_mut().for_each(|v| *v = T::zero());
                    for (k, &gk) in go.iter().enumerate() {
                        let wrow = wv.row(k);
                        let gwrow = gw.row_mut(k);
                        for m in 0..d {
                            gy[m] += gk * wrow[m];
                            gwrow[m] += gk * y[m];
                        }
                    }
                    for (j, c) in adj.row(i) {
                        for (o, &v) in gh.row_mut(j).iter_mut().zip(&gy) {
                            *o += c * v;
                        }
                    }
                }
                accumulate(grads, *h, gh);
                accumulate(grads, *w, gw);
            }
        }
    }
}

fn aggregate_row<T: Scalar>(adj: &SparseRows<T>, i: usize, h: &Tensor2<T>, y: &mut [T]) {
    y.iter_mut().for_each(|v| *v = T::zero());
    for (j, c) in adj.row(i) {
        for (o, &v) in y.iter_mut().zip(h.row(j)) {
            *o += c * v;
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor2<T>>], i: usize, g: Tensor2<T>) {
    match &mut grads[i] {
        Some(existing) => existing.axpy(T::one(), &g).expect("gradient shape"),
        slot @ None => *slot = Some(g),
    }
}
