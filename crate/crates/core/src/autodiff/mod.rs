//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles.
//! [`Graph::backward`] walks the record in reverse and accumulates
//! `d loss / d param` into the [`ParamStore`] the parameters came from.
//!
//! ```
//! use odtte::autodiff::{Graph, ParamStore, Matrix};
//!
//! let mut store = ParamStore::new();
//! let x = store.add("x", Matrix::from_shape_vec((2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap());
//! let mut g = Graph::new();
//! let xv = g.param(&store, x);
//! let sq = g.square(xv);
//! let loss = g.sum(sq);
//! g.backward(loss, &mut store).unwrap();
//! assert_eq!(store.grad(x)[[1, 1]], 8.0);
//! ```

mod gradcheck;
mod params;
mod sparse;

use std::cell::Cell;
use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use params::{load_checkpoint, save_checkpoint, AdamConfig, ParamId, ParamStore};
pub use sparse::Csr;

pub type Matrix = Array2<f64>;

/// Inputs closer than this to a relu/abs kink are treated as "at the kink".
pub const KINK_GUARD: f64 = 1e-6;

thread_local! {
    static CORRUPT_TANH_BACKWARD: Cell<bool> = const { Cell::new(false) };
}

/// Test hook: when set, the tanh backward rule on the calling thread drops
/// its `1 - y^2` factor. Used to confirm that gradient checks catch a bad rule.
pub fn set_tanh_backward_fault(on: bool) {
    CORRUPT_TANH_BACKWARD.with(|c| c.set(on));
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Rc<[usize]>),
    Sum(Var),
    Mean(Var),
    Square(Var),
    Log(Var),
    Exp(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Abs(Var),
    Softplus(Var),
    SoftmaxRows(Var),
    SpMatMul(Rc<Csr>, Var),
    GroupLogSoftmax(Var, Rc<[usize]>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// A recorded computation. Not `Sync`; one graph per worker.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    kinks: Vec<u8>,
}

fn shape_str(m: &Matrix) -> String {
    format!("{}x{}", m.nrows(), m.ncols())
}

fn broadcast_dims(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| match (x, y) {
        _ if x == y => Some(x),
        (1, y) => Some(y),
        (x, 1) => Some(x),
        _ => None,
    };
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

/// Sums `g` down to `shape` along broadcast axes.
fn reduce_to(g: Matrix, shape: (usize, usize)) -> Matrix {
    let mut g = g;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Which side of every relu/abs kink each input element fell on.
    pub fn kink_signature(&self) -> &[u8] {
        &self.kinks
    }

    /// A constant (no gradient flows out of the graph through it).
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.nrows() {
            return Err(Error::shape("matmul", format!("lhs {} vs rhs {}", shape_str(av), shape_str(bv))));
        }
        let out = av.dot(bv);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        let (av, bv) = (self.value(a), self.value(b));
        let shape = broadcast_dims(av.dim(), bv.dim())
            .ok_or_else(|| Error::shape(name, format!("lhs {} vs rhs {}", shape_str(av), shape_str(bv))))?;
        let ab = av.broadcast(shape).unwrap();
        let bb = bv.broadcast(shape).unwrap();
        Ok(Zip::from(&ab).and(&bb).map_collect(|&x, &y| f(x, y)))
    }

    /// Elementwise sum; either side may be a row, column or 1x1 broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("div", a, b, |x, y| x / y)?;
        Ok(self.push(out, Op::Div(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a) * k;
        self.push(out, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a) + k;
        self.push(out, Op::AddScalar(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().as_standard_layout().into_owned();
        self.push(out, Op::Transpose(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_cols", "no operands"))?;
        let rows = self.value(*first).nrows();
        for p in parts {
            if self.value(*p).nrows() != rows {
                return Err(Error::shape(
                    "concat_cols",
                    format!("{} vs {}", shape_str(self.value(*first)), shape_str(self.value(*p))),
                ));
            }
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).unwrap();
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn gather_rows(&mut self, a: Var, rows: impl Into<Rc<[usize]>>) -> Result<Var> {
        let rows: Rc<[usize]> = rows.into();
        let av = self.value(a);
        if let Some(bad) = rows.iter().find(|&&r| r >= av.nrows()) {
            return Err(Error::shape("gather_rows", format!("row {bad} out of range for {}", shape_str(av))));
        }
        let out = av.select(Axis(0), &rows);
        Ok(self.push(out, Op::GatherRows(a, rows)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::from_elem((1, 1), self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Matrix::from_elem((1, 1), v.sum() / v.len() as f64);
        self.push(out, Op::Mean(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * x);
        self.push(out, Op::Square(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::ln);
        self.push(out, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    fn record_kinks(&mut self, a: Var) {
        let sig: Vec<u8> =
            self.value(a).iter().map(|&x| (x > 0.0) as u8 | (((x.abs() < KINK_GUARD) as u8) << 1)).collect();
        self.kinks.extend(sig);
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.record_kinks(a);
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.record_kinks(a);
        let out = self.value(a).mapv(f64::abs);
        self.push(out, Op::Abs(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(softplus);
        self.push(out, Op::Softplus(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let total = row.sum();
            row.mapv_inplace(|x| x / total);
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// `A * x` for a constant sparse `A`.
    pub fn sp_matmul(&mut self, a: Rc<Csr>, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if a.ncols() != xv.nrows() {
            return Err(Error::shape(
                "sp_matmul",
                format!("sparse {}x{} vs dense {}", a.nrows(), a.ncols(), shape_str(xv)),
            ));
        }
        let out = a.matmul(xv);
        Ok(self.push(out, Op::SpMatMul(a, x)))
    }

    /// Log-softmax over contiguous groups of a column vector. Group `g`
    /// covers rows `offsets[g]..offsets[g + 1]`; empty groups are allowed.
    pub fn group_log_softmax(&mut self, a: Var, offsets: impl Into<Rc<[usize]>>) -> Result<Var> {
        let offsets: Rc<[usize]> = offsets.into();
        let av = self.value(a);
        if av.ncols() != 1 || offsets.last().copied().unwrap_or(0) != av.nrows() {
            return Err(Error::shape(
                "group_log_softmax",
                format!("input {} vs group end {:?}", shape_str(av), offsets.last()),
            ));
        }
        let mut out = av.clone();
        for w in offsets.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            if lo == hi {
                continue;
            }
            let seg = av.slice(s![lo..hi, 0]);
            let max = seg.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + seg.mapv(|x| (x - max).exp()).sum().ln();
            out.slice_mut(s![lo..hi, 0]).mapv_inplace(|x| x - lse);
        }
        Ok(self.push(out, Op::GroupLogSoftmax(a, offsets)))
    }

    /// Computes gradients of a 1x1 `loss` and adds the parameter gradients
    /// into `store`. Returns the gradient of every node for inspection.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.gradients(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.0[i]) {
                store.accumulate_grad(*id, g);
            }
        }
        Ok(grads)
    }

    /// Gradients of every node w.r.t. the 1x1 `loss`, without touching any store.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::shape("backward", format!("loss must be 1x1, got {}", shape_str(self.value(loss)))));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients(grads))
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let y = &self.nodes[i].value;
        let val = |v: &Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, d: Matrix| match &mut grads[v.0] {
            Some(existing) => *existing += &d,
            slot @ None => *slot = Some(d),
        };
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                acc(*a, g.dot(&val(b).t()));
                acc(*b, val(a).t().dot(g));
            }
            Op::Add(a, b) => {
                acc(*a, reduce_to(g.clone(), val(a).dim()));
                acc(*b, reduce_to(g.clone(), val(b).dim()));
            }
            Op::Sub(a, b) => {
                acc(*a, reduce_to(g.clone(), val(a).dim()));
                acc(*b, reduce_to(-g, val(b).dim()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let bb = bv.broadcast(g.dim()).unwrap();
                let ab = av.broadcast(g.dim()).unwrap();
                acc(*a, reduce_to(g * &bb, av.dim()));
                acc(*b, reduce_to(g * &ab, bv.dim()));
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(a), val(b));
                let bb = bv.broadcast(g.dim()).unwrap();
                let ab = av.broadcast(g.dim()).unwrap();
                acc(*a, reduce_to(g / &bb, av.dim()));
                let db = Zip::from(g).and(&ab).and(&bb).map_collect(|&gi, &x, &y| -gi * x / (y * y));
                acc(*b, reduce_to(db, bv.dim()));
            }
            Op::Scale(a, k) => acc(*a, g * *k),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Transpose(a) => acc(*a, g.t().as_standard_layout().into_owned()),
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for p in parts {
                    let w = val(p).ncols();
                    acc(*p, g.slice(s![.., col..col + w]).to_owned());
                    col += w;
                }
            }
            Op::GatherRows(a, rows) => {
                let mut d = Matrix::zeros(val(a).dim());
                for (k, &r) in rows.iter().enumerate() {
                    let mut dst = d.row_mut(r);
                    dst += &g.row(k);
                }
                acc(*a, d);
            }
            Op::Sum(a) => acc(*a, Matrix::from_elem(val(a).dim(), g[[0, 0]])),
            Op::Mean(a) => {
                let n = val(a).len() as f64;
                acc(*a, Matrix::from_elem(val(a).dim(), g[[0, 0]] / n));
            }
            Op::Square(a) => acc(*a, Zip::from(g).and(val(a)).map_collect(|&gi, &x| 2.0 * x * gi)),
            Op::Log(a) => acc(*a, Zip::from(g).and(val(a)).map_collect(|&gi, &x| gi / x)),
            Op::Exp(a) => acc(*a, g * y),
            Op::Sigmoid(a) => acc(*a, Zip::from(g).and(y).map_collect(|&gi, &s| gi * s * (1.0 - s))),
            Op::Tanh(a) => {
                if CORRUPT_TANH_BACKWARD.with(Cell::get) {
                    acc(*a, g.clone());
                } else {
                    acc(*a, Zip::from(g).and(y).map_collect(|&gi, &t| gi * (1.0 - t * t)));
                }
            }
            Op::Relu(a) => acc(*a, Zip::from(g).and(val(a)).map_collect(|&gi, &x| if x > 0.0 { gi } else { 0.0 })),
            Op::Abs(a) => {
                acc(*a, Zip::from(g).and(val(a)).map_collect(|&gi, &x| gi * x.signum() * (x != 0.0) as u8 as f64))
            }
            Op::Softplus(a) => acc(*a, Zip::from(g).and(val(a)).map_collect(|&gi, &x| gi * sigmoid(x))),
            Op::SoftmaxRows(a) => {
                let mut d = g * y;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let dot = drow.sum();
                    Zip::from(&mut drow).and(&yrow).for_each(|dv, &yv| *dv -= yv * dot);
                }
                acc(*a, d);
            }
            Op::SpMatMul(m, x) => acc(*x, m.t_matmul(g)),
            Op::GroupLogSoftmax(a, offsets) => {
                let mut d = g.clone();
                for w in offsets.windows(2) {
                    let (lo, hi) = (w[0], w[1]);
                    let total: f64 = g.slice(s![lo..hi, 0]).sum();
                    for r in lo..hi {
                        d[[r, 0]] -= y[[r, 0]].exp() * total;
                    }
                }
                acc(*a, d);
            }
        }
    }
}

/// Per-node gradients produced by [`Graph::gradients`].
#[derive(Debug)]
pub struct Gradients(Vec<Option<Matrix>>);

impl Gradients {
    /// Gradient w.r.t. `v`; `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.0.get(v.0).and_then(Option::as_ref)
    }
}
