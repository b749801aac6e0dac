//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value is a 2-D matrix; scalars are `1×1`. Backward rules are
//! themselves expressed with [`Var`] operations, so with
//! `create_graph = true` the returned gradients are differentiable again.
//! The gradient penalty of the validator relies on this.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Axis, Zip};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<usize> = const { Cell::new(0) };
}

fn next_id() -> usize {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Disables graph construction until dropped.
pub struct NoGradGuard {
    prev: bool,
}

pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|c| c.replace(false));
    NoGradGuard { prev }
}

fn set_grad_enabled(on: bool) -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|c| c.replace(on));
    NoGradGuard { prev }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|c| c.set(self.prev));
    }
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddScalar,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Sqrt,
    MatMul { ta: bool, tb: bool, blocks: usize },
    Transpose,
    Reshape,
    SliceCols { start: usize },
    PadCols { start: usize },
    SliceRows { start: usize },
    PadRows { start: usize },
    ConcatCols,
    ConcatRows,
    BroadcastRows,
    BroadcastCols,
    SumRows,
    SumCols,
    Gather(Rc<[usize]>),
    ScatterAdd(Rc<[usize]>),
    Shift { offset: isize, segment: usize },
}

struct Node {
    id: usize,
    value: Array2<f64>,
    requires_grad: bool,
    op: Op,
    parents: Vec<Var>,
}

/// A node in the computation graph.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Var {
    /// A trainable leaf.
    pub fn param(value: Array2<f64>) -> Var {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: true,
            op: Op::Leaf,
            parents: Vec::new(),
        }))
    }

    pub fn constant(value: Array2<f64>) -> Var {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: false,
            op: Op::Leaf,
            parents: Vec::new(),
        }))
    }

    pub fn scalar(x: f64) -> Var {
        Var::constant(Array2::from_elem((1, 1), x))
    }

    pub fn zeros(rows: usize, cols: usize) -> Var {
        Var::constant(Array2::zeros((rows, cols)))
    }

    fn from_op(value: Array2<f64>, op: Op, parents: Vec<Var>) -> Var {
        let requires_grad = is_grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if requires_grad {
            Var(Rc::new(Node {
                id: next_id(),
                value,
                requires_grad,
                op,
                parents,
            }))
        } else {
            Var::constant(value)
        }
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn value(&self) -> &Array2<f64> {
        &self.0.value
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.value.dim()
    }

    pub fn rows(&self) -> usize {
        self.0.value.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.value.ncols()
    }

    /// Value of a `1×1` variable.
    pub fn item(&self) -> f64 {
        assert_eq!(self.shape(), (1, 1), "item() on non-scalar");
        self.0.value[[0, 0]]
    }

    /// Stop-gradient: same value, no history.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    fn same_shape(&self, other: &Var, what: &str) {
        assert_eq!(
            self.shape(),
            other.shape(),
            "{what}: shape mismatch {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
    }

    pub fn add(&self, other: &Var) -> Var {
        self.same_shape(other, "add");
        Var::from_op(self.value() + other.value(), Op::Add, vec![self.clone(), other.clone()])
    }

    pub fn sub(&self, other: &Var) -> Var {
        self.same_shape(other, "sub");
        Var::from_op(self.value() - other.value(), Op::Sub, vec![self.clone(), other.clone()])
    }

    pub fn mul(&self, other: &Var) -> Var {
        self.same_shape(other, "mul");
        Var::from_op(self.value() * other.value(), Op::Mul, vec![self.clone(), other.clone()])
    }

    pub fn div(&self, other: &Var) -> Var {
        self.same_shape(other, "div");
        Var::from_op(self.value() / other.value(), Op::Div, vec![self.clone(), other.clone()])
    }

    pub fn neg(&self) -> Var {
        Var::from_op(self.value().mapv(|x| -x), Op::Neg, vec![self.clone()])
    }

    pub fn scale(&self, k: f64) -> Var {
        Var::from_op(self.value() * k, Op::Scale(k), vec![self.clone()])
    }

    pub fn add_scalar(&self, k: f64) -> Var {
        Var::from_op(self.value() + k, Op::AddScalar, vec![self.clone()])
    }

    pub fn square(&self) -> Var {
        self.mul(self)
    }

    pub fn tanh(&self) -> Var {
        Var::from_op(self.value().mapv(f64::tanh), Op::Tanh, vec![self.clone()])
    }

    pub fn sigmoid(&self) -> Var {
        Var::from_op(self.value().mapv(stable_sigmoid), Op::Sigmoid, vec![self.clone()])
    }

    pub fn exp(&self) -> Var {
        Var::from_op(self.value().mapv(f64::exp), Op::Exp, vec![self.clone()])
    }

    pub fn ln(&self) -> Var {
        Var::from_op(self.value().mapv(f64::ln), Op::Log, vec![self.clone()])
    }

    pub fn sqrt(&self) -> Var {
        Var::from_op(self.value().mapv(f64::sqrt), Op::Sqrt, vec![self.clone()])
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Var) -> Var {
        self.bmm(other, false, false, 1)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Var) -> Var {
        self.bmm(other, false, true, 1)
    }

    /// Block-diagonal matrix product. Both operands are `blocks` matrices
    /// stacked vertically; block `i` of the result is `op(A_i) · op(B_i)`
    /// where `op` optionally transposes.
    pub fn bmm(&self, other: &Var, ta: bool, tb: bool, blocks: usize) -> Var {
        let value = bmm_value(self.value(), other.value(), ta, tb, blocks);
        Var::from_op(
            value,
            Op::MatMul { ta, tb, blocks },
            vec![self.clone(), other.clone()],
        )
    }

    pub fn t(&self) -> Var {
        Var::from_op(
            self.value().t().as_standard_layout().into_owned(),
            Op::Transpose,
            vec![self.clone()],
        )
    }

    /// Row-major reshape.
    pub fn reshape(&self, rows: usize, cols: usize) -> Var {
        let (r, c) = self.shape();
        assert_eq!(r * c, rows * cols, "reshape: size mismatch");
        let flat: Vec<f64> = self.value().iter().copied().collect();
        let value = Array2::from_shape_vec((rows, cols), flat).expect("reshape");
        Var::from_op(value, Op::Reshape, vec![self.clone()])
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Var {
        assert!(start + len <= self.cols(), "slice_cols out of range");
        let value = self.value().slice(s![.., start..start + len]).to_owned();
        Var::from_op(value, Op::SliceCols { start }, vec![self.clone()])
    }

    /// Embeds `self` into a zero matrix of `total` columns at `start`.
    pub fn pad_cols(&self, start: usize, total: usize) -> Var {
        assert!(start + self.cols() <= total, "pad_cols out of range");
        let mut value = Array2::zeros((self.rows(), total));
        value
            .slice_mut(s![.., start..start + self.cols()])
            .assign(self.value());
        Var::from_op(value, Op::PadCols { start }, vec![self.clone()])
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Var {
        assert!(start + len <= self.rows(), "slice_rows out of range");
        let value = self.value().slice(s![start..start + len, ..]).to_owned();
        Var::from_op(value, Op::SliceRows { start }, vec![self.clone()])
    }

    pub fn pad_rows(&self, start: usize, total: usize) -> Var {
        assert!(start + self.rows() <= total, "pad_rows out of range");
        let mut value = Array2::zeros((total, self.cols()));
        value
            .slice_mut(s![start..start + self.rows(), ..])
            .assign(self.value());
        Var::from_op(value, Op::PadRows { start }, vec![self.clone()])
    }

    pub fn concat_cols(parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = parts[0].rows();
        assert!(parts.iter().all(|p| p.rows() == rows), "concat_cols: row mismatch");
        let views: Vec<_> = parts.iter().map(|p| p.value().view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols");
        Var::from_op(value, Op::ConcatCols, parts.to_vec())
    }

    pub fn concat_rows(parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = parts[0].cols();
        assert!(parts.iter().all(|p| p.cols() == cols), "concat_rows: col mismatch");
        let views: Vec<_> = parts.iter().map(|p| p.value().view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows");
        Var::from_op(value, Op::ConcatRows, parts.to_vec())
    }

    /// Repeats a `1×d` row `n` times.
    pub fn broadcast_rows(&self, n: usize) -> Var {
        assert_eq!(self.rows(), 1, "broadcast_rows expects a single row");
        let value = self
            .value()
            .broadcast((n, self.cols()))
            .expect("broadcast_rows")
            .to_owned();
        Var::from_op(value, Op::BroadcastRows, vec![self.clone()])
    }

    /// Repeats an `n×1` column `d` times.
    pub fn broadcast_cols(&self, d: usize) -> Var {
        assert_eq!(self.cols(), 1, "broadcast_cols expects a single column");
        let value = self
            .value()
            .broadcast((self.rows(), d))
            .expect("broadcast_cols")
            .to_owned();
        Var::from_op(value, Op::BroadcastCols, vec![self.clone()])
    }

    /// Column sums as a `1×d` row.
    pub fn sum_rows(&self) -> Var {
        let value = self.value().sum_axis(Axis(0)).insert_axis(Axis(0));
        Var::from_op(value, Op::SumRows, vec![self.clone()])
    }

    /// Row sums as an `n×1` column.
    pub fn sum_cols(&self) -> Var {
        let value = self.value().sum_axis(Axis(1)).insert_axis(Axis(1));
        Var::from_op(value, Op::SumCols, vec![self.clone()])
    }

    pub fn sum(&self) -> Var {
        self.sum_cols().sum_rows()
    }

    pub fn mean(&self) -> Var {
        let n = (self.rows() * self.cols()) as f64;
        self.sum().scale(1.0 / n)
    }

    /// `out[i] = self[idx[i]]`.
    pub fn gather_rows(&self, idx: &[usize]) -> Var {
        let n = self.rows();
        let mut value = Array2::zeros((idx.len(), self.cols()));
        for (i, &j) in idx.iter().enumerate() {
            assert!(j < n, "gather_rows index out of range");
            value.row_mut(i).assign(&self.value().row(j));
        }
        Var::from_op(value, Op::Gather(idx.into()), vec![self.clone()])
    }

    /// `out[idx[i]] += self[i]` into `rows` output rows.
    pub fn scatter_add_rows(&self, idx: &[usize], rows: usize) -> Var {
        assert_eq!(idx.len(), self.rows(), "scatter_add_rows: index length");
        let mut value = Array2::zeros((rows, self.cols()));
        for (i, &j) in idx.iter().enumerate() {
            let mut dst = value.row_mut(j);
            dst += &self.value().row(i);
        }
        Var::from_op(value, Op::ScatterAdd(idx.into()), vec![self.clone()])
    }

    /// Shifts rows down by `offset` within consecutive segments of
    /// `segment` rows, filling vacated rows with zeros.
    pub fn shift_rows(&self, offset: isize, segment: usize) -> Var {
        let value = shift_value(self.value(), offset, segment);
        Var::from_op(value, Op::Shift { offset, segment }, vec![self.clone()])
    }

    /// Adds a `1×d` row to every row.
    pub fn add_row(&self, row: &Var) -> Var {
        self.add(&row.broadcast_rows(self.rows()))
    }

    /// Multiplies each row by the matching entry of an `n×1` column.
    pub fn mul_col(&self, col: &Var) -> Var {
        self.mul(&col.broadcast_cols(self.cols()))
    }

    pub fn div_col(&self, col: &Var) -> Var {
        self.div(&col.broadcast_cols(self.cols()))
    }

    /// Numerically stable row-wise softmax.
    pub fn softmax_rows(&self) -> Var {
        let shifted = self.sub(&row_max_shift(self));
        let e = shifted.exp();
        e.div_col(&e.sum_cols())
    }

    pub fn log_softmax_rows(&self) -> Var {
        let shifted = self.sub(&row_max_shift(self));
        let lse = shifted.exp().sum_cols().ln();
        shifted.sub(&lse.broadcast_cols(self.cols()))
    }

    fn backward(&self, g: &Var) -> Vec<Option<Var>> {
        let node = &self.0;
        let p = &node.parents;
        let need = |i: usize| p[i].requires_grad();
        let one = |v: Var| vec![Some(v)];
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add => vec![need(0).then(|| g.clone()), need(1).then(|| g.clone())],
            Op::Sub => vec![need(0).then(|| g.clone()), need(1).then(|| g.neg())],
            Op::Mul => vec![
                need(0).then(|| g.mul(&p[1])),
                need(1).then(|| g.mul(&p[0])),
            ],
            Op::Div => vec![
                need(0).then(|| g.div(&p[1])),
                need(1).then(|| g.mul(self).div(&p[1]).neg()),
            ],
            Op::Neg => one(g.neg()),
            Op::Scale(k) => one(g.scale(*k)),
            Op::AddScalar => one(g.clone()),
            Op::Tanh => one(g.mul(&self.square().neg().add_scalar(1.0))),
            Op::Sigmoid => one(g.mul(&self.mul(&self.neg().add_scalar(1.0)))),
            Op::Exp => one(g.mul(self)),
            Op::Log => one(g.div(&p[0])),
            Op::Sqrt => one(g.div(self).scale(0.5)),
            Op::MatMul { ta, tb, blocks } => {
                let (a, b, n) = (&p[0], &p[1], *blocks);
                let da = need(0).then(|| match (ta, tb) {
                    (false, false) => g.bmm(b, false, true, n),
                    (true, false) => b.bmm(g, false, true, n),
                    (false, true) => g.bmm(b, false, false, n),
                    (true, true) => b.bmm(g, true, true, n),
                });
                let db = need(1).then(|| match (ta, tb) {
                    (false, false) => a.bmm(g, true, false, n),
                    (true, false) => a.bmm(g, false, false, n),
                    (false, true) => g.bmm(a, true, false, n),
                    (true, true) => g.bmm(a, true, true, n),
                });
                vec![da, db]
            }
            Op::Transpose => one(g.t()),
            Op::Reshape => one(g.reshape(p[0].rows(), p[0].cols())),
            Op::SliceCols { start } => one(g.pad_cols(*start, p[0].cols())),
            Op::PadCols { start } => one(g.slice_cols(*start, p[0].cols())),
            Op::SliceRows { start } => one(g.pad_rows(*start, p[0].rows())),
            Op::PadRows { start } => one(g.slice_rows(*start, p[0].rows())),
            Op::ConcatCols => {
                let mut at = 0;
                p.iter()
                    .map(|part| {
                        let w = part.cols();
                        let out = part.requires_grad().then(|| g.slice_cols(at, w));
                        at += w;
                        out
                    })
                    .collect()
            }
            Op::ConcatRows => {
                let mut at = 0;
                p.iter()
                    .map(|part| {
                        let h = part.rows();
                        let out = part.requires_grad().then(|| g.slice_rows(at, h));
                        at += h;
                        out
                    })
                    .collect()
            }
            Op::BroadcastRows => one(g.sum_rows()),
            Op::BroadcastCols => one(g.sum_cols()),
            Op::SumRows => one(g.broadcast_rows(p[0].rows())),
            Op::SumCols => one(g.broadcast_cols(p[0].cols())),
            Op::Gather(idx) => one(g.scatter_add_rows(idx, p[0].rows())),
            Op::ScatterAdd(idx) => one(g.gather_rows(idx)),
            Op::Shift { offset, segment } => one(g.shift_rows(-offset, *segment)),
        }
    }
}

/// Per-row maximum broadcast across columns, detached. Softmax is invariant
/// to per-row shifts, so treating it as a constant is exact at every order.
fn row_max_shift(x: &Var) -> Var {
    let (r, c) = x.shape();
    let mut m = Array2::zeros((r, c));
    for (i, row) in x.value().rows().into_iter().enumerate() {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        m.row_mut(i).fill(if mx.is_finite() { mx } else { 0.0 });
    }
    Var::constant(m)
}

pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn bmm_value(a: &Array2<f64>, b: &Array2<f64>, ta: bool, tb: bool, blocks: usize) -> Array2<f64> {
    assert!(blocks >= 1);
    assert_eq!(a.nrows() % blocks, 0, "bmm: lhs rows not divisible by blocks");
    assert_eq!(b.nrows() % blocks, 0, "bmm: rhs rows not divisible by blocks");
    let (ah, aw) = (a.nrows() / blocks, a.ncols());
    let (bh, bw) = (b.nrows() / blocks, b.ncols());
    let (m, k1) = if ta { (aw, ah) } else { (ah, aw) };
    let (k2, n) = if tb { (bw, bh) } else { (bh, bw) };
    assert_eq!(k1, k2, "bmm: inner dimension mismatch");
    let mut out = Array2::zeros((m * blocks, n));
    for i in 0..blocks {
        let ai = a.slice(s![i * ah..(i + 1) * ah, ..]);
        let bi = b.slice(s![i * bh..(i + 1) * bh, ..]);
        let ai = if ta { ai.reversed_axes() } else { ai };
        let bi = if tb { bi.reversed_axes() } else { bi };
        let mut oi = out.slice_mut(s![i * m..(i + 1) * m, ..]);
        general_mat_mul(1.0, &ai, &bi, 0.0, &mut oi);
    }
    out
}

fn shift_value(x: &Array2<f64>, offset: isize, segment: usize) -> Array2<f64> {
    assert!(segment >= 1 && x.nrows().is_multiple_of(segment), "shift_rows: bad segment");
    let mut out = Array2::zeros(x.dim());
    let seg = segment as isize;
    for base in (0..x.nrows()).step_by(segment) {
        for t in 0..seg {
            let src = t - offset;
            if (0..seg).contains(&src) {
                out.row_mut(base + t as usize)
                    .assign(&x.row(base + src as usize));
            }
        }
    }
    out
}

/// Gradients of `output` (seeded with ones) with respect to `wrt`.
///
/// With `create_graph` the result is itself part of the graph and can be
/// differentiated again. Inputs not reached by the graph get zero gradients.
pub fn grad(output: &Var, wrt: &[&Var], create_graph: bool) -> Vec<Var> {
    let zeros = |v: &Var| Var::zeros(v.rows(), v.cols());
    if !output.requires_grad() {
        return wrt.iter().map(|v| zeros(v)).collect();
    }
    let order = topo_order(output);
    let targets: HashSet<usize> = wrt.iter().map(|v| v.id()).collect();
    let _mode = set_grad_enabled(create_graph);

    let mut grads: HashMap<usize, Var> = HashMap::new();
    grads.insert(output.id(), Var::constant(Array2::ones(output.value().dim())));
    let mut kept: HashMap<usize, Var> = HashMap::new();
    for node in order.iter().rev() {
        let Some(g) = grads.remove(&node.id()) else {
            continue;
        };
        if targets.contains(&node.id()) {
            kept.insert(node.id(), g.clone());
        }
        for (parent, pg) in node.0.parents.iter().zip(node.backward(&g)) {
            let Some(pg) = pg else { continue };
            let merged = match grads.remove(&parent.id()) {
                Some(prev) => prev.add(&pg),
                None => pg,
            };
            grads.insert(parent.id(), merged);
        }
    }
    wrt.iter()
        .map(|v| kept.get(&v.id()).cloned().unwrap_or_else(|| zeros(v)))
        .collect()
}

fn topo_order(root: &Var) -> Vec<Var> {
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    let mut stack: Vec<(Var, bool)> = vec![(root.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if !seen.insert(v.id()) {
            continue;
        }
        stack.push((v.clone(), true));
        for p in &v.0.parents {
            if p.requires_grad() && !seen.contains(&p.id()) {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}

/// Elementwise helper used by callers that need a quick finiteness check.
pub fn all_finite(x: &Array2<f64>) -> bool {
    let mut ok = true;
    Zip::from(x).for_each(|v| ok &= v.is_finite());
    ok
}
