//! Reverse-mode automatic differentiation over matrices.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a `1 x 1` output walks the record in reverse and
//! accumulates gradients for every node that transitively depends on a
//! gradient-requiring leaf. Subgraphs built only from constants are never
//! visited.
//!
//! Operations take `&self` so calls can nest freely:
//!
//! ```
//! use spen_core::autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.var(Tensor::row_vector(vec![1.0, 2.0]));
//! let y = tape.sum_sq(x);
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 4.0]);
//! ```
//!
//! Shape mismatches are programming errors and panic with the op name and
//! both shapes; data-dependent validation happens at module boundaries.

use std::cell::RefCell;
use std::rc::Rc;

use super::params::{ParamId, ParamStore};
use super::tensor::{matmul_at_into, matmul_bt_into, matmul_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    None,
    Row,
    Col,
    Scalar,
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Affine(usize, usize, usize),
    Add(usize, usize, Bcast),
    Sub(usize, usize, Bcast),
    Mul(usize, usize, Bcast),
    Scale(usize, f64),
    AddScalar(usize),
    Sigmoid(usize),
    Tanh(usize),
    Softplus(usize),
    Exp(usize),
    Log(usize),
    LogClamp(usize, f64),
    Relu(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    LogSumExpRows(usize),
    Sum(usize),
    SumRows(usize),
    SumSq(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    Transpose(usize),
    /// Scalar-valued op with partial derivatives computed during the forward pass.
    ScalarFn(Vec<(usize, Tensor)>),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Record of operations for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Parameters of one [`ParamStore`] bound as leaves of a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
    trainable: bool,
}

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.index()]
    }
}

/// Result of a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients for every parameter of a bound store, in store order.
    /// Parameters the output does not depend on get `None`.
    pub fn for_params(&mut self, bound: &Bound) -> Vec<Option<Tensor>> {
        bound
            .vars
            .iter()
            .map(|v| self.grads.get_mut(v.0).and_then(Option::take))
            .collect()
    }
}

fn bcast_kind(op: &str, a: &Tensor, b: &Tensor) -> Bcast {
    if a.rows() == b.rows() && a.cols() == b.cols() {
        Bcast::None
    } else if b.rows() == 1 && b.cols() == 1 {
        Bcast::Scalar
    } else if b.rows() == 1 && b.cols() == a.cols() {
        Bcast::Row
    } else if b.cols() == 1 && b.rows() == a.rows() {
        Bcast::Col
    } else {
        panic!(
            "shape mismatch in {op}: {}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )
    }
}

#[inline]
fn bidx(kind: Bcast, cols: usize, k: usize) -> usize {
    match kind {
        Bcast::None => k,
        Bcast::Row => k % cols,
        Bcast::Col => k / cols,
        Bcast::Scalar => 0,
    }
}

fn reduce_bcast(kind: Bcast, g: &Tensor, b: &Tensor, scale: impl Fn(usize) -> f64) -> Tensor {
    let cols = g.cols();
    let mut out = vec![0.0; b.len()];
    for (k, &gv) in g.data().iter().enumerate() {
        out[bidx(kind, cols, k)] += gv * scale(k);
    }
    Tensor::from_rows(b.rows(), b.cols(), out)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    for x in xs.iter_mut() {
        *x /= z;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops every recorded node so the tape can be reused.
    pub fn reset(&self) {
        self.nodes.borrow_mut().clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_rc(Rc::new(value), op, requires_grad)
    }

    fn push_rc(&self, value: Rc<Tensor>, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn val(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vs.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Current value of a node.
    pub fn value(&self, v: Var) -> Rc<Tensor> {
        self.val(v)
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.nodes.borrow();
        (n[v.0].value.rows(), n[v.0].value.cols())
    }

    /// Leaf that receives a gradient.
    pub fn var(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn constant_rc(&self, t: Rc<Tensor>) -> Var {
        self.push_rc(t, Op::Leaf, false)
    }

    /// Binds every tensor of `store` as a leaf. With `trainable == false` the
    /// leaves are constants and no gradient can reach them.
    pub fn bind(&self, store: &ParamStore, trainable: bool) -> Bound {
        let vars = store
            .ids()
            .map(|id| self.push_rc(store.shared(id), Op::Leaf, trainable))
            .collect();
        Bound { vars, trainable }
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.val(a), self.val(b));
        let (m, k, k2, n) = (av.rows(), av.cols(), bv.rows(), bv.cols());
        assert!(k == k2, "shape mismatch in matmul: {m}x{k} * {k2}x{n}");
        let mut out = vec![0.0; m * n];
        matmul_into(av.data(), bv.data(), &mut out, m, k, n);
        self.push(
            Tensor::from_rows(m, n, out),
            Op::MatMul(a.0, b.0),
            self.rg(&[a, b]),
        )
    }

    /// `x * w + b` with `b` a row vector broadcast over the rows of `x * w`.
    pub fn affine(&self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.val(x), self.val(w), self.val(b));
        let (m, k, k2, n) = (xv.rows(), xv.cols(), wv.rows(), wv.cols());
        assert!(
            k == k2 && bv.rows() == 1 && bv.cols() == n,
            "shape mismatch in affine: {m}x{k} * {k2}x{n} + {}x{}",
            bv.rows(),
            bv.cols()
        );
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(bv.data());
        }
        matmul_into(xv.data(), wv.data(), &mut out, m, k, n);
        self.push(
            Tensor::from_rows(m, n, out),
            Op::Affine(x.0, w.0, b.0),
            self.rg(&[x, w, b]),
        )
    }

    fn binary(&self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> (Tensor, Bcast) {
        let (av, bv) = (self.val(a), self.val(b));
        let kind = bcast_kind(name, &av, &bv);
        let cols = av.cols();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(k, &x)| f(x, bv.data()[bidx(kind, cols, k)]))
            .collect();
        (Tensor::from_rows(av.rows(), cols, data), kind)
    }

    /// Elementwise `a + b`; `b` may be a row, column or scalar broadcast.
    pub fn add(&self, a: Var, b: Var) -> Var {
        let (t, kind) = self.binary("add", a, b, |x, y| x + y);
        self.push(t, Op::Add(a.0, b.0, kind), self.rg(&[a, b]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (t, kind) = self.binary("sub", a, b, |x, y| x - y);
        self.push(t, Op::Sub(a.0, b.0, kind), self.rg(&[a, b]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (t, kind) = self.binary("mul", a, b, |x, y| x * y);
        self.push(t, Op::Mul(a.0, b.0, kind), self.rg(&[a, b]))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let t = self.val(a).map(|x| c * x);
        self.push(t, Op::Scale(a.0, c), self.rg(&[a]))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let t = self.val(a).map(|x| x + c);
        self.push(t, Op::AddScalar(a.0), self.rg(&[a]))
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&self, a: Var) -> Var {
        self.add_scalar(self.neg(a), 1.0)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let t = self.val(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a.0), self.rg(&[a]))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let t = self.val(a).map(f64::tanh);
        self.push(t, Op::Tanh(a.0), self.rg(&[a]))
    }

    pub fn softplus(&self, a: Var) -> Var {
        let t = self.val(a).map(softplus);
        self.push(t, Op::Softplus(a.0), self.rg(&[a]))
    }

    pub fn exp(&self, a: Var) -> Var {
        let t = self.val(a).map(f64::exp);
        self.push(t, Op::Exp(a.0), self.rg(&[a]))
    }

    pub fn log(&self, a: Var) -> Var {
        let t = self.val(a).map(f64::ln);
        self.push(t, Op::Log(a.0), self.rg(&[a]))
    }

    /// `ln(max(a, floor))`; the gradient is zero where the floor is active.
    pub fn log_clamped(&self, a: Var, floor: f64) -> Var {
        let t = self.val(a).map(|x| x.max(floor).ln());
        self.push(t, Op::LogClamp(a.0, floor), self.rg(&[a]))
    }

    /// `max(0, a)`, the hinge `[.]_+`.
    pub fn relu(&self, a: Var) -> Var {
        let t = self.val(a).map(|x| x.max(0.0));
        self.push(t, Op::Relu(a.0), self.rg(&[a]))
    }

    pub fn softmax_rows(&self, a: Var) -> Var {
        let av = self.val(a);
        let (r, c) = (av.rows(), av.cols());
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push(Tensor::from_rows(r, c, data), Op::SoftmaxRows(a.0), self.rg(&[a]))
    }

    pub fn log_softmax_rows(&self, a: Var) -> Var {
        let av = self.val(a);
        let (r, c) = (av.rows(), av.cols());
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(c) {
            let z = log_sum_exp(row);
            for x in row.iter_mut() {
                *x -= z;
            }
        }
        self.push(
            Tensor::from_rows(r, c, data),
            Op::LogSoftmaxRows(a.0),
            self.rg(&[a]),
        )
    }

    /// Row-wise log-sum-exp, producing an `r x 1` column.
    pub fn log_sum_exp_rows(&self, a: Var) -> Var {
        let av = self.val(a);
        let c = av.cols();
        let data: Vec<f64> = av.data().chunks(c).map(log_sum_exp).collect();
        let r = data.len();
        self.push(Tensor::from_rows(r, 1, data), Op::LogSumExpRows(a.0), self.rg(&[a]))
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.val(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a.0), self.rg(&[a]))
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.val(a).len() as f64;
        self.scale(self.sum(a), 1.0 / n)
    }

    /// Row-wise sum, producing an `r x 1` column.
    pub fn sum_rows(&self, a: Var) -> Var {
        let av = self.val(a);
        let data: Vec<f64> = av.data().chunks(av.cols()).map(|r| r.iter().sum()).collect();
        let r = data.len();
        self.push(Tensor::from_rows(r, 1, data), Op::SumRows(a.0), self.rg(&[a]))
    }

    pub fn sum_sq(&self, a: Var) -> Var {
        let s = self.val(a).sum_sq();
        self.push(Tensor::scalar(s), Op::SumSq(a.0), self.rg(&[a]))
    }

    pub fn dot(&self, a: Var, b: Var) -> Var {
        self.sum(self.mul(a, b))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let vals: Vec<_> = parts.iter().map(|&p| self.val(p)).collect();
        let c = vals[0].cols();
        let mut data = Vec::new();
        let mut r = 0;
        for v in &vals {
            assert!(
                v.cols() == c,
                "shape mismatch in concat_rows: {} vs {} columns",
                c,
                v.cols()
            );
            data.extend_from_slice(v.data());
            r += v.rows();
        }
        self.push(
            Tensor::from_rows(r, c, data),
            Op::ConcatRows(parts.iter().map(|p| p.0).collect()),
            self.rg(parts),
        )
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let vals: Vec<_> = parts.iter().map(|&p| self.val(p)).collect();
        let r = vals[0].rows();
        for v in &vals {
            assert!(
                v.rows() == r,
                "shape mismatch in concat_cols: {} vs {} rows",
                r,
                v.rows()
            );
        }
        let c: usize = vals.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for v in &vals {
                data.extend_from_slice(v.row(i));
            }
        }
        self.push(
            Tensor::from_rows(r, c, data),
            Op::ConcatCols(parts.iter().map(|p| p.0).collect()),
            self.rg(parts),
        )
    }

    /// Rows `start..end`.
    pub fn slice_rows(&self, a: Var, start: usize, end: usize) -> Var {
        let av = self.val(a);
        assert!(
            start < end && end <= av.rows(),
            "slice_rows {start}..{end} out of range for {}x{}",
            av.rows(),
            av.cols()
        );
        let c = av.cols();
        let data = av.data()[start * c..end * c].to_vec();
        self.push(
            Tensor::from_rows(end - start, c, data),
            Op::SliceRows(a.0, start),
            self.rg(&[a]),
        )
    }

    pub fn row(&self, a: Var, i: usize) -> Var {
        self.slice_rows(a, i, i + 1)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Var {
        let av = self.val(a);
        assert!(
            start < end && end <= av.cols(),
            "slice_cols {start}..{end} out of range for {}x{}",
            av.rows(),
            av.cols()
        );
        let mut data = Vec::with_capacity(av.rows() * (end - start));
        for i in 0..av.rows() {
            data.extend_from_slice(&av.row(i)[start..end]);
        }
        self.push(
            Tensor::from_rows(av.rows(), end - start, data),
            Op::SliceCols(a.0, start),
            self.rg(&[a]),
        )
    }

    pub fn transpose(&self, a: Var) -> Var {
        let t = self.val(a).transpose();
        self.push(t, Op::Transpose(a.0), self.rg(&[a]))
    }

    /// Records a scalar-valued function whose partial derivatives with
    /// respect to `inputs` were computed alongside its value.
    pub fn scalar_fn(&self, value: f64, partials: Vec<(Var, Tensor)>) -> Var {
        for (v, p) in &partials {
            let vv = self.val(*v);
            assert!(
                vv.same_shape(p),
                "shape mismatch in scalar_fn partial: {:?} vs {:?}",
                vv.shape(),
                p.shape()
            );
        }
        let inputs: Vec<Var> = partials.iter().map(|(v, _)| *v).collect();
        let rg = self.rg(&inputs);
        self.push(
            Tensor::scalar(value),
            Op::ScalarFn(partials.into_iter().map(|(v, p)| (v.0, p)).collect()),
            rg,
        )
    }

    /// Gradients of a `1 x 1` output with respect to every node that needs one.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let ov = &nodes[out.0].value;
        if ov.len() != 1 {
            return Err(Error::NonScalarBackward {
                rows: ov.rows(),
                cols: ov.cols(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[out.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[out.0] = Some(Tensor::from_rows(ov.rows(), ov.cols(), vec![1.0]));

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let push = |grads: &mut Vec<Option<Tensor>>, i: usize, t: Tensor| {
                if !nodes[i].requires_grad {
                    return;
                }
                match &mut grads[i] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            let want = |i: usize| nodes[i].requires_grad;
            let out_v = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    if want(*a) {
                        let mut ga = vec![0.0; m * k];
                        matmul_bt_into(g.data(), bv.data(), &mut ga, m, n, k);
                        push(&mut grads, *a, Tensor::from_rows(m, k, ga));
                    }
                    if want(*b) {
                        let mut gb = vec![0.0; k * n];
                        matmul_at_into(av.data(), g.data(), &mut gb, m, k, n);
                        push(&mut grads, *b, Tensor::from_rows(k, n, gb));
                    }
                }
                Op::Affine(x, w, b) => {
                    let (xv, wv) = (&nodes[*x].value, &nodes[*w].value);
                    let (m, k, n) = (xv.rows(), xv.cols(), wv.cols());
                    if want(*x) {
                        let mut gx = vec![0.0; m * k];
                        matmul_bt_into(g.data(), wv.data(), &mut gx, m, n, k);
                        push(&mut grads, *x, Tensor::from_rows(m, k, gx));
                    }
                    if want(*w) {
                        let mut gw = vec![0.0; k * n];
                        matmul_at_into(xv.data(), g.data(), &mut gw, m, k, n);
                        push(&mut grads, *w, Tensor::from_rows(k, n, gw));
                    }
                    if want(*b) {
                        let mut gb = vec![0.0; n];
                        for row in g.data().chunks(n) {
                            for (o, v) in gb.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                        push(&mut grads, *b, Tensor::from_rows(1, n, gb));
                    }
                }
                Op::Add(a, b, kind) | Op::Sub(a, b, kind) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if want(*b) {
                        let bv = &nodes[*b].value;
                        let gb = if *kind == Bcast::None {
                            g.map(|x| sign * x)
                        } else {
                            reduce_bcast(*kind, &g, bv, |_| sign)
                        };
                        push(&mut grads, *b, gb);
                    }
                    if want(*a) {
                        push(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b, kind) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let cols = av.cols();
                    if want(*a) {
                        let data = g
                            .data()
                            .iter()
                            .enumerate()
                            .map(|(k, gv)| gv * bv.data()[bidx(*kind, cols, k)])
                            .collect();
                        push(&mut grads, *a, Tensor::from_rows(av.rows(), cols, data));
                    }
                    if want(*b) {
                        let gb = reduce_bcast(*kind, &g, bv, |k| av.data()[k]);
                        push(&mut grads, *b, gb);
                    }
                }
                Op::Scale(a, c) => push(&mut grads, *a, g.map(|x| c * x)),
                Op::AddScalar(a) => push(&mut grads, *a, g),
                Op::Sigmoid(a) => {
                    let t = zip_map(&g, out_v, |gv, s| gv * s * (1.0 - s));
                    push(&mut grads, *a, t);
                }
                Op::Tanh(a) => {
                    let t = zip_map(&g, out_v, |gv, y| gv * (1.0 - y * y));
                    push(&mut grads, *a, t);
                }
                Op::Softplus(a) => {
                    let t = zip_map(&g, &nodes[*a].value, |gv, x| gv * sigmoid(x));
                    push(&mut grads, *a, t);
                }
                Op::Exp(a) => {
                    let t = zip_map(&g, out_v, |gv, y| gv * y);
                    push(&mut grads, *a, t);
                }
                Op::Log(a) => {
                    let t = zip_map(&g, &nodes[*a].value, |gv, x| gv / x);
                    push(&mut grads, *a, t);
                }
                Op::LogClamp(a, floor) => {
                    let t = zip_map(&g, &nodes[*a].value, |gv, x| {
                        if x > *floor {
                            gv / x
                        } else {
                            0.0
                        }
                    });
                    push(&mut grads, *a, t);
                }
                Op::Relu(a) => {
                    let t = zip_map(&g, &nodes[*a].value, |gv, x| if x > 0.0 { gv } else { 0.0 });
                    push(&mut grads, *a, t);
                }
                Op::SoftmaxRows(a) => {
                    let c = out_v.cols();
                    let mut data = Vec::with_capacity(g.len());
                    for (grow, yrow) in g.data().chunks(c).zip(out_v.data().chunks(c)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                        data.extend(grow.iter().zip(yrow).map(|(gv, y)| y * (gv - dot)));
                    }
                    push(&mut grads, *a, Tensor::from_rows(out_v.rows(), c, data));
                }
                Op::LogSoftmaxRows(a) => {
                    let c = out_v.cols();
                    let mut data = Vec::with_capacity(g.len());
                    for (grow, lrow) in g.data().chunks(c).zip(out_v.data().chunks(c)) {
                        let gs: f64 = grow.iter().sum();
                        data.extend(grow.iter().zip(lrow).map(|(gv, l)| gv - l.exp() * gs));
                    }
                    push(&mut grads, *a, Tensor::from_rows(out_v.rows(), c, data));
                }
                Op::LogSumExpRows(a) => {
                    let av = &nodes[*a].value;
                    let c = av.cols();
                    let mut data = Vec::with_capacity(av.len());
                    for (i, row) in av.data().chunks(c).enumerate() {
                        let z = out_v.data()[i];
                        let gi = g.data()[i];
                        data.extend(row.iter().map(|x| gi * (x - z).exp()));
                    }
                    push(&mut grads, *a, Tensor::from_rows(av.rows(), c, data));
                }
                Op::Sum(a) => {
                    let av = &nodes[*a].value;
                    push(&mut grads, *a, Tensor::filled(av.rows(), av.cols(), g.item()));
                }
                Op::SumRows(a) => {
                    let av = &nodes[*a].value;
                    let c = av.cols();
                    let data = (0..av.len()).map(|k| g.data()[k / c]).collect();
                    push(&mut grads, *a, Tensor::from_rows(av.rows(), c, data));
                }
                Op::SumSq(a) => {
                    let gv = g.item();
                    push(&mut grads, *a, nodes[*a].value.map(|x| 2.0 * gv * x));
                }
                Op::ConcatRows(parts) => {
                    let c = g.cols();
                    let mut off = 0;
                    for &p in parts {
                        let r = nodes[p].value.rows();
                        if want(p) {
                            let data = g.data()[off * c..(off + r) * c].to_vec();
                            push(&mut grads, p, Tensor::from_rows(r, c, data));
                        }
                        off += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let pc = nodes[p].value.cols();
                        if want(p) {
                            let mut data = Vec::with_capacity(g.rows() * pc);
                            for i in 0..g.rows() {
                                data.extend_from_slice(&g.row(i)[off..off + pc]);
                            }
                            push(&mut grads, p, Tensor::from_rows(g.rows(), pc, data));
                        }
                        off += pc;
                    }
                }
                Op::SliceRows(a, start) => {
                    let av = &nodes[*a].value;
                    let c = av.cols();
                    let mut t = Tensor::zeros(av.rows(), c);
                    t.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    push(&mut grads, *a, t);
                }
                Op::SliceCols(a, start) => {
                    let av = &nodes[*a].value;
                    let mut t = Tensor::zeros(av.rows(), av.cols());
                    let w = g.cols();
                    for i in 0..g.rows() {
                        let row = &mut t.data_mut()[i * av.cols()..(i + 1) * av.cols()];
                        row[*start..start + w].copy_from_slice(g.row(i));
                    }
                    push(&mut grads, *a, t);
                }
                Op::Transpose(a) => push(&mut grads, *a, g.transpose()),
                Op::ScalarFn(partials) => {
                    let gv = g.item();
                    for (i, p) in partials {
                        if want(*i) {
                            push(&mut grads, *i, p.map(|x| gv * x));
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_rows(a.rows(), a.cols(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let t = Tape::new();
        let x = t.constant(Tensor::row_vector(vec![0.0; 3]));
        let y = t.value(t.softmax_rows(x));
        for &v in y.data() {
            assert!(close(v, 1.0 / 3.0, 1e-15));
        }
    }

    #[test]
    fn logsumexp_and_softplus_closed_forms() {
        let t = Tape::new();
        let x = t.constant(Tensor::row_vector(vec![0.0, 0.0]));
        let lse = t.scalar(t.log_sum_exp_rows(x));
        assert!(close(lse, 2f64.ln(), 1e-15));
        let z = t.constant(Tensor::scalar(0.0));
        assert!(close(t.scalar(t.softplus(z)), 2f64.ln(), 1e-15));
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let t = Tape::new();
        let x = t.var(Tensor::scalar(0.0));
        let y = t.sigmoid(x);
        let g = t.backward(y).unwrap();
        assert!(close(g.wrt(x).unwrap().item(), 0.25, 1e-15));
    }

    #[test]
    fn quadratic_gradient() {
        let t = Tape::new();
        let x = t.var(Tensor::row_vector(vec![1.0, 2.0]));
        let xt = t.transpose(x);
        let q = t.matmul(x, xt);
        let g = t.backward(q).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn logsumexp_gradient_is_softmax() {
        let t = Tape::new();
        let v = t.var(Tensor::row_vector(vec![1.0, 0.0]));
        let z = t.log_sum_exp_rows(v);
        let g = t.backward(z).unwrap();
        let e = 1f64.exp();
        let want = [e / (e + 1.0), 1.0 / (e + 1.0)];
        for (a, b) in g.wrt(v).unwrap().data().iter().zip(want) {
            assert!(close(*a, b, 1e-15));
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let t = Tape::new();
        let x = t.var(Tensor::row_vector(vec![1.0, 2.0]));
        let y = t.tanh(x);
        assert!(matches!(
            t.backward(y),
            Err(Error::NonScalarBackward { rows: 1, cols: 2 })
        ));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let t = Tape::new();
        let c = t.constant(Tensor::row_vector(vec![1.0, 2.0]));
        let x = t.var(Tensor::row_vector(vec![3.0, 4.0]));
        let y = t.dot(c, x);
        let g = t.backward(y).unwrap();
        assert!(g.wrt(c).is_none());
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn reset_allows_reuse() {
        let t = Tape::new();
        let x = t.var(Tensor::scalar(2.0));
        let _ = t.exp(x);
        t.reset();
        assert!(t.is_empty());
        let x = t.var(Tensor::scalar(3.0));
        let y = t.sum_sq(x);
        assert_eq!(t.backward(y).unwrap().wrt(x).unwrap().item(), 6.0);
    }

    #[test]
    fn eval_is_bitwise_repeatable() {
        let run = || {
            let t = Tape::new();
            let x = t.constant(Tensor::from_rows(2, 3, vec![0.3, -1.2, 2.2, 0.1, 0.0, -0.7]));
            let w = t.constant(Tensor::from_rows(3, 2, vec![1.1, -0.4, 0.5, 0.25, -2.0, 0.9]));
            let b = t.constant(Tensor::row_vector(vec![0.01, -0.02]));
            let y = t.softmax_rows(t.tanh(t.affine(x, w, b)));
            t.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    #[should_panic(expected = "shape mismatch in matmul")]
    fn shape_mismatch_names_op() {
        let t = Tape::new();
        let a = t.constant(Tensor::zeros(2, 3));
        let _ = t.matmul(a, a);
    }

    #[test]
    fn broadcast_gradients() {
        let t = Tape::new();
        let a = t.var(Tensor::from_rows(2, 2, vec![1., 2., 3., 4.]));
        let row = t.var(Tensor::row_vector(vec![10., 20.]));
        let col = t.var(Tensor::from_rows(2, 1, vec![2., 3.]));
        let y = t.sum(t.mul(t.add(a, row), col));
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(a).unwrap().data(), &[2., 2., 3., 3.]);
        assert_eq!(g.wrt(row).unwrap().data(), &[5., 5.]);
        assert_eq!(g.wrt(col).unwrap().data(), &[33., 37.]);
    }
}
