//! A reverse-mode tape over dense matrices.
//!
//! Every backward rule is itself expressed with tape operations, so a
//! gradient returned by [`Tape::gradient`] is an ordinary [`Var`] that can be
//! differentiated again. The encoder score (a gradient with respect to the
//! input) is trained through exactly this double-backward path.

use super::activation::Activation;
use super::Mat;
use ndarray::{concatenate, s, Array2, Axis};
use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    SumRows(usize),
    BroadcastRows(usize),
    SumAll(usize),
    BroadcastAll(usize),
    Exp(usize),
    Act(Activation, u8, usize),
    Clamp(usize, f64, f64),
    ConcatCols(usize, usize),
    SliceCols(usize, usize),
    PadCols(usize, usize),
}

impl Op {
    fn parents(&self) -> [Option<usize>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | MatMul(a, b) | ConcatCols(a, b) => {
                [Some(a), Some(b)]
            }
            Scale(a, _)
            | Transpose(a)
            | SumRows(a)
            | BroadcastRows(a)
            | SumAll(a)
            | BroadcastAll(a)
            | Exp(a)
            | Act(_, _, a)
            | Clamp(a, _, _)
            | SliceCols(a, _)
            | PadCols(a, _) => [Some(a), None],
        }
    }
}

struct Node {
    value: Rc<Mat>,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation graph. Build one per loss evaluation and drop it.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Mat) -> Var<'_> {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A value that gradients never flow into.
    pub fn constant(&self, value: Mat) -> Var<'_> {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Array2::from_elem((1, 1), value))
    }

    fn push_raw(&self, value: Mat, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Mat, op: Op) -> Var<'_> {
        debug_assert!(value.iter().all(|v| !v.is_nan()), "NaN produced by {op:?}");
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.parents()
                .iter()
                .flatten()
                .any(|&p| nodes[p].requires_grad)
        };
        self.push_raw(value, op, requires_grad)
    }

    fn value_of(&self, id: usize) -> Rc<Mat> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn var(&self, id: usize) -> Var<'_> {
        Var { tape: self, id }
    }

    /// Gradients of the scalar `y` with respect to each of `wrt`.
    ///
    /// The results live on this tape and may be differentiated again.
    /// Inputs that `y` does not depend on receive a zero matrix.
    pub fn gradient<'t>(&'t self, y: Var<'t>, wrt: &[Var<'t>]) -> Vec<Var<'t>> {
        assert!(std::ptr::eq(y.tape, self), "variable from another tape");
        assert_eq!(y.shape(), (1, 1), "gradient needs a scalar output");
        let n = y.id + 1;
        let ops: Vec<Op> = self.nodes.borrow()[..n].iter().map(|nd| nd.op).collect();

        // Nodes lying on some path from a `wrt` input.
        let mut depends = vec![false; n];
        for w in wrt {
            if w.id < n {
                depends[w.id] = true;
            }
        }
        for i in 0..n {
            if !depends[i] {
                depends[i] = ops[i].parents().iter().flatten().any(|&p| depends[p]);
            }
        }

        let mut grads: Vec<Option<Var<'t>>> = vec![None; n];
        grads[y.id] = Some(self.scalar(1.0));
        let accumulate = |grads: &mut Vec<Option<Var<'t>>>, id: usize, g: Var<'t>| {
            if depends[id] {
                grads[id] = Some(match grads[id] {
                    Some(prev) => prev.add(g),
                    None => g,
                });
            }
        };

        for i in (0..n).rev() {
            if !depends[i] {
                continue;
            }
            let Some(gy) = grads[i] else { continue };
            let me = self.var(i);
            match ops[i] {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, a, gy);
                    accumulate(&mut grads, b, gy);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, a, gy);
                    if depends[b] {
                        accumulate(&mut grads, b, gy.scale(-1.0));
                    }
                }
                Op::Mul(a, b) => {
                    if depends[a] {
                        accumulate(&mut grads, a, gy.mul(self.var(b)));
                    }
                    if depends[b] {
                        accumulate(&mut grads, b, gy.mul(self.var(a)));
                    }
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads, a, gy);
                    if depends[row] {
                        accumulate(&mut grads, row, gy.sum_rows());
                    }
                }
                Op::Scale(a, c) => accumulate(&mut grads, a, gy.scale(c)),
                Op::MatMul(a, b) => {
                    if depends[a] {
                        accumulate(&mut grads, a, gy.matmul(self.var(b).t()));
                    }
                    if depends[b] {
                        accumulate(&mut grads, b, self.var(a).t().matmul(gy));
                    }
                }
                Op::Transpose(a) => accumulate(&mut grads, a, gy.t()),
                Op::SumRows(a) => {
                    let rows = self.var(a).shape().0;
                    accumulate(&mut grads, a, gy.broadcast_rows(rows));
                }
                Op::BroadcastRows(a) => accumulate(&mut grads, a, gy.sum_rows()),
                Op::SumAll(a) => {
                    let shape = self.var(a).shape();
                    accumulate(&mut grads, a, gy.broadcast_all(shape));
                }
                Op::BroadcastAll(a) => accumulate(&mut grads, a, gy.sum_all()),
                Op::Exp(a) => accumulate(&mut grads, a, gy.mul(me)),
                Op::Act(act, order, a) => {
                    let d = self.var(a).activation(act, order + 1);
                    accumulate(&mut grads, a, gy.mul(d));
                }
                Op::Clamp(a, lo, hi) => {
                    let mask = self
                        .value_of(a)
                        .mapv(|v| if v > lo && v < hi { 1.0 } else { 0.0 });
                    accumulate(&mut grads, a, gy.mul(self.constant(mask)));
                }
                Op::ConcatCols(a, b) => {
                    let wa = self.var(a).shape().1;
                    let wb = self.var(b).shape().1;
                    if depends[a] {
                        accumulate(&mut grads, a, gy.slice_cols(0, wa));
                    }
                    if depends[b] {
                        accumulate(&mut grads, b, gy.slice_cols(wa, wa + wb));
                    }
                }
                Op::SliceCols(a, start) => {
                    let total = self.var(a).shape().1;
                    accumulate(&mut grads, a, gy.pad_cols(start, total));
                }
                Op::PadCols(a, start) => {
                    let w = self.var(a).shape().1;
                    accumulate(&mut grads, a, gy.slice_cols(start, start + w));
                }
            }
        }

        wrt.iter()
            .map(|w| match grads.get(w.id).copied().flatten() {
                Some(g) => g,
                None => self.constant(Array2::zeros(w.shape())),
            })
            .collect()
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Shared handle to the stored value.
    pub fn value(&self) -> Rc<Mat> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.dim()
    }

    /// Value of a `1×1` variable.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.dim(), (1, 1), "item() on a non-scalar");
        v[[0, 0]]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "variables from different tapes"
        );
    }

    fn binary_same_shape(&self, other: Var<'t>, what: &str) -> (Rc<Mat>, Rc<Mat>) {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.dim(), b.dim(), "{what}: shape mismatch");
        (a, b)
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = self.binary_same_shape(other, "add");
        self.tape.push(&*a + &*b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = self.binary_same_shape(other, "sub");
        self.tape.push(&*a - &*b, Op::Sub(self.id, other.id))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = self.binary_same_shape(other, "mul");
        self.tape.push(&*a * &*b, Op::Mul(self.id, other.id))
    }

    /// Adds a `1×m` row to every row.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        self.same_tape(&row);
        let (a, r) = (self.value(), row.value());
        assert_eq!(r.nrows(), 1, "add_row: bias must be a single row");
        assert_eq!(a.ncols(), r.ncols(), "add_row: width mismatch");
        self.tape.push(&*a + &*r, Op::AddRow(self.id, row.id))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let a = self.value();
        self.tape.push(&*a * c, Op::Scale(self.id, c))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn square(self) -> Var<'t> {
        self.mul(self)
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        assert_eq!(
            a.ncols(),
            b.nrows(),
            "matmul: inner dimensions {:?} x {:?}",
            a.dim(),
            b.dim()
        );
        self.tape.push(a.dot(&*b), Op::MatMul(self.id, other.id))
    }

    pub fn t(self) -> Var<'t> {
        let a = self.value();
        self.tape
            .push(a.t().as_standard_layout().to_owned(), Op::Transpose(self.id))
    }

    /// Column sums as a `1×m` row.
    pub fn sum_rows(self) -> Var<'t> {
        let a = self.value();
        let v = a.sum_axis(Axis(0)).insert_axis(Axis(0));
        self.tape.push(v, Op::SumRows(self.id))
    }

    fn broadcast_rows(self, rows: usize) -> Var<'t> {
        let a = self.value();
        let v = a.broadcast((rows, a.ncols())).unwrap().to_owned();
        self.tape.push(v, Op::BroadcastRows(self.id))
    }

    pub fn sum_all(self) -> Var<'t> {
        let a = self.value();
        self.tape
            .push(Array2::from_elem((1, 1), a.sum()), Op::SumAll(self.id))
    }

    fn broadcast_all(self, shape: (usize, usize)) -> Var<'t> {
        let v = Array2::from_elem(shape, self.value()[[0, 0]]);
        self.tape.push(v, Op::BroadcastAll(self.id))
    }

    /// Per-row sums as an `n×1` column.
    pub fn sum_cols(self) -> Var<'t> {
        let ones = self.tape.constant(Array2::ones((self.shape().1, 1)));
        self.matmul(ones)
    }

    /// Mean over every entry.
    pub fn mean_all(self) -> Var<'t> {
        let (r, c) = self.shape();
        self.sum_all().scale(1.0 / (r * c) as f64)
    }

    pub fn exp(self) -> Var<'t> {
        let a = self.value();
        self.tape.push(a.mapv(f64::exp), Op::Exp(self.id))
    }

    /// The `order`-th derivative of `act`, applied pointwise.
    pub fn activation(self, act: Activation, order: u8) -> Var<'t> {
        let a = self.value();
        self.tape
            .push(a.mapv(|x| act.eval(order, x)), Op::Act(act, order, self.id))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        let a = self.value();
        self.tape
            .push(a.mapv(|x| x.clamp(lo, hi)), Op::Clamp(self.id, lo, hi))
    }

    pub fn concat_cols(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.nrows(), b.nrows(), "concat_cols: row mismatch");
        let v = concatenate(Axis(1), &[a.view(), b.view()]).unwrap();
        self.tape.push(v, Op::ConcatCols(self.id, other.id))
    }

    /// Columns `start..end`.
    pub fn slice_cols(self, start: usize, end: usize) -> Var<'t> {
        let a = self.value();
        assert!(start <= end && end <= a.ncols(), "slice_cols out of range");
        let v = a.slice(s![.., start..end]).to_owned();
        self.tape.push(v, Op::SliceCols(self.id, start))
    }

    fn pad_cols(self, start: usize, total: usize) -> Var<'t> {
        let a = self.value();
        let mut v = Array2::zeros((a.nrows(), total));
        v.slice_mut(s![.., start..start + a.ncols()]).assign(&*a);
        self.tape.push(v, Op::PadCols(self.id, start))
    }

    /// Elementwise product with a constant matrix.
    pub fn mul_const(self, c: Mat) -> Var<'t> {
        let c = self.tape.constant(c);
        self.mul(c)
    }

    /// Adds a constant matrix.
    pub fn add_const(self, c: Mat) -> Var<'t> {
        let c = self.tape.constant(c);
        self.add(c)
    }

    /// Multiplies row `i` by `weights[i]`.
    pub fn scale_rows(self, weights: &[f64]) -> Var<'t> {
        let (r, c) = self.shape();
        assert_eq!(weights.len(), r, "scale_rows: one weight per row");
        let m = Array2::from_shape_fn((r, c), |(i, _)| weights[i]);
        self.mul_const(m)
    }
}
