//! Reverse-mode automatic differentiation over dense matrices.
//!
//! Every value on the tape is a 2-D `f64` matrix (vectors are `n x 1` or
//! `1 x n`, scalars are `1 x 1`). Backward passes are themselves recorded as
//! tape operations, so a gradient can be differentiated again. The
//! orthogonality regularizer needs exactly that: it is a function of two
//! gradients and is minimized by gradient descent.
//!
//! Broadcasting is explicit. A bias row is added with [`Graph::add_row`] and a
//! per-row scale with [`Graph::mul_col`]; both lower to matrix products
//! against constant ones so the op set stays small.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{s, Array2, Axis};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Recip(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    ScaleBy(Var, Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    PadCols(Var, usize),
    Gather(Var, Rc<[usize]>),
    ScatterAdd(Var, Rc<[usize]>),
}

impl Op {
    fn parents(&self) -> [Option<Var>; 2] {
        use Op::*;
        match self {
            Leaf => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) | ScaleBy(a, b) | ConcatCols(a, b) => {
                [Some(*a), Some(*b)]
            }
            Scale(a, _)
            | Offset(a)
            | Transpose(a)
            | Tanh(a)
            | Sigmoid(a)
            | Exp(a)
            | Ln(a)
            | Sqrt(a)
            | Recip(a)
            | Abs(a)
            | Clamp(a, _, _)
            | Sum(a)
            | SliceCols(a, _)
            | PadCols(a, _)
            | Gather(a, _)
            | ScatterAdd(a, _) => [Some(*a), None],
        }
    }
}

struct Node {
    value: Rc<Array2<f64>>,
    op: Op,
}

/// An append-only computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
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

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<f64>, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var(nodes.len() - 1)
    }

    /// Shared handle to a node's value.
    pub fn value(&self, v: Var) -> Rc<Array2<f64>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.dim()
    }

    /// A leaf. Parameters and data are both leaves; only the set passed to
    /// [`Graph::grad`] decides what is differentiated.
    pub fn leaf(&self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&self, value: Array2<f64>) -> Var {
        self.leaf(value)
    }

    pub fn ones(&self, rows: usize, cols: usize) -> Var {
        self.leaf(Array2::ones((rows, cols)))
    }

    pub fn zeros(&self, rows: usize, cols: usize) -> Var {
        self.leaf(Array2::zeros((rows, cols)))
    }

    /// A fresh leaf holding a copy of `v`'s value; gradients stop here.
    pub fn detach(&self, v: Var) -> Var {
        let value = (*self.value(v)).clone();
        self.leaf(value)
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).mapv(f);
        self.push(value, op)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = &*self.value(a) + &*self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let value = &*self.value(a) - &*self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let value = &*self.value(a) * &*self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn offset(&self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::Offset(a))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&*self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn recip(&self, a: Var) -> Var {
        self.unary(a, f64::recip, Op::Recip(a))
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// Elementwise clamp; the gradient is zero where the bound is active.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Sum of all entries, as a `1 x 1` node.
    pub fn sum(&self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let s = self.sum(a);
        self.scale(s, 1.0 / (r * c).max(1) as f64)
    }

    /// Multiplies every entry of `a` by the `1 x 1` node `s`.
    pub fn scale_by(&self, a: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let value = self.value(a).mapv(|x| x * k);
        self.push(value, Op::ScaleBy(a, s))
    }

    pub fn concat_cols(&self, a: Var, b: Var) -> Var {
        let value = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_cols: row counts differ");
        self.push(value, Op::ConcatCols(a, b))
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(value, Op::SliceCols(a, start))
    }

    /// Embeds `a` into a zero matrix of width `total`, starting at column `start`.
    pub fn pad_cols(&self, a: Var, start: usize, total: usize) -> Var {
        let src = self.value(a);
        let mut value = Array2::zeros((src.nrows(), total));
        value
            .slice_mut(s![.., start..start + src.ncols()])
            .assign(&*src);
        self.push(value, Op::PadCols(a, start))
    }

    /// Row lookup: output row `k` is `a[idx[k]]`.
    pub fn gather(&self, a: Var, idx: Rc<[usize]>) -> Var {
        let src = self.value(a);
        let mut value = Array2::zeros((idx.len(), src.ncols()));
        for (k, &i) in idx.iter().enumerate() {
            value.row_mut(k).assign(&src.row(i));
        }
        self.push(value, Op::Gather(a, idx))
    }

    /// Adjoint of [`Graph::gather`]: row `k` of `a` is added into row `idx[k]`.
    pub fn scatter_add(&self, a: Var, idx: Rc<[usize]>, rows: usize) -> Var {
        let src = self.value(a);
        let mut value = Array2::zeros((rows, src.ncols()));
        for (k, &i) in idx.iter().enumerate() {
            let mut row = value.row_mut(i);
            row += &src.row(k);
        }
        self.push(value, Op::ScatterAdd(a, idx))
    }

    /// `x + 1 * bias` for a `1 x n` bias row.
    pub fn add_row(&self, x: Var, bias: Var) -> Var {
        let rows = self.shape(x).0;
        let ones = self.ones(rows, 1);
        let b = self.matmul(ones, bias);
        self.add(x, b)
    }

    /// Scales row `i` of `x` by `col[i]` for an `n x 1` column.
    pub fn mul_col(&self, x: Var, col: Var) -> Var {
        let cols = self.shape(x).1;
        let ones = self.ones(1, cols);
        let b = self.matmul(col, ones);
        self.mul(x, b)
    }

    /// Row sums as an `n x 1` column.
    pub fn sum_cols(&self, x: Var) -> Var {
        let cols = self.shape(x).1;
        let ones = self.ones(cols, 1);
        self.matmul(x, ones)
    }

    pub fn square(&self, a: Var) -> Var {
        self.mul(a, a)
    }

    /// Gradients of the `1 x 1` node `y` with respect to `wrt`.
    ///
    /// The returned nodes live on the same tape and can be differentiated
    /// again. Inputs that `y` does not depend on get a zero gradient.
    pub fn grad(&self, y: Var, wrt: &[Var]) -> Vec<Var> {
        assert_eq!(self.shape(y), (1, 1), "grad: output must be a scalar");
        let n = y.0 + 1;
        let mut requires = vec![false; n];
        for w in wrt {
            if w.0 < n {
                requires[w.0] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for i in 0..n {
                if !requires[i] {
                    requires[i] = nodes[i]
                        .op
                        .parents()
                        .iter()
                        .flatten()
                        .any(|p| requires[p.0]);
                }
            }
        }

        let mut grads: Vec<Option<Var>> = vec![None; n];
        if requires[y.0] {
            grads[y.0] = Some(self.ones(1, 1));
        }
        for i in (0..n).rev() {
            let Some(g) = grads[i] else { continue };
            if !requires[i] {
                continue;
            }
            let op = self.nodes.borrow()[i].op.clone();
            for (parent, contrib) in self.backprop(&op, Var(i), g, &requires) {
                grads[parent.0] = Some(match grads[parent.0] {
                    Some(acc) => self.add(acc, contrib),
                    None => contrib,
                });
            }
        }

        wrt.iter()
            .map(|w| match grads.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let (r, c) = self.shape(*w);
                    self.zeros(r, c)
                }
            })
            .collect()
    }

    fn backprop(&self, op: &Op, out: Var, g: Var, requires: &[bool]) -> Vec<(Var, Var)> {
        use Op::*;
        let need = |v: &Var| requires[v.0];
        let mut res = Vec::with_capacity(2);
        match op {
            Leaf => {}
            Add(a, b) => {
                if need(a) {
                    res.push((*a, g));
                }
                if need(b) {
                    res.push((*b, g));
                }
            }
            Sub(a, b) => {
                if need(a) {
                    res.push((*a, g));
                }
                if need(b) {
                    res.push((*b, self.scale(g, -1.0)));
                }
            }
            Mul(a, b) => {
                if need(a) {
                    res.push((*a, self.mul(g, *b)));
                }
                if need(b) {
                    res.push((*b, self.mul(g, *a)));
                }
            }
            Scale(a, c) => res.push((*a, self.scale(g, *c))),
            Offset(a) => res.push((*a, g)),
            MatMul(a, b) => {
                if need(a) {
                    let bt = self.transpose(*b);
                    res.push((*a, self.matmul(g, bt)));
                }
                if need(b) {
                    let at = self.transpose(*a);
                    res.push((*b, self.matmul(at, g)));
                }
            }
            Transpose(a) => res.push((*a, self.transpose(g))),
            Tanh(a) => {
                let y2 = self.square(out);
                let d = self.offset(self.scale(y2, -1.0), 1.0);
                res.push((*a, self.mul(g, d)));
            }
            Sigmoid(a) => {
                let one_minus = self.offset(self.scale(out, -1.0), 1.0);
                let d = self.mul(out, one_minus);
                res.push((*a, self.mul(g, d)));
            }
            Exp(a) => res.push((*a, self.mul(g, out))),
            Ln(a) => {
                let r = self.recip(*a);
                res.push((*a, self.mul(g, r)));
            }
            Sqrt(a) => {
                let r = self.scale(self.recip(out), 0.5);
                res.push((*a, self.mul(g, r)));
            }
            Recip(a) => {
                let y2 = self.square(out);
                res.push((*a, self.scale(self.mul(g, y2), -1.0)));
            }
            Abs(a) => {
                let sign = self.constant(self.value(*a).mapv(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                }));
                res.push((*a, self.mul(g, sign)));
            }
            Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let mask = self.constant(
                    self.value(*a)
                        .mapv(|x| if x >= lo && x <= hi { 1.0 } else { 0.0 }),
                );
                res.push((*a, self.mul(g, mask)));
            }
            Sum(a) => {
                let (r, c) = self.shape(*a);
                let ones = self.ones(r, c);
                res.push((*a, self.scale_by(ones, g)));
            }
            ScaleBy(a, sc) => {
                if need(a) {
                    res.push((*a, self.scale_by(g, *sc)));
                }
                if need(sc) {
                    res.push((*sc, self.sum(self.mul(g, *a))));
                }
            }
            ConcatCols(a, b) => {
                let wa = self.shape(*a).1;
                let wb = self.shape(*b).1;
                if need(a) {
                    res.push((*a, self.slice_cols(g, 0, wa)));
                }
                if need(b) {
                    res.push((*b, self.slice_cols(g, wa, wb)));
                }
            }
            SliceCols(a, start) => {
                let total = self.shape(*a).1;
                res.push((*a, self.pad_cols(g, *start, total)));
            }
            PadCols(a, start) => {
                let width = self.shape(*a).1;
                res.push((*a, self.slice_cols(g, *start, width)));
            }
            Gather(a, idx) => {
                let rows = self.shape(*a).0;
                res.push((*a, self.scatter_add(g, Rc::clone(idx), rows)));
            }
            ScatterAdd(a, idx) => res.push((*a, self.gather(g, Rc::clone(idx)))),
        }
        res
    }
}
