//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation applied to [`Var`]s. Calling
//! [`Tape::backward`] on a `1×1` result walks the record in reverse and
//! returns the gradient of that scalar with respect to every node.
//!
//! Everything is two-dimensional; scalars are `1×1` and per-row values are
//! `n×1`. The op set is exactly what the recommender needs, including a
//! sparse product whose per-entry weights are themselves differentiable
//! (used for edge masks).

use std::cell::RefCell;
use std::ops;
use std::rc::Rc;
use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

use crate::sparse::SparseMatrix;

pub type Matrix = Array2<f64>;

const NORM_EPS: f64 = 1e-12;

enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    AddRow(usize, usize),
    ConcatCols(Vec<usize>),
    Rows(usize, Rc<Vec<usize>>),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Silu(usize),
    LogSigmoid(usize),
    Sum(usize),
    Mean(usize),
    RowSum(usize),
    NormalizeRows(usize),
    SpMM {
        adj: Arc<SparseMatrix>,
        weights: Option<usize>,
        x: usize,
    },
    SoftmaxXent {
        logits: usize,
        targets: Rc<Vec<usize>>,
    },
}

struct Node {
    value: Rc<Matrix>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Matrix> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros of the right shape if `v` did not
    /// influence the loss.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Matrix {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Matrix::zeros(v.shape()),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)` without overflow.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Matrix, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn leaf(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(Matrix::from_elem((1, 1), value))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn value(&self, id: usize) -> Rc<Matrix> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.dim(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Matrix::from_elem((1, 1), 1.0));

        fn acc(grads: &mut [Option<Matrix>], id: usize, g: Matrix) {
            match &mut grads[id] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let out = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    acc(&mut grads, *a, g.dot(&bv.t()));
                    acc(&mut grads, *b, av.t().dot(&g));
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, -&g);
                }
                Op::Mul(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    acc(&mut grads, *a, &g * bv.as_ref());
                    acc(&mut grads, *b, &g * av.as_ref());
                }
                Op::Scale(a, c) => acc(&mut grads, *a, &g * *c),
                Op::Offset(a) => acc(&mut grads, *a, g.clone()),
                Op::AddRow(a, b) => {
                    acc(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g.clone());
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = nodes[p].value.ncols();
                        acc(&mut grads, p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::Rows(a, idx) => {
                    let mut ga = Matrix::zeros(nodes[*a].value.dim());
                    for (k, &r) in idx.iter().enumerate() {
                        let mut dst = ga.row_mut(r);
                        dst += &g.row(k);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let av = &nodes[*a].value;
                    let mut ga = g.clone();
                    Zip::from(&mut ga)
                        .and(av.as_ref())
                        .for_each(|gi, &x| {
                            if x <= 0.0 {
                                *gi = 0.0
                            }
                        });
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga)
                        .and(out.as_ref())
                        .for_each(|gi, &y| *gi *= 1.0 - y * y);
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga)
                        .and(out.as_ref())
                        .for_each(|gi, &y| *gi *= y * (1.0 - y));
                    acc(&mut grads, *a, ga);
                }
                Op::Silu(a) => {
                    let av = &nodes[*a].value;
                    let mut ga = g.clone();
                    Zip::from(&mut ga).and(av.as_ref()).for_each(|gi, &x| {
                        let sg = sigmoid(x);
                        *gi *= sg * (1.0 + x * (1.0 - sg));
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::LogSigmoid(a) => {
                    let av = &nodes[*a].value;
                    let mut ga = g.clone();
                    Zip::from(&mut ga)
                        .and(av.as_ref())
                        .for_each(|gi, &x| *gi *= sigmoid(-x));
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let ga = Matrix::from_elem(nodes[*a].value.dim(), g[[0, 0]]);
                    acc(&mut grads, *a, ga);
                }
                Op::Mean(a) => {
                    let n = nodes[*a].value.len() as f64;
                    let ga = Matrix::from_elem(nodes[*a].value.dim(), g[[0, 0]] / n);
                    acc(&mut grads, *a, ga);
                }
                Op::RowSum(a) => {
                    let (r, c) = nodes[*a].value.dim();
                    let mut ga = Matrix::zeros((r, c));
                    for i in 0..r {
                        ga.row_mut(i).fill(g[[i, 0]]);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::NormalizeRows(a) => {
                    let av = &nodes[*a].value;
                    let mut ga = Matrix::zeros(av.dim());
                    for i in 0..av.nrows() {
                        let norm = av.row(i).dot(&av.row(i)).sqrt().max(NORM_EPS);
                        let y = out.row(i);
                        let gi = g.row(i);
                        let proj = gi.dot(&y);
                        let mut dst = ga.row_mut(i);
                        Zip::from(&mut dst)
                            .and(&gi)
                            .and(&y)
                            .for_each(|d, &gv, &yv| *d = (gv - yv * proj) / norm);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SpMM { adj, weights, x } => {
                    let xv = &nodes[*x].value;
                    let wv = weights.map(|w| Rc::clone(&nodes[w].value));
                    let mut gx = Matrix::zeros(xv.dim());
                    let mut gw = wv.as_ref().map(|w| Matrix::zeros(w.dim()));
                    for k in 0..adj.nnz() {
                        let (r, c, slot) = (adj.rows[k], adj.cols[k], adj.weight_index[k]);
                        let wk = wv.as_ref().map_or(1.0, |w| w[[slot, 0]]);
                        let grow = g.row(r);
                        gx.row_mut(c).scaled_add(adj.vals[k] * wk, &grow);
                        if let Some(gw) = gw.as_mut() {
                            gw[[slot, 0]] += adj.vals[k] * grow.dot(&xv.row(c));
                        }
                    }
                    acc(&mut grads, *x, gx);
                    if let (Some(w), Some(gw)) = (weights, gw) {
                        acc(&mut grads, *w, gw);
                    }
                }
                Op::SoftmaxXent { logits, targets } => {
                    let lv = &nodes[*logits].value;
                    let b = lv.nrows() as f64;
                    let mut gl = softmax_rows(lv);
                    for (i, &t) in targets.iter().enumerate() {
                        gl[[i, t]] -= 1.0;
                    }
                    gl *= g[[0, 0]] / b;
                    acc(&mut grads, *logits, gl);
                }
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row /= z;
    }
    out
}

fn unary<'t>(v: Var<'t>, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
    let out = v.value().mapv(f);
    v.tape.push(out, op)
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Matrix> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().dim()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Scalar value of a `1×1` node.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    /// Copy of the value with no path back to `self`.
    pub fn detach(self) -> Var<'t> {
        self.tape.leaf(self.value().as_ref().clone())
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let out = self.value().dot(other.value().as_ref());
        self.tape.push(out, Op::MatMul(self.id, other.id))
    }

    pub fn t(self) -> Var<'t> {
        let out = self.value().t().to_owned();
        self.tape.push(out, Op::Transpose(self.id))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        unary(self, |x| x * c, Op::Scale(self.id, c))
    }

    pub fn offset(self, c: f64) -> Var<'t> {
        unary(self, |x| x + c, Op::Offset(self.id))
    }

    /// Adds a `1×n` row to every row of `self`.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        let rv = row.value();
        assert_eq!(rv.nrows(), 1);
        let out = self.value().as_ref() + rv.as_ref();
        self.tape.push(out, Op::AddRow(self.id, row.id))
    }

    pub fn rows(self, idx: &[usize]) -> Var<'t> {
        let out = self.value().select(Axis(0), idx);
        self.tape
            .push(out, Op::Rows(self.id, Rc::new(idx.to_vec())))
    }

    pub fn relu(self) -> Var<'t> {
        unary(self, |x| x.max(0.0), Op::Relu(self.id))
    }

    pub fn tanh(self) -> Var<'t> {
        unary(self, f64::tanh, Op::Tanh(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        unary(self, sigmoid, Op::Sigmoid(self.id))
    }

    pub fn silu(self) -> Var<'t> {
        unary(self, |x| x * sigmoid(x), Op::Silu(self.id))
    }

    pub fn log_sigmoid(self) -> Var<'t> {
        unary(self, log_sigmoid, Op::LogSigmoid(self.id))
    }

    pub fn square(self) -> Var<'t> {
        self * self
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value().sum();
        self.tape.push(Matrix::from_elem((1, 1), s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let v = self.value();
        let m = v.sum() / v.len() as f64;
        self.tape.push(Matrix::from_elem((1, 1), m), Op::Mean(self.id))
    }

    /// Per-row sums as an `n×1` column.
    pub fn row_sum(self) -> Var<'t> {
        let out = self.value().sum_axis(Axis(1)).insert_axis(Axis(1));
        self.tape.push(out, Op::RowSum(self.id))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn normalize_rows(self) -> Var<'t> {
        let mut out = self.value().as_ref().clone();
        for mut row in out.rows_mut() {
            let n = row.dot(&row).sqrt().max(NORM_EPS);
            row /= n;
        }
        self.tape.push(out, Op::NormalizeRows(self.id))
    }

    /// Mean over rows of `−log softmax(self_i)[targets_i]`.
    pub fn softmax_cross_entropy(self, targets: &[usize]) -> Var<'t> {
        let lv = self.value();
        assert_eq!(lv.nrows(), targets.len());
        let mut total = 0.0;
        for (row, &t) in lv.rows().into_iter().zip(targets) {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let loss = total / targets.len() as f64;
        self.tape.push(
            Matrix::from_elem((1, 1), loss),
            Op::SoftmaxXent {
                logits: self.id,
                targets: Rc::new(targets.to_vec()),
            },
        )
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty());
        let values: Vec<Rc<Matrix>> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat rows must agree");
        parts[0]
            .tape
            .push(out, Op::ConcatCols(parts.iter().map(|p| p.id).collect()))
    }
}

/// `(adj ⊙ w) · x`. `weights` is an `s×1` column indexed by the matrix's
/// `weight_index`; `None` uses the stored values as-is.
pub fn spmm<'t>(adj: &Arc<SparseMatrix>, weights: Option<Var<'t>>, x: Var<'t>) -> Var<'t> {
    let xv = x.value();
    let out = match weights {
        Some(w) => {
            let wv = w.value();
            let flat: Vec<f64> = wv.column(0).to_vec();
            adj.matmul_weighted(&xv, Some(&flat))
        }
        None => adj.matmul(&xv),
    };
    x.tape.push(
        out,
        Op::SpMM {
            adj: Arc::clone(adj),
            weights: weights.map(|w| w.id),
            x: x.id,
        },
    )
}

impl<'t> ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        let out = self.value().as_ref() + rhs.value().as_ref();
        self.tape.push(out, Op::Add(self.id, rhs.id))
    }
}

impl<'t> ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        let out = self.value().as_ref() - rhs.value().as_ref();
        self.tape.push(out, Op::Sub(self.id, rhs.id))
    }
}

impl<'t> ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        let out = self.value().as_ref() * rhs.value().as_ref();
        self.tape.push(out, Op::Mul(self.id, rhs.id))
    }
}

impl<'t> ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central differences of `f` around `x`, one entry at a time.
    fn numeric_grad(x: &Matrix, f: &dyn Fn(&Matrix) -> f64) -> Matrix {
        let h = 1e-6;
        let mut g = Matrix::zeros(x.dim());
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            g.as_slice_mut().unwrap()[idx] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn check(x0: Matrix, build: impl for<'t> Fn(Var<'t>) -> Var<'t>) {
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let loss = build(x);
        let analytic = tape.backward(loss).get_or_zeros(x);
        let f = |m: &Matrix| {
            let t = Tape::new();
            build(t.leaf(m.clone())).item()
        };
        let numeric = numeric_grad(&x0, &f);
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!(
                (a - n).abs() <= 1e-6 * (1.0 + n.abs()),
                "analytic {a} vs numeric {n}"
            );
        }
    }

    fn sample() -> Matrix {
        array![[0.3, -1.2, 0.7], [1.1, 0.4, -0.5]]
    }

    #[test]
    fn elementwise_ops() {
        check(sample(), |x| x.tanh().sum());
        check(sample(), |x| x.sigmoid().square().mean());
        check(sample(), |x| x.silu().sum());
        check(sample(), |x| x.log_sigmoid().sum());
        check(sample(), |x| (x * x.scale(2.0).offset(1.0)).mean());
        check(sample(), |x| x.relu().sum());
        check(sample(), |x| (-x).row_sum().square().sum());
    }

    #[test]
    fn matrix_ops() {
        let w = array![[0.2, -0.1], [0.5, 0.3], [-0.4, 0.9]];
        check(sample(), move |x| {
            let w = x.tape().leaf(w.clone());
            x.matmul(w).tanh().sum()
        });
        check(sample(), |x| x.matmul(x.t()).mean());
        check(sample(), |x| {
            let b = x.tape().leaf(array![[1.0, 2.0, 3.0]]);
            x.add_row(b).square().sum()
        });
        check(sample(), |x| Var::concat_cols(&[x, x.scale(3.0)]).square().sum());
        check(sample(), |x| x.rows(&[1, 0, 1]).square().sum());
        check(sample(), |x| (x.normalize_rows() - x).square().sum());
    }

    #[test]
    fn cross_entropy_gradient() {
        check(sample(), |x| x.softmax_cross_entropy(&[2, 0]));
        let tape = Tape::new();
        let l = tape.leaf(Matrix::zeros((3, 3)));
        assert!((l.softmax_cross_entropy(&[0, 1, 2]).item() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sparse_product_gradients() {
        let mut adj = SparseMatrix::new(2, 3);
        adj.push(0, 1, 0.5, 0);
        adj.push(1, 0, 2.0, 1);
        adj.push(1, 2, -1.0, 0);
        let adj = Arc::new(adj);
        let x0 = array![[0.1, 0.2], [0.3, -0.4], [0.5, 0.6]];
        let a2 = Arc::clone(&adj);
        check(x0.clone(), move |x| {
            let w = x.tape().leaf(array![[0.7], [1.3]]);
            spmm(&a2, Some(w), x).square().sum()
        });
        check(array![[0.7], [1.3]], move |w| {
            let x = w.tape().leaf(x0.clone());
            spmm(&adj, Some(w), x).square().sum()
        });
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
        assert!(log_sigmoid(800.0).abs() < 1e-300);
        assert!((sigmoid(-800.0)).abs() < 1e-300);
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(sample());
        let loss = (x * x.detach()).sum();
        let g = tape.backward(loss);
        assert_eq!(g.get(x).unwrap(), &sample());
    }
}
