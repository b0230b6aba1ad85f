//! Reverse-mode automatic differentiation over [`Tensor2`] values.
//!
//! A [`Tape`] records every operation as a node holding its forward value.
//! [`Tape::backward`] walks the nodes in reverse and accumulates
//! vector-Jacobian products into per-node gradients. Nodes that do not depend
//! on any gradient-carrying leaf are skipped.

use std::cell::{Ref, RefCell};
use std::ops::Range;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{softmax_in_place, Tensor2};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-12;

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    Gelu(Var),
    Relu(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor2<S>,
        inv_std: Vec<S>,
    },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    SumAll(Var),
    RowSum(Var),
    Pick(Var, Vec<(usize, usize)>),
    SegmentLogSoftmax(Var, Vec<Range<usize>>),
    ThresholdSoftmax(Var, Vec<Range<usize>>, Vec<bool>),
    SegmentSum(Var, Vec<Range<usize>>),
}

struct Node<S> {
    value: Tensor2<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Single-owner recording of a forward computation.
pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Error {
    Error::Shape { op, left, right }
}

fn check_segments(op: &'static str, rows: usize, cols: usize, segments: &[Range<usize>]) -> Result<()> {
    if cols != 1 && op != "segment_sum" {
        return Err(shape_err(op, (rows, cols), (rows, 1)));
    }
    for s in segments {
        if s.start > s.end || s.end > rows {
            return Err(Error::OutOfRange {
                what: op,
                index: s.end,
                limit: rows,
            });
        }
    }
    Ok(())
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor2<S>, op: Op<S>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    /// Borrow the forward value of a node.
    pub fn value(&self, v: Var) -> Ref<'_, Tensor2<S>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    /// Leaf node; gradients are collected for it when `requires_grad`.
    pub fn leaf(&self, value: Tensor2<S>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor2<S>) -> Var {
        self.leaf(value, false)
    }

    fn unary(&self, x: Var, f: impl FnOnce(&Tensor2<S>) -> Tensor2<S>, op: Op<S>) -> Var {
        let value = f(&self.value(x));
        let ng = self.needs(&[x]);
        self.push(value, op, ng)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(&self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), self.needs(&[a, b])))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_t(&self.value(b))?;
        Ok(self.push(value, Op::MatMulT(a, b), self.needs(&[a, b])))
    }

    pub fn transpose(&self, a: Var) -> Var {
        self.unary(a, Tensor2::transpose, Op::Transpose(a))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(&self.value(b))?;
        Ok(self.push(value, Op::Add(a, b), self.needs(&[a, b])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(&self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b), self.needs(&[a, b])))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(&self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), self.needs(&[a, b])))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let value = {
            let av = self.value(a);
            let rv = self.value(row);
            if rv.rows() != 1 || rv.cols() != av.cols() {
                return Err(shape_err("add_row", av.shape(), rv.shape()));
            }
            let mut out = av.clone();
            for r in 0..out.rows() {
                for (o, &b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                    *o += b;
                }
            }
            out
        };
        Ok(self.push(value, Op::AddRow(a, row), self.needs(&[a, row])))
    }

    /// Scales row `i` of `a` by `col[i]` (`col` is `rows x 1`).
    pub fn mul_col(&self, a: Var, col: Var) -> Result<Var> {
        let value = {
            let av = self.value(a);
            let cv = self.value(col);
            if cv.cols() != 1 || cv.rows() != av.rows() {
                return Err(shape_err("mul_col", av.shape(), cv.shape()));
            }
            let mut out = av.clone();
            for r in 0..out.rows() {
                let f = cv.get(r, 0);
                for o in out.row_mut(r) {
                    *o *= f;
                }
            }
            out
        };
        Ok(self.push(value, Op::MulCol(a, col), self.needs(&[a, col])))
    }

    pub fn scale(&self, a: Var, f: S) -> Var {
        self.unary(a, |t| t.scale(f), Op::Scale(a, f))
    }

    pub fn add_scalar(&self, a: Var, c: S) -> Var {
        self.unary(a, |t| t.map(|v| v + c), Op::AddScalar(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Var {
        let k = S::lit(GELU_K);
        let c = S::lit(GELU_C);
        let half = S::lit(0.5);
        self.unary(
            a,
            |t| t.map(|x| half * x * (S::one() + (k * (x + c * x * x * x)).tanh())),
            Op::Gelu(a),
        )
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |t| t.map(|x| x.max(S::zero())), Op::Relu(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, |t| t.map(S::tanh), Op::Tanh(a))
    }

    pub fn softmax_rows(&self, a: Var) -> Var {
        self.unary(a, crate::tensor::softmax_rows, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&self, a: Var) -> Var {
        self.unary(
            a,
            |t| {
                let mut out = t.clone();
                for r in 0..out.rows() {
                    log_softmax_in_place(out.row_mut(r));
                }
                out
            },
            Op::LogSoftmaxRows(a),
        )
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1 x cols`).
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (value, xhat, inv_std) = {
            let xv = self.value(x);
            let g = self.value(gamma);
            let b = self.value(beta);
            let (rows, cols) = xv.shape();
            if g.shape() != (1, cols) || b.shape() != (1, cols) {
                return Err(shape_err("layer_norm", xv.shape(), g.shape()));
            }
            let n = S::lit(cols as f64);
            let eps = S::lit(LAYER_NORM_EPS);
            let mut xhat = Tensor2::zeros(rows, cols);
            let mut out = Tensor2::zeros(rows, cols);
            let mut inv_std = Vec::with_capacity(rows);
            for r in 0..rows {
                let row = xv.row(r);
                let mean = row.iter().copied().sum::<S>() / n;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
                let is = S::one() / (var + eps).sqrt();
                inv_std.push(is);
                for c in 0..cols {
                    let h = (row[c] - mean) * is;
                    xhat.set(r, c, h);
                    out.set(r, c, h * g.get(0, c) + b.get(0, c));
                }
            }
            (out, xhat, inv_std)
        };
        let ng = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = {
            let av = self.value(a);
            if start + len > av.cols() {
                return Err(shape_err("slice_cols", av.shape(), (start, len)));
            }
            let mut out = Tensor2::zeros(av.rows(), len);
            for r in 0..av.rows() {
                out.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
            }
            out
        };
        Ok(self.push(value, Op::SliceCols(a, start), self.needs(&[a])))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let value = {
            let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let rows = vals.first().map_or(0, |v| v.rows());
            let mut cols = 0;
            for v in &vals {
                if v.rows() != rows {
                    return Err(shape_err("concat_cols", (rows, cols), v.shape()));
                }
                cols += v.cols();
            }
            let mut out = Tensor2::zeros(rows, cols);
            for r in 0..rows {
                let mut off = 0;
                for v in &vals {
                    out.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
                    off += v.cols();
                }
            }
            out
        };
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), self.needs(parts)))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let value = {
            let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let cols = vals.first().map_or(0, |v| v.cols());
            let mut data = Vec::new();
            let mut rows = 0;
            for v in &vals {
                if v.cols() != cols {
                    return Err(shape_err("concat_rows", (rows, cols), v.shape()));
                }
                data.extend_from_slice(v.data());
                rows += v.rows();
            }
            Tensor2::from_vec(rows, cols, data)?
        };
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), self.needs(parts)))
    }

    /// Gathers rows by index; repeated indices accumulate in the backward pass.
    pub fn select_rows(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let value = self.value(a).select_rows(idx)?;
        Ok(self.push(value, Op::SelectRows(a, idx.to_vec()), self.needs(&[a])))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        self.unary(
            a,
            |t| Tensor2::filled(1, 1, t.data().iter().copied().sum()),
            Op::SumAll(a),
        )
    }

    /// Sum of each row, as a `rows x 1` column.
    pub fn row_sum(&self, a: Var) -> Var {
        self.unary(
            a,
            |t| {
                let sums: Vec<S> = (0..t.rows()).map(|r| t.row(r).iter().copied().sum()).collect();
                Tensor2::column_vector(&sums)
            },
            Op::RowSum(a),
        )
    }

    /// Picks `(row, col)` entries into a `k x 1` column.
    pub fn pick(&self, a: Var, at: &[(usize, usize)]) -> Result<Var> {
        let value = {
            let av = self.value(a);
            let mut out = Vec::with_capacity(at.len());
            for &(r, c) in at {
                if r >= av.rows() || c >= av.cols() {
                    return Err(Error::OutOfRange {
                        what: "pick",
                        index: r.max(c),
                        limit: av.rows().max(av.cols()),
                    });
                }
                out.push(av.get(r, c));
            }
            Tensor2::column_vector(&out)
        };
        Ok(self.push(value, Op::Pick(a, at.to_vec()), self.needs(&[a])))
    }

    /// Log-softmax of a column within each row segment.
    pub fn segment_log_softmax(&self, col: Var, segments: &[Range<usize>]) -> Result<Var> {
        let value = {
            let cv = self.value(col);
            check_segments("segment_log_softmax", cv.rows(), cv.cols(), segments)?;
            let mut out = cv.clone();
            for s in segments {
                log_softmax_in_place(&mut out.data_mut()[s.clone()]);
            }
            out
        };
        Ok(self.push(
            value,
            Op::SegmentLogSoftmax(col, segments.to_vec()),
            self.needs(&[col]),
        ))
    }

    /// Per segment: zero entries below `delta`, softmax-normalize the rest.
    /// A segment with no surviving entry is all zero.
    pub fn threshold_softmax(&self, col: Var, segments: &[Range<usize>], delta: S) -> Result<Var> {
        let (value, keep) = {
            let cv = self.value(col);
            check_segments("threshold_softmax", cv.rows(), cv.cols(), segments)?;
            let keep: Vec<bool> = cv.data().iter().map(|&v| v >= delta).collect();
            let mut out = Tensor2::zeros(cv.rows(), 1);
            for s in segments {
                let survivors: Vec<usize> = s.clone().filter(|&i| keep[i]).collect();
                if survivors.is_empty() {
                    continue;
                }
                let mut vals: Vec<S> = survivors.iter().map(|&i| cv.get(i, 0)).collect();
                softmax_in_place(&mut vals);
                for (&i, v) in survivors.iter().zip(vals) {
                    out.set(i, 0, v);
                }
            }
            (out, keep)
        };
        Ok(self.push(
            value,
            Op::ThresholdSoftmax(col, segments.to_vec(), keep),
            self.needs(&[col]),
        ))
    }

    /// Sums the rows of each segment, producing one row per segment.
    pub fn segment_sum(&self, a: Var, segments: &[Range<usize>]) -> Result<Var> {
        let value = {
            let av = self.value(a);
            check_segments("segment_sum", av.rows(), av.cols(), segments)?;
            let mut out = Tensor2::zeros(segments.len(), av.cols());
            for (m, s) in segments.iter().enumerate() {
                for r in s.clone() {
                    for (o, &v) in out.row_mut(m).iter_mut().zip(av.row(r)) {
                        *o += v;
                    }
                }
            }
            out
        };
        Ok(self.push(value, Op::SegmentSum(a, segments.to_vec()), self.needs(&[a])))
    }

    /// Reverse pass from a `1 x 1` loss. Returns one optional gradient per node;
    /// `None` for nodes that do not require gradients.
    pub fn backward(&self, loss: Var) -> Result<Vec<Option<Tensor2<S>>>> {
        let nodes = self.nodes.borrow();
        let (lr, lc) = nodes[loss.0].value.shape();
        if (lr, lc) != (1, 1) {
            return Err(Error::NonScalarLoss { rows: lr, cols: lc });
        }
        let mut grads: Vec<Option<Tensor2<S>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.0].needs_grad {
            grads[loss.0] = Some(Tensor2::filled(1, 1, S::one()));
        }

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (i, node) in nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            } else if node.needs_grad && grads[i].is_none() {
                let (r, c) = node.value.shape();
                grads[i] = Some(Tensor2::zeros(r, c));
            }
        }
        Ok(grads)
    }
}

fn log_softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<S>().ln() + max;
    for v in row.iter_mut() {
        *v -= lse;
    }
}

fn accumulate<S: Scalar>(nodes: &[Node<S>], grads: &mut [Option<Tensor2<S>>], v: Var, g: Tensor2<S>) {
    if !nodes[v.0].needs_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backprop_node<S: Scalar>(nodes: &[Node<S>], node: &Node<S>, g: &Tensor2<S>, grads: &mut [Option<Tensor2<S>>]) {
    let val = |v: Var| &nodes[v.0].value;
    let wants = |v: Var| nodes[v.0].needs_grad;
    // shapes are validated in the forward pass, so products below cannot fail
    let mm = |a: &Tensor2<S>, b: &Tensor2<S>| a.matmul(b).expect("shape checked in forward");
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            if wants(*a) {
                let ga = g.matmul_t(val(*b)).expect("shape checked in forward");
                accumulate(nodes, grads, *a, ga);
            }
            if wants(*b) {
                let gb = val(*a).t_matmul(g).expect("shape checked in forward");
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::MatMulT(a, b) => {
            if wants(*a) {
                accumulate(nodes, grads, *a, mm(g, val(*b)));
            }
            if wants(*b) {
                let gb = g.t_matmul(val(*a)).expect("shape checked in forward");
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::Transpose(a) => accumulate(nodes, grads, *a, g.transpose()),
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.scale(-S::one()));
        }
        Op::Mul(a, b) => {
            if wants(*a) {
                let ga = g.zip_map(val(*b), "mul", |x, y| x * y).expect("same shape");
                accumulate(nodes, grads, *a, ga);
            }
            if wants(*b) {
                let gb = g.zip_map(val(*a), "mul", |x, y| x * y).expect("same shape");
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::AddRow(a, row) => {
            accumulate(nodes, grads, *a, g.clone());
            if wants(*row) {
                accumulate(nodes, grads, *row, g.column_sums());
            }
        }
        Op::MulCol(a, col) => {
            let cv = val(*col);
            if wants(*a) {
                let mut ga = g.clone();
                for r in 0..ga.rows() {
                    let f = cv.get(r, 0);
                    for x in ga.row_mut(r) {
                        *x *= f;
                    }
                }
                accumulate(nodes, grads, *a, ga);
            }
            if wants(*col) {
                let av = val(*a);
                let gc: Vec<S> = (0..g.rows())
                    .map(|r| g.row(r).iter().zip(av.row(r)).map(|(&x, &y)| x * y).sum())
                    .collect();
                accumulate(nodes, grads, *col, Tensor2::column_vector(&gc));
            }
        }
        Op::Scale(a, f) => accumulate(nodes, grads, *a, g.scale(*f)),
        Op::AddScalar(a) => accumulate(nodes, grads, *a, g.clone()),
        Op::Gelu(a) => {
            let k = S::lit(GELU_K);
            let c = S::lit(GELU_C);
            let half = S::lit(0.5);
            let three = S::lit(3.0);
            let ga = g
                .zip_map(val(*a), "gelu", |gy, x| {
                    let t = (k * (x + c * x * x * x)).tanh();
                    let d = half * (S::one() + t) + half * x * (S::one() - t * t) * k * (S::one() + three * c * x * x);
                    gy * d
                })
                .expect("same shape");
            accumulate(nodes, grads, *a, ga);
        }
        Op::Relu(a) => {
            let ga = g
                .zip_map(val(*a), "relu", |gy, x| if x > S::zero() { gy } else { S::zero() })
                .expect("same shape");
            accumulate(nodes, grads, *a, ga);
        }
        Op::Tanh(a) => {
            let ga = g
                .zip_map(&node.value, "tanh", |gy, y| gy * (S::one() - y * y))
                .expect("same shape");
            accumulate(nodes, grads, *a, ga);
        }
        Op::SoftmaxRows(a) => {
            let y = &node.value;
            let mut ga = Tensor2::zeros(y.rows(), y.cols());
            for r in 0..y.rows() {
                let dot: S = g.row(r).iter().zip(y.row(r)).map(|(&gy, &yy)| gy * yy).sum();
                for c in 0..y.cols() {
                    ga.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::LogSoftmaxRows(a) => {
            let y = &node.value;
            let mut ga = Tensor2::zeros(y.rows(), y.cols());
            for r in 0..y.rows() {
                let total: S = g.row(r).iter().copied().sum();
                for c in 0..y.cols() {
                    ga.set(r, c, g.get(r, c) - y.get(r, c).exp() * total);
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let gv = val(*gamma);
            let (rows, cols) = xhat.shape();
            if wants(*beta) {
                accumulate(nodes, grads, *beta, g.column_sums());
            }
            if wants(*gamma) {
                let gg = g.zip_map(xhat, "layer_norm", |a, b| a * b).expect("same shape");
                accumulate(nodes, grads, *gamma, gg.column_sums());
            }
            if wants(*x) {
                let n = S::lit(cols as f64);
                let mut gx = Tensor2::zeros(rows, cols);
                for r in 0..rows {
                    let dxhat: Vec<S> = (0..cols).map(|c| g.get(r, c) * gv.get(0, c)).collect();
                    let mean_d = dxhat.iter().copied().sum::<S>() / n;
                    let mean_dx = dxhat
                        .iter()
                        .zip(xhat.row(r))
                        .map(|(&d, &h)| d * h)
                        .sum::<S>()
                        / n;
                    for c in 0..cols {
                        gx.set(r, c, inv_std[r] * (dxhat[c] - mean_d - xhat.get(r, c) * mean_dx));
                    }
                }
                accumulate(nodes, grads, *x, gx);
            }
        }
        Op::SliceCols(a, start) => {
            let (rows, cols) = val(*a).shape();
            let mut ga = Tensor2::zeros(rows, cols);
            for r in 0..rows {
                ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::ConcatCols(parts) => {
            let mut off = 0;
            for &p in parts {
                let (rows, cols) = val(p).shape();
                if wants(p) {
                    let mut gp = Tensor2::zeros(rows, cols);
                    for r in 0..rows {
                        gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                    }
                    accumulate(nodes, grads, p, gp);
                }
                off += cols;
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let (rows, cols) = val(p).shape();
                if wants(p) {
                    let gp = Tensor2::from_vec(rows, cols, g.data()[off * cols..(off + rows) * cols].to_vec())
                        .expect("segment shape");
                    accumulate(nodes, grads, p, gp);
                }
                off += rows;
            }
        }
        Op::SelectRows(a, idx) => {
            let (rows, cols) = val(*a).shape();
            let mut ga = Tensor2::zeros(rows, cols);
            for (k, &i) in idx.iter().enumerate() {
                for (o, &v) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                    *o += v;
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::SumAll(a) => {
            let (rows, cols) = val(*a).shape();
            accumulate(nodes, grads, *a, Tensor2::filled(rows, cols, g.get(0, 0)));
        }
        Op::RowSum(a) => {
            let (rows, cols) = val(*a).shape();
            let mut ga = Tensor2::zeros(rows, cols);
            for r in 0..rows {
                let v = g.get(r, 0);
                for o in ga.row_mut(r) {
                    *o = v;
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::Pick(a, at) => {
            let (rows, cols) = val(*a).shape();
            let mut ga = Tensor2::zeros(rows, cols);
            for (k, &(r, c)) in at.iter().enumerate() {
                let cur = ga.get(r, c);
                ga.set(r, c, cur + g.get(k, 0));
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::SegmentLogSoftmax(a, segments) => {
            let y = &node.value;
            let mut ga = Tensor2::zeros(y.rows(), 1);
            for s in segments {
                let total: S = s.clone().map(|i| g.get(i, 0)).sum();
                for i in s.clone() {
                    ga.set(i, 0, g.get(i, 0) - y.get(i, 0).exp() * total);
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::ThresholdSoftmax(a, segments, keep) => {
            let y = &node.value;
            let mut ga = Tensor2::zeros(y.rows(), 1);
            for s in segments {
                let dot: S = s
                    .clone()
                    .filter(|&i| keep[i])
                    .map(|i| g.get(i, 0) * y.get(i, 0))
                    .sum();
                for i in s.clone().filter(|&i| keep[i]) {
                    ga.set(i, 0, y.get(i, 0) * (g.get(i, 0) - dot));
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::SegmentSum(a, segments) => {
            let (rows, cols) = val(*a).shape();
            let mut ga = Tensor2::zeros(rows, cols);
            for (m, s) in segments.iter().enumerate() {
                for r in s.clone() {
                    ga.row_mut(r).copy_from_slice(g.row(m));
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
    }
}
