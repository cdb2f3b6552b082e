//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every differentiable operation used by the model is a method on [`Tape`].
//! A forward pass appends nodes in execution order, so the node list is
//! already topologically sorted; [`Tape::backward`] walks it in reverse.
//!
//! `backward` does not mutate the tape: it returns a fresh [`Gradients`]
//! table each call, so calling it twice yields identical results rather
//! than doubled accumulators.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Mask, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Entrywise operations; `Add` and `Mul` are binary, the rest unary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    Relu,
    Sigmoid,
    Tanh,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    RowSoftmax(Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    Row(Var, usize),
    StackRows(Vec<Var>),
    LogClamped(Var, T, T),
    WeightedSum(Var, Matrix<T>),
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf; gradients flow into it.
    pub fn param(&mut self, value: Matrix<T>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Non-trainable leaf (inputs, zero states).
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push_raw(&mut self, value: Matrix<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `1 x cols` row to every row of `a` (bias broadcast).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (am, rm) = (self.value(a), self.value(row));
        if rm.rows() != 1 || rm.cols() != am.cols() {
            return Err(Error::Shape {
                op: "add_row",
                left: am.shape(),
                right: rm.shape(),
            });
        }
        let mut value = am.clone();
        let bias = rm.row(0);
        for i in 0..value.rows() {
            for (x, &b) in value.row_mut(i).iter_mut().zip(bias) {
                *x += b;
            }
        }
        Ok(self.push(value, Op::AddRow(a, row), &[a, row]))
    }

    /// `scale * a + shift`, entrywise.
    pub fn affine(&mut self, a: Var, scale: T, shift: T) -> Var {
        let value = self.value(a).map(|x| scale * x + shift);
        self.push(value, Op::Affine(a, scale), &[a])
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        self.affine(a, factor, T::zero())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::tanh);
        self.push(value, Op::Tanh(a), &[a])
    }

    pub fn elementwise(&mut self, op: Elementwise, args: &[Var]) -> Result<Var> {
        let arity = match op {
            Elementwise::Add | Elementwise::Mul => 2,
            _ => 1,
        };
        if args.len() != arity {
            return Err(Error::Contract(format!(
                "{op:?} takes {arity} operand(s), got {}",
                args.len()
            )));
        }
        match op {
            Elementwise::Add => self.add(args[0], args[1]),
            Elementwise::Mul => self.mul(args[0], args[1]),
            Elementwise::Relu => Ok(self.relu(args[0])),
            Elementwise::Sigmoid => Ok(self.sigmoid(args[0])),
            Elementwise::Tanh => Ok(self.tanh(args[0])),
        }
    }

    /// Softmax along each row over the valid columns of `mask`.
    /// Masked columns come out exactly zero.
    pub fn row_softmax(&mut self, x: Var, mask: Option<&Mask>) -> Result<Var> {
        let xm = self.value(x);
        if let Some(m) = mask {
            if m.len() != xm.cols() {
                return Err(Error::Dimension {
                    what: "row_softmax mask length".into(),
                    expected: xm.cols(),
                    found: m.len(),
                });
            }
        }
        let valid = |j: usize| mask.is_none_or(|m| m.is_valid(j));
        let mut out = Matrix::zeros(xm.rows(), xm.cols());
        for i in 0..xm.rows() {
            let row = xm.row(i);
            let max = (0..row.len())
                .filter(|&j| valid(j))
                .map(|j| row[j])
                .fold(None, |acc: Option<T>, v| Some(acc.map_or(v, |a| a.max(v))))
                .ok_or(Error::DegenerateMask { row: i })?;
            let out_row = out.row_mut(i);
            let mut total = T::zero();
            for j in 0..row.len() {
                if valid(j) {
                    let e = (row[j] - max).exp();
                    out_row[j] = e;
                    total += e;
                }
            }
            for v in out_row.iter_mut() {
                *v /= total;
            }
        }
        Ok(self.push(out, Op::RowSoftmax(x), &[x]))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).concat_cols(self.value(b))?;
        Ok(self.push(value, Op::ConcatCols(a, b), &[a, b]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).slice_cols(start, len)?;
        Ok(self.push(value, Op::SliceCols(a, start), &[a]))
    }

    /// Row `i` of `a` as a `1 x cols` matrix.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let am = self.value(a);
        if i >= am.rows() {
            return Err(Error::Contract(format!(
                "row {i} out of range for {} rows",
                am.rows()
            )));
        }
        let value = Matrix::from_vec(1, am.cols(), am.row(i).to_vec())?;
        Ok(self.push(value, Op::Row(a, i), &[a]))
    }

    /// Stacks `1 x cols` rows into a `rows.len() x cols` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let cols = rows
            .first()
            .map(|&r| self.value(r).cols())
            .ok_or_else(|| Error::Contract("stack_rows needs at least one row".into()))?;
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            let m = self.value(r);
            if m.shape() != (1, cols) {
                return Err(Error::Shape {
                    op: "stack_rows",
                    left: (1, cols),
                    right: m.shape(),
                });
            }
            data.extend_from_slice(m.as_slice());
        }
        let value = Matrix::from_vec(rows.len(), cols, data)?;
        Ok(self.push(value, Op::StackRows(rows.to_vec()), rows))
    }

    /// `ln(clamp(a, lo, hi))`; the gradient is zero where the clamp is active.
    /// NaN passes through unclamped.
    pub fn log_clamped(&mut self, a: Var, lo: T, hi: T) -> Var {
        let value = self.value(a).map(|x| if x.is_nan() { x } else { x.max(lo).min(hi).ln() });
        self.push(value, Op::LogClamped(a, lo, hi), &[a])
    }

    /// `sum_ij weights_ij * a_ij` as a `1 x 1` node; `weights` is a constant.
    pub fn weighted_sum(&mut self, a: Var, weights: Matrix<T>) -> Result<Var> {
        let value = self.value(a).hadamard(&weights)?.sum();
        Ok(self.push(Matrix::scalar(value), Op::WeightedSum(a, weights), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = self.value(a).sum();
        self.push(Matrix::scalar(value), Op::Sum(a), &[a])
    }

    /// Reverse sweep from a `1 x 1` output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out_shape = self.shape(output);
        if out_shape != (1, 1) {
            return Err(Error::Contract(format!(
                "backward requires a 1x1 output, got {out_shape:?}"
            )));
        }
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::scalar(T::one()));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) -> Result<()> {
        let mut acc = |v: Var, delta: Matrix<T>| -> Result<()> {
            if !self.nodes[v.0].requires_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot => {
                    *slot = Some(delta);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (am, bm) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    acc(*a, g.matmul(&bm.transpose())?)?;
                }
                if self.nodes[b.0].requires_grad {
                    acc(*b, am.transpose().matmul(g)?)?;
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose())?,
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Mul(a, b) => {
                acc(*a, g.hadamard(self.value(*b))?)?;
                acc(*b, g.hadamard(self.value(*a))?)?;
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone())?;
                let mut col_sums = Matrix::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (s, &x) in col_sums.row_mut(0).iter_mut().zip(g.row(i)) {
                        *s += x;
                    }
                }
                acc(*row, col_sums)?;
            }
            Op::Affine(a, scale) => acc(*a, g.scale(*scale))?,
            Op::Relu(a) => {
                let d = g.zip_map(self.value(*a), "relu'", |g, x| {
                    if x > T::zero() {
                        g
                    } else {
                        T::zero()
                    }
                })?;
                acc(*a, d)?;
            }
            Op::Sigmoid(a) => {
                let d = g.zip_map(&node.value, "sigmoid'", |g, y| g * y * (T::one() - y))?;
                acc(*a, d)?;
            }
            Op::Tanh(a) => {
                let d = g.zip_map(&node.value, "tanh'", |g, y| g * (T::one() - y * y))?;
                acc(*a, d)?;
            }
            Op::RowSoftmax(a) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for (j, out) in d.row_mut(i).iter_mut().enumerate() {
                        *out = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*a, d)?;
            }
            Op::ConcatCols(a, b) => {
                let ac = self.value(*a).cols();
                acc(*a, g.slice_cols(0, ac)?)?;
                acc(*b, g.slice_cols(ac, g.cols() - ac)?)?;
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = self.shape(*a);
                let mut d = Matrix::zeros(rows, cols);
                for i in 0..rows {
                    d.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                acc(*a, d)?;
            }
            Op::Row(a, i) => {
                let (rows, cols) = self.shape(*a);
                let mut d = Matrix::zeros(rows, cols);
                d.row_mut(*i).copy_from_slice(g.row(0));
                acc(*a, d)?;
            }
            Op::StackRows(rows) => {
                for (i, &r) in rows.iter().enumerate() {
                    acc(r, Matrix::from_vec(1, g.cols(), g.row(i).to_vec())?)?;
                }
            }
            Op::LogClamped(a, lo, hi) => {
                let d = g.zip_map(self.value(*a), "log'", |g, x| {
                    if x.is_nan() || (x > *lo && x < *hi) {
                        g / x
                    } else {
                        T::zero()
                    }
                })?;
                acc(*a, d)?;
            }
            Op::WeightedSum(a, w) => acc(*a, w.scale(g.get(0, 0)))?,
            Op::Sum(a) => {
                let (rows, cols) = self.shape(*a);
                acc(*a, Matrix::filled(rows, cols, g.get(0, 0)))?;
            }
        }
        Ok(())
    }
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the output with respect to `v`, or `None` when `v`
    /// does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but yields zeros of `v`'s shape when absent.
    pub fn wrt(&self, tape: &Tape<T>, v: Var) -> Matrix<T> {
        self.get(v).cloned().unwrap_or_else(|| {
            let (r, c) = tape.shape(v);
            Matrix::zeros(r, c)
        })
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient_is_two_x() {
        let mut tape = Tape::new();
        let x = tape.param(m(&[&[1.0, -2.0, 3.5]]));
        let sq = tape.mul(x, x).unwrap();
        let out = tape.sum(sq);
        let g = tape.backward(out).unwrap();
        assert_eq!(g.get(x).unwrap(), &m(&[&[2.0, -4.0, 7.0]]));
    }

    #[test]
    fn shared_input_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(Matrix::scalar(3.0));
        let y = tape.add(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().get(0, 0), 2.0);
    }

    #[test]
    fn backward_twice_is_identical() {
        let mut tape = Tape::new();
        let x = tape.param(m(&[&[0.3, -0.7]]));
        let s = tape.sigmoid(x);
        let out = tape.sum(s);
        let g1 = tape.backward(out).unwrap();
        let g2 = tape.backward(out).unwrap();
        assert_eq!(g1.get(x), g2.get(x));
    }

    #[test]
    fn backward_rejects_non_scalar_output() {
        let mut tape = Tape::new();
        let x = tape.param(m(&[&[1.0, 2.0]]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn elementwise_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(m(&[&[-1.0, 0.0, 2.0]]));
        let r = tape.elementwise(Elementwise::Relu, &[x]).unwrap();
        assert_eq!(tape.value(r), &m(&[&[0.0, 0.0, 2.0]]));
        let z = tape.constant(Matrix::scalar(0.0));
        let s = tape.sigmoid(z);
        let t = tape.tanh(z);
        assert_eq!(tape.value(s).get(0, 0), 0.5);
        assert_eq!(tape.value(t).get(0, 0), 0.0);
        assert!(tape.elementwise(Elementwise::Add, &[x]).is_err());
        let y = tape.constant(m(&[&[1.0, 2.0]]));
        assert!(tape.elementwise(Elementwise::Add, &[x, y]).is_err());
    }

    #[test]
    fn sigmoid_derivative_at_zero_matches_central_difference() {
        let mut tape = Tape::new();
        let x = tape.param(Matrix::scalar(0.0));
        let s = tape.sigmoid(x);
        let g = tape.backward(s).unwrap().get(x).unwrap().get(0, 0);
        assert_eq!(g, 0.25);
        let h = 1e-5;
        let fd: f64 = (sigmoid(h) - sigmoid(-h)) / (2.0 * h);
        assert!(((g - fd) / fd).abs() < 1e-8);
    }

    #[test]
    fn softmax_rows() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(m(&[&[0.0, 0.0], &[2f64.ln(), 0.0]]));
        let y = tape.row_softmax(x, None).unwrap();
        let v = tape.value(y);
        assert_eq!(v.row(0), &[0.5, 0.5]);
        assert!((v.get(1, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((v.get(1, 1) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(m(&[&[5.0, 100.0, 3.0]]));
        let mask = Mask::new(vec![true, false, true]).unwrap();
        let y = tape.row_softmax(x, Some(&mask)).unwrap();
        let expected = 1.0 / (1.0 + (-2f64).exp());
        let v = tape.value(y).clone();
        assert!((v.get(0, 0) - expected).abs() < 1e-12);
        assert_eq!(v.get(0, 1), 0.0);
        assert!((v.get(0, 2) - (1.0 - expected)).abs() < 1e-12);
        assert!((v.get(0, 0) - 0.8808).abs() < 1e-4);

        let w = Matrix::from_rows(&[[1.0, 7.0, -2.0]]).unwrap();
        let out = tape.weighted_sum(y, w).unwrap();
        let g = tape.backward(out).unwrap();
        assert_eq!(g.get(x).unwrap().get(0, 1), 0.0);
    }

    #[test]
    fn softmax_rejects_degenerate_mask_row() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(m(&[&[1.0, 2.0]]));
        let short = Mask::all(3);
        assert!(tape.row_softmax(x, Some(&short)).is_err());
    }

    #[test]
    fn concat_sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let a = tape.param(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.param(m(&[&[5.0], &[6.0]]));
        let c = tape.concat_cols(a, b).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap(), &Matrix::filled(2, 2, 1.0));
        assert_eq!(g.get(b).unwrap(), &Matrix::filled(2, 1, 1.0));
    }

    #[test]
    fn matmul_gradient_rule() {
        let mut tape = Tape::new();
        let a = tape.param(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.param(m(&[&[5.0], &[6.0]]));
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        // G = ones(2x1): dA = G Bᵀ, dB = Aᵀ G
        assert_eq!(g.get(a).unwrap(), &m(&[&[5.0, 6.0], &[5.0, 6.0]]));
        assert_eq!(g.get(b).unwrap(), &m(&[&[4.0], &[6.0]]));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(m(&[&[1.0, 2.0]]));
        let p = tape.param(m(&[&[3.0, 4.0]]));
        let prod = tape.mul(c, p).unwrap();
        let s = tape.sum(prod);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.wrt(&tape, c), Matrix::zeros(1, 2));
        assert_eq!(g.get(p).unwrap(), &m(&[&[1.0, 2.0]]));
    }
}
