//! LSTM cell and bidirectional LSTM layer built from tape primitives.
//!
//! Gate layout along the `4 * hidden` axis is `[input, forget, candidate, output]`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{Mask, Matrix};

/// `w_ih` is `input x 4h`, `w_hh` is `h x 4h`, `bias` is `1 x 4h`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams<P> {
    pub w_ih: P,
    pub w_hh: P,
    pub bias: P,
}

impl<T: Scalar> LstmParams<Matrix<T>> {
    /// Uniform(-1/sqrt(h), 1/sqrt(h)) weights, zero biases except the forget gate at 1.
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut bias = Matrix::zeros(1, 4 * hidden);
        for j in hidden..2 * hidden {
            bias.set(0, j, T::one());
        }
        LstmParams {
            w_ih: Matrix::uniform(input, 4 * hidden, bound, rng),
            w_hh: Matrix::uniform(hidden, 4 * hidden, bound, rng),
            bias,
        }
    }

    pub fn input_size(&self) -> usize {
        self.w_ih.rows()
    }

    pub fn hidden_size(&self) -> usize {
        self.w_hh.rows()
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> LstmParams<Var> {
        LstmParams {
            w_ih: tape.param(self.w_ih.clone()),
            w_hh: tape.param(self.w_hh.clone()),
            bias: tape.param(self.bias.clone()),
        }
    }
}

fn hidden_of<T: Scalar>(tape: &Tape<T>, params: &LstmParams<Var>) -> usize {
    tape.shape(params.w_hh).0
}

/// Gate update given the input contribution `x W_ih + b` (`1 x 4h`).
fn step_from_input<T: Scalar>(
    tape: &mut Tape<T>,
    params: &LstmParams<Var>,
    input_part: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var)> {
    let h = hidden_of(tape, params);
    let recurrent = tape.matmul(h_prev, params.w_hh)?;
    let pre = tape.add(input_part, recurrent)?;

    let i_pre = tape.slice_cols(pre, 0, h)?;
    let f_pre = tape.slice_cols(pre, h, h)?;
    let g_pre = tape.slice_cols(pre, 2 * h, h)?;
    let o_pre = tape.slice_cols(pre, 3 * h, h)?;
    let i = tape.sigmoid(i_pre);
    let f = tape.sigmoid(f_pre);
    let g = tape.tanh(g_pre);
    let o = tape.sigmoid(o_pre);

    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let c_act = tape.tanh(c);
    let h_new = tape.mul(o, c_act)?;
    Ok((h_new, c))
}

/// One LSTM step on a `1 x input` row; returns `(h, c)`.
pub fn lstm_cell_step<T: Scalar>(
    tape: &mut Tape<T>,
    params: &LstmParams<Var>,
    x: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var)> {
    let h = hidden_of(tape, params);
    for (what, v) in [("h_prev", h_prev), ("c_prev", c_prev)] {
        if tape.shape(v) != (1, h) {
            return Err(Error::Contract(format!(
                "lstm_cell_step: {what} must be 1x{h}, got {:?}",
                tape.shape(v)
            )));
        }
    }
    let xw = tape.matmul(x, params.w_ih)?;
    let input_part = tape.add(xw, params.bias)?;
    step_from_input(tape, params, input_part, h_prev, c_prev)
}

/// Runs one direction over the valid positions of `x` in the given order.
/// Returns one `1 x h` node per position, zeros at padded positions.
fn run_direction<T: Scalar>(
    tape: &mut Tape<T>,
    params: &LstmParams<Var>,
    x: Var,
    order: impl Iterator<Item = usize>,
) -> Result<Vec<Option<Var>>> {
    let n = tape.shape(x).0;
    let h = hidden_of(tape, params);
    let xw = tape.matmul(x, params.w_ih)?;
    let projected = tape.add_row(xw, params.bias)?;

    let mut h_prev = tape.constant(Matrix::zeros(1, h));
    let mut c_prev = tape.constant(Matrix::zeros(1, h));
    let mut out = vec![None; n];
    for i in order {
        let input_part = tape.row(projected, i)?;
        let (h_new, c_new) = step_from_input(tape, params, input_part, h_prev, c_prev)?;
        out[i] = Some(h_new);
        h_prev = h_new;
        c_prev = c_new;
    }
    Ok(out)
}

/// Bidirectional LSTM: `N x d_in` to `N x 2h`, rows `[h_fwd; h_bwd]`.
/// Padded positions are skipped by both directions and output zeros.
pub fn bilstm_forward<T: Scalar>(
    tape: &mut Tape<T>,
    fwd: &LstmParams<Var>,
    bwd: &LstmParams<Var>,
    x: Var,
    mask: Option<&Mask>,
) -> Result<Var> {
    let (n, d_in) = tape.shape(x);
    if n == 0 {
        return Err(Error::Data("bilstm_forward: empty sequence".into()));
    }
    for p in [fwd, bwd] {
        if tape.shape(p.w_ih).0 != d_in {
            return Err(Error::Shape {
                op: "bilstm_forward",
                left: (n, d_in),
                right: tape.shape(p.w_ih),
            });
        }
    }
    let all = Mask::all(n);
    let mask = match mask {
        Some(m) if m.len() != n => {
            return Err(Error::Dimension {
                what: "bilstm mask length".into(),
                expected: n,
                found: m.len(),
            })
        }
        Some(m) => m,
        None => &all,
    };

    let h = hidden_of(tape, fwd);
    let forward = run_direction(tape, fwd, x, mask.valid_indices())?;
    let backward = run_direction(tape, bwd, x, mask.valid_indices().rev())?;

    let zero = tape.constant(Matrix::zeros(1, h));
    let zero_b = tape.constant(Matrix::zeros(1, hidden_of(tape, bwd)));
    let f_rows: Vec<Var> = forward.iter().map(|r| r.unwrap_or(zero)).collect();
    let b_rows: Vec<Var> = backward.iter().map(|r| r.unwrap_or(zero_b)).collect();
    let f = tape.stack_rows(&f_rows)?;
    let b = tape.stack_rows(&b_rows)?;
    tape.concat_cols(f, b)
}
