//! Acoustic-keyed attention over text values, its single-modality
//! self-attention variant, and the cross-type attention regularizer.
//!
//! Queries and keys are the same projected acoustic node, values are the
//! projected text:
//!
//! ```text
//! Q = K = X_a W_a        V = X_t W_t
//! A = row_softmax(Q Kᵀ / sqrt(d_q))        H = A V
//! ```
//!
//! The regularizer sums the post-softmax mass `A[i][j]` over pairs of valid
//! segments whose labels differ, so it lies in `[0, N_valid]`.

use rand::Rng;

use crate::data::Label;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{Mask, Matrix};

/// Projection matrices: `w_a` is `d_a x d_q`, `w_t` is `d_t x d_v`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<P> {
    pub w_a: P,
    pub w_t: P,
}

impl<T: Scalar> AttentionParams<Matrix<T>> {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
    pub fn init<R: Rng + ?Sized>(d_a: usize, d_t: usize, d_q: usize, d_v: usize, rng: &mut R) -> Self {
        AttentionParams {
            w_a: Matrix::uniform(d_a, d_q, 1.0 / (d_a as f64).sqrt(), rng),
            w_t: Matrix::uniform(d_t, d_v, 1.0 / (d_t as f64).sqrt(), rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> AttentionParams<Var> {
        AttentionParams {
            w_a: tape.param(self.w_a.clone()),
            w_t: tape.param(self.w_t.clone()),
        }
    }
}

/// Tape nodes of one attention evaluation.
#[derive(Clone, Copy, Debug)]
pub struct AttentionNodes {
    /// Shared query/key node.
    pub query: Var,
    pub scores: Var,
    pub values: Var,
    pub fused: Var,
}

impl AttentionNodes {
    pub fn resolve<T: Scalar>(&self, tape: &Tape<T>) -> AttentionOutput<T> {
        AttentionOutput {
            scores: tape.value(self.scores).clone(),
            fused: tape.value(self.fused).clone(),
            values: tape.value(self.values).clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput<T> {
    /// `N x N` row-stochastic score matrix.
    pub scores: Matrix<T>,
    /// `N x d_v`, equal to `scores * values`.
    pub fused: Matrix<T>,
    /// `N x d_v`.
    pub values: Matrix<T>,
}

/// Returns `(Q, K, V)`; `Q` and `K` are the same node.
pub fn project<T: Scalar>(
    tape: &mut Tape<T>,
    x_a: Var,
    x_t: Var,
    params: &AttentionParams<Var>,
) -> Result<(Var, Var, Var)> {
    let (na, nt) = (tape.shape(x_a).0, tape.shape(x_t).0);
    if na != nt {
        return Err(Error::Dimension {
            what: "text rows vs acoustic rows".into(),
            expected: na,
            found: nt,
        });
    }
    let q = tape.matmul(x_a, params.w_a)?;
    let v = tape.matmul(x_t, params.w_t)?;
    Ok((q, q, v))
}

fn scaled_dot_product<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Mask>,
) -> Result<AttentionNodes> {
    let d_q = tape.shape(q).1;
    let kt = tape.transpose(k);
    let logits = tape.matmul(q, kt)?;
    let scaled = tape.scale(logits, T::one() / T::of(d_q as f64).sqrt());
    let scores = tape.row_softmax(scaled, mask)?;
    let fused = tape.matmul(scores, v)?;
    Ok(AttentionNodes {
        query: q,
        scores,
        values: v,
        fused,
    })
}

pub fn multimodal_attention<T: Scalar>(
    tape: &mut Tape<T>,
    x_a: Var,
    x_t: Var,
    params: &AttentionParams<Var>,
    mask: Option<&Mask>,
) -> Result<AttentionNodes> {
    let (q, k, v) = project(tape, x_a, x_t, params)?;
    scaled_dot_product(tape, q, k, v, mask)
}

/// Single-modality attention with `Q = K = V = x * proj`.
pub fn self_attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    proj: Var,
    mask: Option<&Mask>,
) -> Result<AttentionNodes> {
    let q = tape.matmul(x, proj)?;
    scaled_dot_product(tape, q, q, q, mask)
}

/// `N x N` indicator of valid pairs with differing labels.
pub fn cross_type_indicator<T: Scalar>(labels: &[Label], mask: Option<&Mask>) -> Result<Matrix<T>> {
    let n = labels.len();
    if let Some(m) = mask {
        if m.len() != n {
            return Err(Error::Dimension {
                what: "mask length vs labels".into(),
                expected: n,
                found: m.len(),
            });
        }
    }
    let valid = |i: usize| mask.is_none_or(|m| m.is_valid(i));
    let mut ind = Matrix::zeros(n, n);
    for i in (0..n).filter(|&i| valid(i)) {
        for j in (0..n).filter(|&j| valid(j)) {
            if labels[i] != labels[j] {
                ind.set(i, j, T::one());
            }
        }
    }
    Ok(ind)
}

fn check_labels(scores: (usize, usize), labels: &[Label]) -> Result<()> {
    if scores.0 != scores.1 {
        return Err(Error::Contract(format!("score matrix must be square, got {scores:?}")));
    }
    if labels.len() != scores.0 {
        return Err(Error::Dimension {
            what: "labels for attention regularizer".into(),
            expected: scores.0,
            found: labels.len(),
        });
    }
    Ok(())
}

/// Differentiable cross-type attention mass (unnormalized).
pub fn attention_regularizer<T: Scalar>(
    tape: &mut Tape<T>,
    scores: Var,
    labels: &[Label],
    mask: Option<&Mask>,
) -> Result<Var> {
    check_labels(tape.shape(scores), labels)?;
    let ind = cross_type_indicator(labels, mask)?;
    tape.weighted_sum(scores, ind)
}

/// Value-only cross-type attention mass, summed entry by entry.
pub fn cross_type_mass<T: Scalar>(scores: &Matrix<T>, labels: &[Label], mask: Option<&Mask>) -> Result<T> {
    check_labels(scores.shape(), labels)?;
    let valid = |i: usize| mask.is_none_or(|m| m.is_valid(i));
    let mut total = T::zero();
    for i in 0..labels.len() {
        for j in 0..labels.len() {
            if valid(i) && valid(j) && labels[i] != labels[j] {
                total += scores.get(i, j);
            }
        }
    }
    Ok(total)
}
