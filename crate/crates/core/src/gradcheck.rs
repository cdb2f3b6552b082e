//! Central finite-difference verification of tape gradients.

use serde::Serialize;

use crate::data::Label;
use crate::error::{Error, Result};
use crate::model::{forward_nodes, loss_nodes, CadModel, ModelParams};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{Mask, Matrix};

/// Relative error is `|analytic - numeric| / max(|analytic|, |numeric|, REL_FLOOR)`.
/// The floor keeps vanishing gradients from turning round-off into huge ratios.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub shape: (usize, usize),
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the tape gradient of `f` against central differences with step `h`
/// for every entry of every parameter.
///
/// `f` receives a fresh tape and the parameters bound as trainable leaves
/// (in the order of `params`) and must return a `1 x 1` node.
pub fn grad_check<T, F>(f: F, params: &[(String, Matrix<T>)], h: f64, tol: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Matrix<T>]| -> Result<(f64, Tape<T>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|m| tape.param(m.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let loss = tape.value(out).get(0, 0).as_f64();
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("grad_check loss ({loss})")));
        }
        Ok((loss, tape, vars, out))
    };

    let mut values: Vec<Matrix<T>> = params.iter().map(|(_, m)| m.clone()).collect();
    let (_, tape, vars, out) = eval(&values)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Matrix<T>> = vars.iter().map(|&v| grads.wrt(&tape, v)).collect();

    let mut checks = Vec::with_capacity(params.len());
    for (p, (name, original)) in params.iter().enumerate() {
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for k in 0..original.len() {
            let base = original.as_slice()[k];
            values[p].as_mut_slice()[k] = base + T::of(h);
            let plus = eval(&values)?.0;
            values[p].as_mut_slice()[k] = base - T::of(h);
            let minus = eval(&values)?.0;
            values[p].as_mut_slice()[k] = base;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[p].as_slice()[k].as_f64();
            max_rel = max_rel.max(relative_error(a, numeric));
            max_abs = max_abs.max((a - numeric).abs());
        }
        checks.push(ParamCheck {
            name: name.clone(),
            shape: original.shape(),
            max_rel_err: max_rel,
            max_abs_err: max_abs,
        });
    }
    let passed = checks.iter().all(|c| c.max_rel_err < tol);
    Ok(GradCheckReport {
        step: h,
        tolerance: tol,
        params: checks,
        passed,
    })
}

/// Checks the gradient of `model`'s total loss on one sequence with respect to
/// every model parameter.
pub fn check_model(
    model: &CadModel<f64>,
    x_a: &Matrix<f64>,
    x_t: &Matrix<f64>,
    labels: &[Label],
    mask: Option<&Mask>,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let config = model.config();
    let layout = ModelParams::layout(config);
    let params: Vec<(String, Matrix<f64>)> = model
        .params()
        .named()
        .into_iter()
        .map(|(name, m)| (name.to_string(), m.clone()))
        .collect();
    grad_check(
        |tape: &mut Tape<f64>, vars| {
            let mut next = vars.iter().copied();
            let bound = layout.map(|_, _| next.next().expect("one var per parameter"));
            let a = tape.constant(x_a.clone());
            let t = tape.constant(x_t.clone());
            let fwd = forward_nodes(tape, config, &bound, a, t, mask)?;
            Ok(loss_nodes(tape, config, &fwd, labels, mask)?.total)
        },
        &params,
        h,
        tol,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_form_is_exact_to_round_off() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Matrix::<f64>::uniform(3, 3, 1.0, &mut rng);
        let x = Matrix::<f64>::uniform(3, 1, 1.0, &mut rng);
        let report = grad_check(
            |tape, vars| {
                // xᵀ A x
                let xt = tape.transpose(vars[1]);
                let ax = tape.matmul(vars[0], vars[1])?;
                tape.matmul(xt, ax)
            },
            &[("a".into(), a), ("x".into(), x)],
            1e-5,
            1e-9,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn non_finite_loss_aborts() {
        let err = grad_check(
            |tape, vars| Ok(tape.log_clamped(vars[0], f64::NEG_INFINITY, f64::INFINITY)),
            &[("x".into(), Matrix::scalar(-1.0))],
            1e-5,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }
}
