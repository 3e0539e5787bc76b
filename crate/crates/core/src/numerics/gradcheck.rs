//! Central-difference gradient checking in 64-bit arithmetic.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Worst coordinate found by [`grad_check_many`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_tensor: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {eps} outside [1e-7, 1e-4]"
        )));
    }
    Ok(())
}

fn evaluate<F>(f: &F, params: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if value.numel() != 1 {
        return Err(Error::shape("grad_check", value.shape(), &[1]));
    }
    let v = value.item();
    if !v.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    Ok(v)
}

/// Compares reverse-mode gradients of the scalar `f` with respect to every
/// coordinate of every tensor in `params` against central differences.
///
/// The per-coordinate error is
/// `|analytic - fd| / max(|analytic|, |fd|, 1e-12)`.
pub fn grad_check_many<F>(f: F, params: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    check_eps(eps)?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).item().is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    let grads = tape.backward(out)?;
    drop(tape);

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_tensor: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (t, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, params[t].shape());
        for i in 0..params[t].numel() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + eps;
            let plus = evaluate(&f, &work)?;
            work[t].data_mut()[i] = orig - eps;
            let minus = evaluate(&f, &work)?;
            work[t].data_mut()[i] = orig;

            let fd = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[i];
            let denom = a.abs().max(fd.abs()).max(1e-12);
            let err = (a - fd).abs() / denom;
            report.coordinates += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst_tensor = t;
                report.worst_index = i;
                report.analytic = a;
                report.numeric = fd;
            }
        }
    }
    Ok(report)
}

/// Single-tensor form of [`grad_check_many`]; returns the maximum relative
/// error.
pub fn grad_check<F>(f: F, params: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let report = grad_check_many(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(params),
        eps,
    )?;
    Ok(report.max_relative_error)
}
