//! Central finite-difference verification of reverse-mode gradients.

use serde::Serialize;

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-3;

/// Floor for the relative-error denominator.
const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_error: f64,
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
    pub passed: bool,
    /// Set when a gradient or loss was non-finite.
    pub failure: Option<String>,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// How the numeric derivative is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FdScheme {
    /// `(f(θ+h) - f(θ-h)) / 2h`.
    Central,
    /// Central differences at `h` and `h/2` combined as `(4 D(h/2) - D(h)) / 3`,
    /// cancelling the `h^2` truncation term.
    Richardson,
}

fn eval<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let root = f(&mut tape, &vars)?;
    Ok(tape.scalar(root))
}

/// Compares the tape gradient of `f` against `(f(θ+h) - f(θ-h)) / 2h` for
/// every coordinate of every parameter.
///
/// `f` receives one [`Var`] per entry of `params`, in order, and must return a
/// one-element node.
pub fn grad_check<F>(op: &str, f: F, params: &[(String, Tensor)], tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_with(op, f, params, tolerance, FdScheme::Central)
}

fn central<F>(f: &F, values: &mut [Tensor], pi: usize, i: usize, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let orig = values[pi][i];
    values[pi][i] = orig + h;
    let fp = eval(f, values);
    values[pi][i] = orig - h;
    let fm = eval(f, values);
    values[pi][i] = orig;
    Ok((fp? - fm?) / (2.0 * h))
}

/// [`grad_check`] with an explicit finite-difference scheme.
pub fn grad_check_with<F>(
    op: &str,
    f: F,
    params: &[(String, Tensor)],
    tolerance: f64,
    scheme: FdScheme,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = values.iter().map(|p| tape.param(p.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(&values)
        .map(|(&v, p)| grads.get_or_zeros(v, p))
        .collect();
    drop(tape);

    let mut report = GradCheckReport {
        op: op.to_string(),
        max_rel_error: 0.0,
        params: Vec::with_capacity(params.len()),
        tolerance,
        passed: true,
        failure: None,
    };

    for (pi, (name, _)) in params.iter().enumerate() {
        if let Some(loc) = analytic[pi].first_non_finite() {
            report.passed = false;
            report.failure = Some(format!("non-finite analytic gradient in `{name}` at {loc:?}"));
            report.max_rel_error = f64::INFINITY;
            return Ok(report);
        }
        let mut entry = ParamCheck {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..values[pi].len() {
            let numeric = match scheme {
                FdScheme::Central => central(&f, &mut values, pi, i, FD_STEP)?,
                FdScheme::Richardson => {
                    let coarse = central(&f, &mut values, pi, i, FD_STEP)?;
                    let fine = central(&f, &mut values, pi, i, FD_STEP / 2.0)?;
                    (4.0 * fine - coarse) / 3.0
                }
            };
            if !numeric.is_finite() {
                report.passed = false;
                report.failure = Some(format!(
                    "non-finite finite-difference estimate in `{name}` at {:?}",
                    values[pi].unravel(i)
                ));
                report.max_rel_error = f64::INFINITY;
                return Ok(report);
            }
            let a = analytic[pi][i];
            let err = relative_error(a, numeric);
            if err > entry.max_rel_error || i == 0 {
                entry.max_rel_error = err;
                entry.worst_index = i;
                entry.analytic = a;
                entry.numeric = numeric;
            }
        }
        report.max_rel_error = report.max_rel_error.max(entry.max_rel_error);
        report.params.push(entry);
    }
    report.passed = report.max_rel_error <= tolerance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn sum_of(tape: &mut Tape, x: Var) -> Result<Var> {
        Ok(tape.sum(x))
    }

    #[test]
    fn linear_sum_is_exact() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(0);
        let p = vec![("theta".to_string(), Tensor::randn(&[3, 4], &mut rng))];
        let r = grad_check("sum", |t, v| sum_of(t, v[0]), &p, 1e-10).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn quadratic_is_within_tolerance() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
        let p = vec![("theta".to_string(), Tensor::randn(&[5], &mut rng))];
        let r = grad_check(
            "sum_sq",
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                sum_of(t, sq)
            },
            &p,
            1e-6,
        )
        .unwrap();
        assert!(r.passed && r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let p = vec![("theta".to_string(), Tensor::new(&[2], vec![1.0, -2.0]).unwrap())];
        let r = grad_check(
            "broken",
            |t, v| {
                let s = t.value(v[0]).sum();
                Ok(t.custom(v[0], Tensor::scalar(s), Box::new(|g| Ok(Tensor::full(&[2], 2.0 * g[0])))))
            },
            &p,
            1e-4,
        )
        .unwrap();
        assert!(!r.passed);
        assert!((r.max_rel_error - 0.5).abs() < 1e-9);
    }

    #[test]
    fn non_finite_gradient_reports_location() {
        let p = vec![("theta".to_string(), Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap())];
        let r = grad_check(
            "nan",
            |t, v| {
                let s = t.value(v[0]).sum();
                Ok(t.custom(
                    v[0],
                    Tensor::scalar(s),
                    Box::new(|_| Ok(Tensor::new(&[3], vec![1.0, f64::NAN, 1.0]).unwrap())),
                ))
            },
            &p,
            1e-4,
        )
        .unwrap();
        assert!(!r.passed);
        assert!(r.failure.unwrap().contains("[1]"));
    }
}
