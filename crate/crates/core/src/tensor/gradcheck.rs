use super::{OpKind, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of [`grad_check`]: the worst entry over all parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat entry index)` of the worst entry.
    pub location: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub entries: usize,
}

/// Compares tape gradients of `f` against central differences.
///
/// The relative error of one entry is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    grad_check_with_fault(f, params, eps, None)
}

/// [`grad_check`] with one backward rule deliberately negated.
#[doc(hidden)]
pub fn grad_check_with_fault<F>(
    f: F,
    params: &[Tensor<f64>],
    eps: f64,
    fault: Option<OpKind>,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let analytic: Vec<Tensor<f64>> = {
        let tape = Tape::new();
        tape.corrupt_backward(fault);
        let vars: Vec<_> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter().map(|v| grads.wrt(v)).collect()
    };

    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        f(&tape, &vars)?.value().item()
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        location: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        entries: 0,
    };
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        for (j, &a) in grad.data().iter().enumerate() {
            if !a.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("analytic gradient of parameter {pi}"),
                    index: j,
                });
            }
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[pi].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[pi].data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.entries += 1;
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = rel;
                report.location = (pi, j);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let w = Tensor::from_f64([1, 3], &[0.5, -1.0, 2.0]).unwrap();
        let x = Tensor::from_f64([3, 1], &[1.0, 2.0, 3.0]).unwrap();
        let report = grad_check(
            |_, v| Ok(v[0].matmul(v[1])?.sum()),
            &[w, x],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
        assert_eq!(report.entries, 6);
    }

    #[test]
    fn sign_flip_is_caught() {
        let x = Tensor::from_f64([4], &[0.1, -0.4, 0.7, 1.3]).unwrap();
        let report = grad_check_with_fault(|_, v| Ok(v[0].sigmoid().sum()), &[x], 1e-5, Some(OpKind::Sigmoid)).unwrap();
        assert!(report.max_rel_error > 1e-1);
    }
}
