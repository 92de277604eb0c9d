//! Central finite-difference oracle for the tape.

use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Discrepancies smaller than this count as agreement.
pub const ABS_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// `(param, coordinate, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

fn eval_replay<F>(f: &F, params: &[Tensor], log: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::inference();
    g.set_replay(log.to_vec());
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let d = (analytic - numeric).abs();
    if d <= ABS_FLOOR {
        0.0
    } else {
        d / analytic.abs().max(numeric.abs())
    }
}

/// Compares reverse-mode gradients of the scalar function `f` against the
/// fourth-order central difference
/// `(8(f(p+h) − f(p−h)) − (f(p+2h) − f(p−2h))) / 12h` with
/// `h = eps·max(1, |p|)` on every coordinate of every parameter. Returns the
/// worst relative error.
///
/// Stop-gradient branches are frozen at their values from the unperturbed
/// evaluation, so the finite differences see the same function the tape
/// differentiates.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let coords: Vec<Vec<usize>> = params.iter().map(|p| (0..p.numel()).collect()).collect();
    Ok(finite_diff_check_coords(f, params, eps, &coords)?.max_rel_error)
}

/// Like [`finite_diff_check`] but only on the listed coordinates of each
/// parameter (`coords[i]` indexes into `params[i]`).
pub fn finite_diff_check_coords<F>(f: F, params: &[Tensor], eps: f64, coords: &[Vec<usize>]) -> Result<FdReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("finite_diff_check: eps must be positive"));
    }
    if coords.len() != params.len() {
        return Err(Error::invalid("finite_diff_check: one coordinate list per parameter"));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let base = g.value(loss).item();
    let log = g.stopgrad_log().to_vec();
    let again = eval_replay(&f, params, &log)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic { first: base, second: again });
    }

    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, list) in coords.iter().enumerate() {
        let analytic_all = g.grad(vars[pi]).cloned().unwrap_or_else(|| Tensor::zeros(params[pi].shape()));
        for &ci in list {
            let p0 = params[pi].data()[ci];
            let h = eps * p0.abs().max(1.0);
            let mut at = |k: f64| -> Result<f64> {
                work[pi].data_mut()[ci] = p0 + k * h;
                eval_replay(&f, &work, &log)
            };
            let (f1, fm1, f2, fm2) = (at(1.0)?, at(-1.0)?, at(2.0)?, at(-2.0)?);
            work[pi].data_mut()[ci] = p0;
            let numeric = (8.0 * (f1 - fm1) - (f2 - fm2)) / (12.0 * h);
            let analytic = analytic_all.data()[ci];
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((pi, ci, analytic, numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::cell::Cell;

    #[test]
    fn square_at_three() {
        let err = finite_diff_check(
            |g, p| {
                let sq = g.mul(p[0], p[0])?;
                Ok(g.sum(sq))
            },
            &[Tensor::scalar(3.0)],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let err = finite_diff_check(
            |g, _p| Ok(g.constant(Tensor::scalar(4.2))),
            &[Tensor::row_vector(&[1.0, 2.0])],
            1e-6,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn detects_nondeterminism() {
        let counter = Cell::new(0.0);
        let res = finite_diff_check(
            |g, p| {
                counter.set(counter.get() + 1.0);
                let s = g.sum(p[0]);
                Ok(g.add_scalar(s, counter.get()))
            },
            &[Tensor::scalar(1.0)],
            1e-6,
        );
        assert!(matches!(res, Err(Error::NonDeterministic { .. })));
    }

    #[test]
    fn rejects_bad_eps() {
        assert!(finite_diff_check(|g, p| Ok(g.sum(p[0])), &[Tensor::scalar(1.0)], 0.0).is_err());
    }
}
