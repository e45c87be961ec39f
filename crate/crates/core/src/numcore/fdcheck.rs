use super::Scalar;
use crate::error::{Error, Result};

/// Outcome of a central-difference gradient comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport<T> {
    /// max over checked coordinates of |analytic − numeric| / max(1, |analytic|)
    pub max_rel_error: T,
    pub worst_index: usize,
    pub analytic_at_worst: T,
    pub numeric_at_worst: T,
    pub checked: usize,
}

/// Compares `analytic` with central differences of `loss` at `params`.
///
/// `coords` restricts the comparison to a subset of coordinates; `None` checks
/// every coordinate.
pub fn finite_diff_check<T, F>(
    mut loss: F,
    params: &[T],
    analytic: &[T],
    h: T,
    coords: Option<&[usize]>,
) -> Result<FdReport<T>>
where
    T: Scalar,
    F: FnMut(&[T]) -> Result<T>,
{
    if !(h > T::zero()) {
        return Err(Error::InvalidArgument(format!("step h must be positive, got {h}")));
    }
    if analytic.len() != params.len() {
        return Err(Error::Dimension(format!(
            "{} analytic gradients for {} params",
            analytic.len(),
            params.len()
        )));
    }
    if let Some(index) = params.iter().position(|p| !p.is_finite()) {
        return Err(Error::InvalidArgument(format!("parameter {index} is not finite")));
    }
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..params.len()).collect();
            &all
        }
    };
    let mut x = params.to_vec();
    let two_h = h + h;
    let mut report = FdReport {
        max_rel_error: T::zero(),
        worst_index: coords.first().copied().unwrap_or(0),
        analytic_at_worst: T::zero(),
        numeric_at_worst: T::zero(),
        checked: 0,
    };
    for &i in coords {
        let orig = x[i];
        x[i] = orig + h;
        let fp = loss(&x)?;
        if !fp.is_finite() {
            return Err(Error::NonFiniteLoss { index: i, sign: '+' });
        }
        x[i] = orig - h;
        let fm = loss(&x)?;
        if !fm.is_finite() {
            return Err(Error::NonFiniteLoss { index: i, sign: '-' });
        }
        x[i] = orig;
        let numeric = (fp - fm) / two_h;
        let a = analytic[i];
        let err = (a - numeric).abs() / T::one().max(a.abs());
        if err > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic_at_worst = a;
            report.numeric_at_worst = numeric;
        }
        report.checked += 1;
    }
    Ok(report)
}
