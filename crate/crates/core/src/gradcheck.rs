//! Central-difference gradient checking.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Outcome of a coordinate-wise comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck<T> {
    pub max_rel_error: T,
    /// (tensor index, flat coordinate) of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: T,
    pub numeric: T,
}

/// Compares the reverse-mode gradient of `f` against `(f(p+h) - f(p-h)) / 2h`
/// for every coordinate of `params`.
///
/// `f` returns the loss and its gradient (one tensor per parameter). The
/// relative error uses `max(|analytic|, |numeric|, 1e-8)` as denominator.
pub fn finite_diff_check<T, F>(mut f: F, params: &[Tensor<T>], h: T) -> Result<GradCheck<T>>
where
    T: Scalar,
    F: FnMut(&[Tensor<T>]) -> Result<(T, Vec<Tensor<T>>)>,
{
    let (_, analytic) = f(params)?;
    let mut work = params.to_vec();
    let floor = T::of(1e-8);
    let two_h = h + h;
    let mut report = GradCheck {
        max_rel_error: T::zero(),
        worst: (0, 0),
        analytic: T::zero(),
        numeric: T::zero(),
    };
    for ti in 0..work.len() {
        for j in 0..work[ti].len() {
            let orig = work[ti].data()[j];
            work[ti].data_mut()[j] = orig + h;
            let (plus, _) = f(&work)?;
            work[ti].data_mut()[j] = orig - h;
            let (minus, _) = f(&work)?;
            work[ti].data_mut()[j] = orig;
            let numeric = (plus - minus) / two_h;
            let a = analytic[ti].data()[j];
            let denom = a.abs().max(numeric.abs()).max(floor);
            let rel = (a - numeric).abs() / denom;
            if rel > report.max_rel_error || rel.is_nan() {
                report = GradCheck {
                    max_rel_error: rel,
                    worst: (ti, j),
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}
