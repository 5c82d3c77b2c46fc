//! Central finite-difference gradient checking.
//!
//! Independent of the reverse pass: it re-runs the forward closure at
//! perturbed inputs and compares the slope to the analytic gradient.

use super::Arr;

/// Result of comparing one coordinate's analytic and numeric derivative.
#[derive(Debug, Clone, Copy)]
pub struct FdPoint {
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Central difference `(f(x+h) - f(x-h)) / 2h` of a scalar-valued function
/// with respect to one coordinate of `x`.
pub fn central_diff<F>(f: &mut F, x: &Arr, flat_index: usize, step: f32) -> f64
where
    F: FnMut(&Arr) -> f32,
{
    let mut xp = x.clone();
    let mut xm = x.clone();
    xp.as_slice_mut().unwrap()[flat_index] += step;
    xm.as_slice_mut().unwrap()[flat_index] -= step;
    (f(&xp) as f64 - f(&xm) as f64) / (2.0 * step as f64)
}

/// Checks `analytic_grad` against central differences at the given flat
/// coordinates. `rel_err = |a - n| / max(|a|, |n|, floor)`.
pub fn compare_at<F>(
    f: &mut F,
    x: &Arr,
    analytic_grad: &Arr,
    coords: &[usize],
    step: f32,
    floor: f64,
) -> Vec<FdPoint>
where
    F: FnMut(&Arr) -> f32,
{
    coords
        .iter()
        .map(|&i| {
            let numeric = central_diff(f, x, i, step);
            let analytic = analytic_grad.as_slice().unwrap()[i] as f64;
            let denom = analytic.abs().max(numeric.abs()).max(floor);
            FdPoint {
                analytic,
                numeric,
                rel_err: (analytic - numeric).abs() / denom,
            }
        })
        .collect()
}
