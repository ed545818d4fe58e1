//! Central finite-difference oracle for checking recorded gradients.
//!
//! Only forward evaluations are used here; nothing in this module touches the
//! backward rules it is meant to check.

/// Outcome of comparing one analytic derivative with its numeric estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mismatch {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for each requested coordinate.
pub fn central_difference(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    indices: &[usize],
    h: f64,
) -> Vec<f64> {
    let mut probe = x.to_vec();
    indices
        .iter()
        .map(|&i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative error with an absolute floor for derivatives near zero.
pub fn within_tolerance(analytic: f64, numeric: f64, rel_tol: f64, abs_tol: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff < abs_tol || diff / analytic.abs().max(numeric.abs()) < rel_tol
}

/// Every pair that fails [`within_tolerance`].
pub fn mismatches(
    indices: &[usize],
    analytic: &[f64],
    numeric: &[f64],
    rel_tol: f64,
    abs_tol: f64,
) -> Vec<Mismatch> {
    indices
        .iter()
        .zip(analytic.iter().zip(numeric))
        .filter(|(_, (&a, &n))| !within_tolerance(a, n, rel_tol, abs_tol))
        .map(|(&index, (&analytic, &numeric))| Mismatch { index, analytic, numeric })
        .collect()
}

/// Up to `max` coordinates spread evenly over `0..len`.
pub fn spread_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    (0..max).map(|i| i * (len - 1) / (max - 1).max(1)).collect()
}
