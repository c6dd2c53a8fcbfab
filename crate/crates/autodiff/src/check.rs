//! Central finite differences, used to verify backward passes.

use crate::tape::Array;

/// Central-difference gradient of `f` at `x`, for the flat indices in
/// `probe` (all entries when `None`).
pub fn numeric_gradient(
    f: &mut dyn FnMut(&Array) -> f64,
    x: &Array,
    step: f64,
    probe: Option<&[usize]>,
) -> Vec<(usize, f64)> {
    let all: Vec<usize>;
    let indices = match probe {
        Some(p) => p,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let mut work = x.as_standard_layout().into_owned();
    indices
        .iter()
        .map(|&i| {
            let orig = work.as_slice().unwrap()[i];
            work.as_slice_mut().unwrap()[i] = orig + step;
            let plus = f(&work);
            work.as_slice_mut().unwrap()[i] = orig - step;
            let minus = f(&work);
            work.as_slice_mut().unwrap()[i] = orig;
            (i, (plus - minus) / (2.0 * step))
        })
        .collect()
}

/// Largest relative disagreement between an analytic gradient and the
/// numeric estimates. Entries whose magnitudes are both below `floor` are
/// compared in absolute terms against `floor`.
pub fn max_relative_error(analytic: &Array, numeric: &[(usize, f64)], floor: f64) -> f64 {
    let a = analytic.as_standard_layout();
    let a = a.as_slice().unwrap();
    numeric
        .iter()
        .map(|&(i, n)| {
            let scale = a[i].abs().max(n.abs()).max(floor);
            (a[i] - n).abs() / scale
        })
        .fold(0.0, f64::max)
}
