//! Central-difference gradient oracle, evaluated entirely in f64.

use crate::error::{Error, Result};

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate `i`.
pub fn finite_difference_gradient<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Contract(format!("finite difference step {h} must be > 0")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Norm-wise relative error `‖a − b‖ / max(‖b‖, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(floor)
}
