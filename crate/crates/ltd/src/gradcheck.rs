//! Central finite differences for verifying tape gradients.
//!
//! Only evaluates the forward function, never the tape's backward rules, so
//! it stays an independent check of them.

/// d f / d x_i ≈ (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate.
pub fn finite_difference<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let original = probe[i];
        probe[i] = original + h;
        let plus = f(&probe);
        probe[i] = original - h;
        let minus = f(&probe);
        probe[i] = original;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Like [`finite_difference`] but only for the listed coordinates.
pub fn finite_difference_at<F>(mut f: F, x: &[f64], coords: &[usize], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(coords.len());
    for &i in coords {
        let original = probe[i];
        probe[i] = original + h;
        let plus = f(&probe);
        probe[i] = original - h;
        let minus = f(&probe);
        probe[i] = original;
        grad.push((plus - minus) / (2.0 * h));
    }
    grad
}

/// Worst-case |a - b| / max(1, |a|, |b|) over paired entries.
pub fn max_scaled_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / 1.0_f64.max(x.abs()).max(y.abs()))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_derivative() {
        let g = finite_difference(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, 5.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn subset_matches_full() {
        let f = |x: &[f64]| x.iter().map(|v| v.sin()).sum();
        let full = finite_difference(f, &[0.3, 0.7, -0.2], 1e-5);
        let some = finite_difference_at(f, &[0.3, 0.7, -0.2], &[2, 0], 1e-5);
        assert!((some[0] - full[2]).abs() < 1e-12);
        assert!((some[1] - full[0]).abs() < 1e-12);
    }
}
