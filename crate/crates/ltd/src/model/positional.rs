//! Fixed 2-D sinusoidal positional encoding over the patch grid.
//!
//! The first half of the channels encodes the row index, the second half the
//! column index, each as interleaved sine/cosine at geometrically spaced
//! wavelengths.

use super::ModelError;

const TEMPERATURE: f64 = 10_000.0;

/// Encoding for a `grid_h x grid_w` grid, flattened row-major to
/// `[grid_h * grid_w, d_model]`. Requires `d_model % 4 == 0`.
pub fn positional_encoding(
    grid_h: usize,
    grid_w: usize,
    d_model: usize,
) -> Result<Vec<f64>, ModelError> {
    if d_model % 4 != 0 {
        return Err(ModelError::InvalidConfig(format!(
            "d_model {d_model} must be divisible by 4 for 2-D sinusoidal encoding"
        )));
    }
    let half = d_model / 2;
    let pairs = half / 2;
    let mut out = vec![0.0; grid_h * grid_w * d_model];
    for row in 0..grid_h {
        for col in 0..grid_w {
            let base = (row * grid_w + col) * d_model;
            for i in 0..pairs {
                let freq = TEMPERATURE.powf(2.0 * i as f64 / half as f64);
                let r = row as f64 / freq;
                let c = col as f64 / freq;
                out[base + 2 * i] = r.sin();
                out[base + 2 * i + 1] = r.cos();
                out[base + half + 2 * i] = c.sin();
                out[base + half + 2 * i + 1] = c.cos();
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_stay_in_unit_range() {
        let pe = positional_encoding(5, 7, 16).unwrap();
        assert!(pe.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn origin_is_sin_zero_cos_one_in_both_halves() {
        let d = 12;
        let pe = positional_encoding(3, 3, d).unwrap();
        let origin = &pe[..d];
        for i in 0..d / 4 {
            assert_eq!(origin[2 * i], 0.0);
            assert_eq!(origin[2 * i + 1], 1.0);
            assert_eq!(origin[d / 2 + 2 * i], 0.0);
            assert_eq!(origin[d / 2 + 2 * i + 1], 1.0);
        }
    }

    #[test]
    fn same_row_shares_row_half() {
        let (h, w, d) = (4, 6, 16);
        let pe = positional_encoding(h, w, d).unwrap();
        let row = 2;
        let a = &pe[(row * w) * d..(row * w) * d + d / 2];
        let b = &pe[(row * w + 3) * d..(row * w + 3) * d + d / 2];
        assert_eq!(a, b);
    }

    #[test]
    fn same_column_shares_column_half() {
        let (h, w, d) = (4, 6, 16);
        let pe = positional_encoding(h, w, d).unwrap();
        let col = 1;
        let a = &pe[col * d + d / 2..(col + 1) * d];
        let b = &pe[(2 * w + col) * d + d / 2..(2 * w + col) * d + d];
        assert_eq!(a, b);
    }

    #[test]
    fn indivisible_d_model_is_rejected() {
        assert!(positional_encoding(2, 2, 10).is_err());
    }
}
