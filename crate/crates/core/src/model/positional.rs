use std::f64::consts::TAU;

use crate::scalar::Scalar;
use crate::tensor::{Result, Tensor, TensorError};

const TEMPERATURE: f64 = 10_000.0;

/// Sine/cosine features of one normalized coordinate in `(0, 1]` over `half` channels.
fn axis_features(u: f64, half: usize, out: &mut Vec<f64>) {
    let angle = u * TAU;
    for j in 0..half {
        let freq = TEMPERATURE.powf((2 * (j / 2)) as f64 / half as f64);
        let v = angle / freq;
        out.push(if j % 2 == 0 { v.sin() } else { v.cos() });
    }
}

/// Fixed 2-D sine encoding of an `h×w` grid as `[h·w × d]`, rows in raster order.
///
/// The first `d/2` channels encode the row coordinate, the last `d/2` the
/// column coordinate; each coordinate is normalized to `(0, 2π]`.
pub fn positional_encoding<T: Scalar>(h: usize, w: usize, d: usize) -> Result<Tensor<T>> {
    if d == 0 || !d.is_multiple_of(4) {
        return Err(TensorError::Invalid(format!("positional encoding dimension {d} must be divisible by 4")));
    }
    if h == 0 || w == 0 {
        return Err(TensorError::ZeroExtent(vec![h, w]));
    }
    let half = d / 2;
    let mut data = Vec::with_capacity(h * w * d);
    let mut row = Vec::with_capacity(d);
    for i in 0..h {
        for j in 0..w {
            row.clear();
            axis_features((i + 1) as f64 / h as f64, half, &mut row);
            axis_features((j + 1) as f64 / w as f64, half, &mut row);
            data.extend(row.iter().map(|&v| T::lit(v)));
        }
    }
    Tensor::new(vec![h * w, d], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_bounded() {
        let a = positional_encoding::<f64>(6, 5, 16).unwrap();
        let b = positional_encoding::<f64>(6, 5, 16).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn rejects_bad_dimension() {
        assert!(positional_encoding::<f64>(2, 2, 6).is_err());
    }

    #[test]
    fn distinct_positions() {
        for &(h, w) in &[(1, 1), (8, 8), (12, 8), (64, 64)] {
            let pe = positional_encoding::<f64>(h, w, 8).unwrap();
            let mut rows: Vec<Vec<u64>> = (0..h * w).map(|r| pe.row(r).iter().map(|v| v.to_bits()).collect()).collect();
            rows.sort();
            rows.dedup();
            assert_eq!(rows.len(), h * w, "{h}x{w}");
        }
    }
}
