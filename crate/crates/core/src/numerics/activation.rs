//! Scalar activations and the column-wise softmax.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{LocaError, Result};

use super::tape::{softmax_strided, Matrix};

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Exact GELU, `x Φ(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// `Φ(x) + x φ(x)`.
pub fn gelu_derivative(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

/// Elementwise GELU with a finiteness check on the input.
pub fn gelu(x: &Matrix) -> Result<Matrix> {
    if !x.iter().all(|v| v.is_finite()) {
        return Err(LocaError::NumericDomain("gelu input".into()));
    }
    Ok(x.mapv(gelu_scalar))
}

/// Maps each column of an `n x d_s` score matrix onto the probability simplex.
pub fn softmax_columns(scores: &Matrix) -> Result<Matrix> {
    let (n, channels) = scores.dim();
    if n == 0 {
        return Err(LocaError::EmptyInput("softmax over zero rows".into()));
    }
    if !scores.iter().all(|v| v.is_finite()) {
        return Err(LocaError::NumericDomain("softmax input".into()));
    }
    let mut flat: Vec<f64> = scores.iter().copied().collect();
    if channels > 0 {
        softmax_strided(&mut flat, channels);
    }
    Ok(Matrix::from_shape_vec((n, channels), flat).expect("shape preserved"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    /// Maclaurin series erf(x) = 2/√π Σ (-1)^k x^(2k+1) / (k! (2k+1)).
    fn erf_series(x: f64) -> f64 {
        let mut term = x;
        let mut total = x;
        for k in 1..60 {
            term *= -x * x / k as f64;
            total += term / (2 * k + 1) as f64;
        }
        total * 2.0 / std::f64::consts::PI.sqrt()
    }

    #[test]
    fn gelu_reference_values() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!(gelu_scalar(-10.0).abs() < 1e-10);
        // x Φ(x) at 1 with Φ from an independent erf implementation
        let oracle = 0.5 * (1.0 + erf_series(1.0 / 2f64.sqrt()));
        assert!((gelu_scalar(1.0) - oracle).abs() < 1e-14);
        assert!((gelu_scalar(1.0) - 0.841_344_746_068_543).abs() < 1e-12);
    }

    #[test]
    fn gelu_rejects_non_finite() {
        assert!(gelu(&array![[f64::INFINITY]]).is_err());
    }

    #[test]
    fn softmax_reference_columns() {
        let s = softmax_columns(&array![[0.0], [0.0], [0.0]]).unwrap();
        for v in s.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax_columns(&array![[1f64.ln()], [2f64.ln()], [3f64.ln()]]).unwrap();
        for (i, v) in s.iter().enumerate() {
            assert!((v - (i + 1) as f64 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_of_empty_input_fails() {
        let e = Array2::<f64>::zeros((0, 2));
        assert!(matches!(softmax_columns(&e), Err(LocaError::EmptyInput(_))));
    }

    proptest! {
        #[test]
        fn softmax_columns_are_probability_vectors(
            vals in proptest::collection::vec(-50.0f64..50.0, 12),
            shift in -100.0f64..100.0,
        ) {
            let x = Array2::from_shape_vec((4, 3), vals).unwrap();
            let s = softmax_columns(&x).unwrap();
            for col in s.columns() {
                prop_assert!(col.iter().all(|&v| (0.0..=1.0).contains(&v)));
                prop_assert!((col.sum() - 1.0).abs() <= 1e-12);
            }
            let shifted = softmax_columns(&(&x + shift)).unwrap();
            for (a, b) in s.iter().zip(shifted.iter()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
