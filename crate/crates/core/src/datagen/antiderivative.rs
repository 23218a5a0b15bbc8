//! The antiderivative operator `s(x) = ∫_0^x u(τ) dτ` on `[0, 1]`.

use crate::error::{LocaError, Result};

/// Cumulative composite trapezoid rule on a uniform grid over `[0, 1]`
/// (endpoints included), with `s(0) = 0`.
pub fn antiderivative_solve(u: &[f64]) -> Result<Vec<f64>> {
    if u.len() < 2 {
        return Err(LocaError::Config(format!(
            "antiderivative needs at least two grid points, got {}",
            u.len()
        )));
    }
    let h = 1.0 / (u.len() - 1) as f64;
    let mut s = Vec::with_capacity(u.len());
    let mut acc = 0.0;
    s.push(0.0);
    for w in u.windows(2) {
        acc += 0.5 * h * (w[0] + w[1]);
        s.push(acc);
    }
    Ok(s)
}

/// Piecewise-linear interpolation of samples on a uniform `[0, 1]` grid.
pub fn interpolate_uniform(values: &[f64], at: f64) -> f64 {
    let n = values.len();
    let t = (at.clamp(0.0, 1.0) * (n - 1) as f64).min((n - 1) as f64);
    let lo = (t.floor() as usize).min(n - 2);
    let frac = t - lo as f64;
    values[lo] * (1.0 - frac) + values[lo + 1] * frac
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn grid(m: usize) -> Vec<f64> {
        (0..m).map(|i| i as f64 / (m - 1) as f64).collect()
    }

    #[test]
    fn constants_and_linears_are_exact() {
        let x = grid(37);
        let s = antiderivative_solve(&vec![2.5; 37]).unwrap();
        for (xi, si) in x.iter().zip(&s) {
            assert!((si - 2.5 * xi).abs() < 1e-14);
        }
        let s = antiderivative_solve(&x.iter().map(|v| 3.0 * v).collect::<Vec<_>>()).unwrap();
        for (xi, si) in x.iter().zip(&s) {
            // trapezoid on a linear integrand is exact
            assert!((si - 1.5 * xi * xi).abs() < 1e-14);
        }
    }

    #[test]
    fn cosine_integrates_to_sine() {
        let x = grid(500);
        let u: Vec<f64> = x.iter().map(|v| (2.0 * PI * v).cos()).collect();
        let s = antiderivative_solve(&u).unwrap();
        for (xi, si) in x.iter().zip(&s) {
            assert!((si - (2.0 * PI * xi).sin() / (2.0 * PI)).abs() < 1e-4);
        }
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(antiderivative_solve(&[1.0]), Err(LocaError::Config(_))));
    }

    #[test]
    fn interpolation_hits_nodes() {
        let v = [0.0, 1.0, 4.0, 9.0];
        assert_eq!(interpolate_uniform(&v, 1.0 / 3.0), 1.0);
        assert_eq!(interpolate_uniform(&v, 1.0), 9.0);
        assert!((interpolate_uniform(&v, 0.5) - 2.5).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn scaling_commutes(vals in proptest::collection::vec(-5.0f64..5.0, 2..60), a in -4.0f64..4.0) {
            let s = antiderivative_solve(&vals).unwrap();
            let scaled: Vec<f64> = vals.iter().map(|v| a * v).collect();
            let s2 = antiderivative_solve(&scaled).unwrap();
            for (x, y) in s.iter().zip(&s2) {
                prop_assert!((a * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
    }
}
