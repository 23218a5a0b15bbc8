//! Zero-mean Gaussian-process draws with a squared-exponential covariance.

use log::debug;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{LocaError, Result};
use crate::numerics::Matrix;

/// Retries with ten times the jitter before giving up.
const MAX_JITTER_ATTEMPTS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpSpec {
    pub length_scale: f64,
    pub amplitude: f64,
    /// Diagonal regularizer relative to `amplitude`.
    pub jitter: f64,
}

impl GpSpec {
    pub fn new(length_scale: f64, amplitude: f64) -> Self {
        Self {
            length_scale,
            amplitude,
            jitter: 1e-10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        if ok(self.length_scale) && ok(self.amplitude) && ok(self.jitter) {
            Ok(())
        } else {
            Err(LocaError::Config(format!("invalid Gaussian-process settings {self:?}")))
        }
    }

    /// `o exp(-|x - x'|² / (2 l²))`.
    pub fn covariance(&self, a: &[f64], b: &[f64]) -> f64 {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        self.amplitude * (-d2 / (2.0 * self.length_scale * self.length_scale)).exp()
    }
}

/// Cached Cholesky factor of the covariance on a fixed set of points.
#[derive(Clone, Debug)]
pub struct GpSampler {
    factor: DMatrix<f64>,
    jitter_used: f64,
}

impl GpSampler {
    /// `points` holds one location per row.
    pub fn new(spec: &GpSpec, points: &Matrix) -> Result<Self> {
        spec.validate()?;
        let m = points.nrows();
        if m == 0 {
            return Err(LocaError::EmptyInput("Gaussian process on zero points".into()));
        }
        let rows: Vec<Vec<f64>> = points.rows().into_iter().map(|r| r.to_vec()).collect();
        let cov = DMatrix::from_fn(m, m, |i, j| spec.covariance(&rows[i], &rows[j]));
        let mut jitter = spec.jitter * spec.amplitude;
        for attempt in 0..MAX_JITTER_ATTEMPTS {
            let mut k = cov.clone();
            for i in 0..m {
                k[(i, i)] += jitter;
            }
            if let Some(chol) = k.cholesky() {
                if attempt > 0 {
                    debug!("covariance factorized after raising jitter to {jitter:e}");
                }
                return Ok(Self {
                    factor: chol.unpack(),
                    jitter_used: jitter,
                });
            }
            jitter *= 10.0;
        }
        Err(LocaError::Solver(format!(
            "covariance with l = {} not positive definite even with jitter {:e}",
            spec.length_scale,
            jitter / 10.0
        )))
    }

    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    pub fn points(&self) -> usize {
        self.factor.nrows()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z = DVector::from_fn(self.points(), |_, _| rng.sample::<f64, _>(StandardNormal));
        (&self.factor * z).iter().copied().collect()
    }
}

/// One draw on `points`; factorizes the covariance every call.
pub fn gp_sample<R: Rng + ?Sized>(spec: &GpSpec, points: &Matrix, rng: &mut R) -> Result<Vec<f64>> {
    Ok(GpSampler::new(spec, points)?.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;
    use ndarray::Array2;
    use rand::SeedableRng;

    fn line(m: usize) -> Matrix {
        Array2::from_shape_fn((m, 1), |(i, _)| i as f64 / (m - 1) as f64)
    }

    #[test]
    fn pointwise_variance_matches_amplitude() {
        let spec = GpSpec::new(0.2, 2.5);
        let sampler = GpSampler::new(&spec, &line(40)).unwrap();
        let mut rng = SeededRng::seed_from_u64(1);
        let draws: Vec<f64> = (0..10_000).map(|_| sampler.sample(&mut rng)[17]).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        assert!((var - 2.5).abs() <= 0.05 * 2.5, "{var}");
    }

    #[test]
    fn very_long_length_scale_gives_flat_draws() {
        let spec = GpSpec::new(1e6, 4.0);
        let mut rng = SeededRng::seed_from_u64(2);
        let draw = gp_sample(&spec, &line(100), &mut rng).unwrap();
        let (lo, hi) = draw.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        assert!(hi - lo < 1e-2 * 2.0);
    }

    #[test]
    fn seeded_draws_repeat() {
        let spec = GpSpec::new(0.1, 1.0);
        let sampler = GpSampler::new(&spec, &line(500)).unwrap();
        let a = sampler.sample(&mut SeededRng::seed_from_u64(7));
        let b = sampler.sample(&mut SeededRng::seed_from_u64(7));
        let c = sampler.sample(&mut SeededRng::seed_from_u64(8));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(GpSampler::new(&GpSpec::new(0.0, 1.0), &line(5)).is_err());
        assert!(GpSampler::new(&GpSpec::new(1.0, -1.0), &line(5)).is_err());
    }
}
