//! Darcy flow `∇·(u ∇s) = f` on the unit square.
//!
//! Cell-centred finite volumes on an `n x n` grid. Cell `(i, j)` has centre
//! `((i + ½) h, (j + ½) h)` and flat index `i * n + j`, so `i` runs along
//! `x1` and `j` along `x2`. Faces between cells use the harmonic mean of the
//! two permeabilities. The left and right edges (`x1 = 0, 1`) carry
//! `s = 0`; the bottom and top edges (`x2 = 0, 1`) carry a prescribed
//! outward flux `u ∂s/∂n = g(x1)`.
//!
//! The permeability is `exp(u0)` with `u0` a Gaussian field whose
//! covariance operator is `7^{3/2} (-Δ + 49)^{-3/2}` with Neumann boundary
//! conditions, drawn through its cosine eigen-expansion.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{LocaError, Result};
use crate::numerics::Matrix;

/// Relative residual every accepted solve must reach.
pub const RESIDUAL_TOLERANCE: f64 = 1e-10;

/// Default source term `5 exp(-|x - (½, ½)|²)`.
pub fn default_forcing(x1: f64, x2: f64) -> f64 {
    5.0 * (-((x1 - 0.5).powi(2) + (x2 - 0.5).powi(2))).exp()
}

/// Default boundary flux `sin(5 x1)` on the Neumann edges.
pub fn default_flux(x1: f64) -> f64 {
    (5.0 * x1).sin()
}

/// Cell centres in flat-index order as an `n² x 2` matrix.
pub fn cell_centers(n: usize) -> Matrix {
    let h = 1.0 / n as f64;
    Array2::from_shape_fn((n * n, 2), |(idx, axis)| {
        let k = if axis == 0 { idx / n } else { idx % n };
        (k as f64 + 0.5) * h
    })
}

/// Symmetric positive-definite band matrix stored by lower diagonals:
/// `band[r * (w + 1) + k] = A[r, r - k]`.
#[derive(Clone, Debug)]
pub struct BandedSpd {
    size: usize,
    width: usize,
    band: Vec<f64>,
}

impl BandedSpd {
    pub fn zeros(size: usize, width: usize) -> Self {
        Self {
            size,
            width,
            band: vec![0.0; size * (width + 1)],
        }
    }

    fn slot(&self, r: usize, c: usize) -> usize {
        debug_assert!(c <= r && r - c <= self.width);
        r * (self.width + 1) + (r - c)
    }

    /// Adds `v` to `A[r, c]` (and implicitly `A[c, r]`).
    pub fn add(&mut self, r: usize, c: usize, v: f64) {
        let (r, c) = if r >= c { (r, c) } else { (c, r) };
        let s = self.slot(r, c);
        self.band[s] += v;
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (r, c) = if r >= c { (r, c) } else { (c, r) };
        if r - c > self.width {
            0.0
        } else {
            self.band[self.slot(r, c)]
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.size];
        for r in 0..self.size {
            let lo = r.saturating_sub(self.width);
            for c in lo..r {
                let a = self.band[self.slot(r, c)];
                y[r] += a * x[c];
                y[c] += a * x[r];
            }
            y[r] += self.band[self.slot(r, r)] * x[r];
        }
        y
    }

    /// Band Cholesky factorization `A = L Lᵀ`, returning `L` in the same
    /// storage.
    pub fn cholesky(&self) -> Result<BandedSpd> {
        let mut l = self.clone();
        for r in 0..self.size {
            let lo = r.saturating_sub(self.width);
            for c in lo..=r {
                let mut sum = l.band[l.slot(r, c)];
                for p in lo.max(c.saturating_sub(self.width))..c {
                    sum -= l.band[l.slot(r, p)] * l.band[l.slot(c, p)];
                }
                if c == r {
                    if !(sum > 0.0) || !sum.is_finite() {
                        return Err(LocaError::Solver(format!(
                            "matrix not positive definite at row {r} (pivot {sum:e})"
                        )));
                    }
                    let s = l.slot(r, r);
                    l.band[s] = sum.sqrt();
                } else {
                    let s = l.slot(r, c);
                    l.band[s] = sum / l.band[l.slot(c, c)];
                }
            }
        }
        Ok(l)
    }

    /// Solves `L Lᵀ x = b` where `self` is a factor from [`cholesky`](Self::cholesky).
    pub fn solve_factored(&self, b: &[f64]) -> Vec<f64> {
        let n = self.size;
        let mut y = b.to_vec();
        for r in 0..n {
            let lo = r.saturating_sub(self.width);
            for c in lo..r {
                y[r] -= self.band[self.slot(r, c)] * y[c];
            }
            y[r] /= self.band[self.slot(r, r)];
        }
        for r in (0..n).rev() {
            let hi = (r + self.width).min(n - 1);
            for c in r + 1..=hi {
                y[r] -= self.band[self.slot(c, r)] * y[c];
            }
            y[r] /= self.band[self.slot(r, r)];
        }
        y
    }
}

/// The discrete operator `A` with `A s = b` equivalent to the flux balance
/// of every cell, plus the boundary data needed for the right-hand side.
#[derive(Clone, Debug)]
pub struct DarcySystem {
    pub n: usize,
    pub matrix: BandedSpd,
}

impl DarcySystem {
    /// Assembles `A` for a permeability given per cell in flat-index order.
    pub fn assemble(perm: &[f64], n: usize) -> Result<Self> {
        if n == 0 || perm.len() != n * n {
            return Err(LocaError::shape(
                "darcy",
                format!("{} permeability values for a {n}x{n} grid", perm.len()),
            ));
        }
        if let Some(bad) = perm.iter().find(|k| !(**k > 0.0 && k.is_finite())) {
            return Err(LocaError::Data(format!("non-positive permeability {bad}")));
        }
        let mut a = BandedSpd::zeros(n * n, n);
        let harmonic = |a: f64, b: f64| 2.0 * a * b / (a + b);
        for i in 0..n {
            for j in 0..n {
                let p = i * n + j;
                if i + 1 < n {
                    let q = p + n;
                    let t = harmonic(perm[p], perm[q]);
                    a.add(p, p, t);
                    a.add(q, q, t);
                    a.add(q, p, -t);
                }
                if j + 1 < n {
                    let q = p + 1;
                    let t = harmonic(perm[p], perm[q]);
                    a.add(p, p, t);
                    a.add(q, q, t);
                    a.add(q, p, -t);
                }
                // Dirichlet faces sit half a cell away from the centre
                if i == 0 || i == n - 1 {
                    a.add(p, p, 2.0 * perm[p]);
                }
            }
        }
        Ok(Self { n, matrix: a })
    }

    /// `b = Σ_N g h - f h²` per cell.
    pub fn rhs(&self, forcing: &dyn Fn(f64, f64) -> f64, flux: &dyn Fn(f64) -> f64) -> Vec<f64> {
        let n = self.n;
        let h = 1.0 / n as f64;
        let mut b = vec![0.0; n * n];
        for i in 0..n {
            let x1 = (i as f64 + 0.5) * h;
            for j in 0..n {
                let x2 = (j as f64 + 0.5) * h;
                let p = i * n + j;
                b[p] = -forcing(x1, x2) * h * h;
                if j == 0 || j == n - 1 {
                    b[p] += flux(x1) * h;
                }
            }
        }
        b
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let factor = self.matrix.cholesky()?;
        let s = factor.solve_factored(b);
        let r = relative_residual(&self.matrix, &s, b);
        if !(r <= RESIDUAL_TOLERANCE) {
            return Err(LocaError::Solver(format!("relative residual {r:e} after direct solve")));
        }
        Ok(s)
    }
}

/// `|A s - b| / |b|`, or `|A s|` when `b = 0`.
pub fn relative_residual(a: &BandedSpd, s: &[f64], b: &[f64]) -> f64 {
    let r: f64 = a
        .apply(s)
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nb > 0.0 {
        r / nb
    } else {
        r
    }
}

/// Pressure for the default forcing and boundary flux.
pub fn darcy_solve(perm: &[f64], n: usize) -> Result<Vec<f64>> {
    darcy_solve_with(perm, n, &default_forcing, &default_flux)
}

pub fn darcy_solve_with(
    perm: &[f64],
    n: usize,
    forcing: &dyn Fn(f64, f64) -> f64,
    flux: &dyn Fn(f64) -> f64,
) -> Result<Vec<f64>> {
    let system = DarcySystem::assemble(perm, n)?;
    let b = system.rhs(forcing, flux);
    system.solve(&b)
}

/// Truncated cosine expansion of the log-permeability field.
#[derive(Clone, Debug)]
pub struct PermeabilityField {
    n: usize,
    /// Largest wavenumber per axis that survives truncation.
    kmax: usize,
    /// `sqrt(λ_k)` on the `(kmax + 1)²` wavenumber grid, zero where truncated.
    std_dev: Matrix,
    /// `basis[[i, k]] = c_k cos(π k x_i)` at cell centres.
    basis: Matrix,
}

impl PermeabilityField {
    pub const DEFAULT_TRUNCATION: f64 = 1e-8;

    /// Eigenvalue of the covariance operator for wavenumber `(k1, k2)`.
    pub fn eigenvalue(k1: usize, k2: usize) -> f64 {
        let k2sum = (k1 * k1 + k2 * k2) as f64;
        7f64.powf(1.5) * (PI * PI * k2sum + 49.0).powf(-1.5)
    }

    /// Keeps every mode with eigenvalue at least `truncation` times the
    /// largest one.
    pub fn new(n: usize, truncation: f64) -> Result<Self> {
        if n == 0 || !(truncation > 0.0 && truncation < 1.0) {
            return Err(LocaError::Config(format!(
                "permeability field needs n > 0 and truncation in (0, 1), got {n}, {truncation}"
            )));
        }
        let lmax = Self::eigenvalue(0, 0);
        // λ >= t λmax  <=>  π²|k|² + 49 <= 49 t^{-2/3}
        let k2_limit = 49.0 * (truncation.powf(-2.0 / 3.0) - 1.0) / (PI * PI);
        let kmax = k2_limit.sqrt().floor() as usize;
        let std_dev = Array2::from_shape_fn((kmax + 1, kmax + 1), |(k1, k2)| {
            let lam = Self::eigenvalue(k1, k2);
            if lam >= truncation * lmax {
                lam.sqrt()
            } else {
                0.0
            }
        });
        let h = 1.0 / n as f64;
        let basis = Array2::from_shape_fn((n, kmax + 1), |(i, k)| {
            let c = if k == 0 { 1.0 } else { 2f64.sqrt() };
            c * (PI * k as f64 * (i as f64 + 0.5) * h).cos()
        });
        Ok(Self {
            n,
            kmax,
            std_dev,
            basis,
        })
    }

    pub fn kmax(&self) -> usize {
        self.kmax
    }

    pub fn mode_count(&self) -> usize {
        self.std_dev.iter().filter(|s| **s > 0.0).count()
    }

    /// Random expansion coefficients `sqrt(λ_k) ξ_k` on the wavenumber grid.
    pub fn draw_coefficients<R: Rng + ?Sized>(&self, rng: &mut R) -> Matrix {
        self.std_dev.mapv(|s| {
            if s > 0.0 {
                s * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            }
        })
    }

    /// `u0` at cell centres (flat-index order) for given coefficients.
    pub fn evaluate(&self, coefficients: &Matrix) -> Vec<f64> {
        let field = self.basis.dot(coefficients).dot(&self.basis.t());
        debug_assert_eq!(field.dim(), (self.n, self.n));
        field.iter().copied().collect()
    }

    /// One permeability sample `exp(u0)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.evaluate(&self.draw_coefficients(rng))
            .into_iter()
            .map(f64::exp)
            .collect()
    }
}

/// Convenience wrapper with the default truncation.
pub fn darcy_permeability_sample<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Vec<f64>> {
    Ok(PermeabilityField::new(n, PermeabilityField::DEFAULT_TRUNCATION)?.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;
    use rand::SeedableRng;

    #[test]
    fn homogeneous_problem_has_zero_solution() {
        let s = darcy_solve_with(&vec![1.0; 64], 8, &|_, _| 0.0, &|_| 0.0).unwrap();
        assert!(s.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn manufactured_discrete_solution_is_recovered() {
        let mut rng = SeededRng::seed_from_u64(3);
        let n = 32;
        let field = PermeabilityField::new(n, 1e-4).unwrap();
        let perm = field.sample(&mut rng);
        let system = DarcySystem::assemble(&perm, n).unwrap();
        let centers = cell_centers(n);
        let exact: Vec<f64> = centers
            .rows()
            .into_iter()
            .map(|x| (PI * x[0]).sin() * (1.0 + x[1] * x[1]))
            .collect();
        let b = system.matrix.apply(&exact);
        let s = system.solve(&b).unwrap();
        let err = s.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10, "{err}");
        assert!(relative_residual(&system.matrix, &s, &b) <= RESIDUAL_TOLERANCE);
    }

    #[test]
    fn converges_to_a_continuous_solution() {
        // u = 1, s = sin(π x1): Δs = -π² sin(π x1), zero flux on x2 edges
        let mut last = f64::INFINITY;
        for n in [8, 16, 32] {
            let s = darcy_solve_with(&vec![1.0; n * n], n, &|x1, _| -PI * PI * (PI * x1).sin(), &|_| 0.0).unwrap();
            let centers = cell_centers(n);
            let err = s
                .iter()
                .zip(centers.rows())
                .map(|(v, x)| (v - (PI * x[0]).sin()).abs())
                .fold(0.0, f64::max);
            assert!(err < last / 3.0, "n = {n}: {err}");
            last = err;
        }
        assert!(last < 2e-3);
    }

    #[test]
    fn default_problem_satisfies_residual_contract() {
        let mut rng = SeededRng::seed_from_u64(5);
        let perm = darcy_permeability_sample(32, &mut rng).unwrap();
        let system = DarcySystem::assemble(&perm, 32).unwrap();
        let b = system.rhs(&default_forcing, &default_flux);
        let s = system.solve(&b).unwrap();
        assert!(relative_residual(&system.matrix, &s, &b) <= RESIDUAL_TOLERANCE);
        assert!(s.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_non_positive_permeability() {
        let mut perm = vec![1.0; 16];
        perm[5] = 0.0;
        assert!(matches!(darcy_solve(&perm, 4), Err(LocaError::Data(_))));
    }

    #[test]
    fn band_cholesky_matches_dense_solve() {
        let mut a = BandedSpd::zeros(6, 2);
        for r in 0..6 {
            a.add(r, r, 4.0 + r as f64);
            if r >= 1 {
                a.add(r, r - 1, -1.0);
            }
            if r >= 2 {
                a.add(r, r - 2, 0.5);
            }
        }
        let x: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
        let b = a.apply(&x);
        let dense = nalgebra::DMatrix::from_fn(6, 6, |r, c| a.get(r, c));
        let xd = dense.cholesky().unwrap().solve(&nalgebra::DVector::from_vec(b.clone()));
        let xs = a.cholesky().unwrap().solve_factored(&b);
        for i in 0..6 {
            assert!((xs[i] - x[i]).abs() < 1e-13 && (xd[i] - x[i]).abs() < 1e-13);
        }
    }

    #[test]
    fn permeability_is_positive_and_reproducible() {
        let field = PermeabilityField::new(32, PermeabilityField::DEFAULT_TRUNCATION).unwrap();
        assert!(field.kmax() > 1000);
        let mut rng = SeededRng::seed_from_u64(11);
        for _ in 0..20 {
            assert!(field.sample(&mut rng).iter().all(|v| *v > 0.0));
        }
        let a = field.sample(&mut SeededRng::seed_from_u64(1));
        let b = field.sample(&mut SeededRng::seed_from_u64(1));
        assert_eq!(a, b);
    }

    #[test]
    fn mode_variances_follow_the_spectrum() {
        // project fields back onto low cosine modes with the discrete
        // orthogonality of the cell-centre basis
        let n = 32;
        let field = PermeabilityField::new(n, 1e-4).unwrap();
        let mut rng = SeededRng::seed_from_u64(13);
        let modes = [(0usize, 0usize), (1, 0), (0, 2), (3, 1), (2, 2)];
        let mut sums = vec![0.0; modes.len()];
        let draws = 10_000;
        for _ in 0..draws {
            let u0 = field.evaluate(&field.draw_coefficients(&mut rng));
            for (m, &(k1, k2)) in modes.iter().enumerate() {
                let mut proj = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        proj += u0[i * n + j] * field.basis[[i, k1]] * field.basis[[j, k2]];
                    }
                }
                proj /= (n * n) as f64;
                sums[m] += proj * proj;
            }
        }
        for (m, &(k1, k2)) in modes.iter().enumerate() {
            let var = sums[m] / draws as f64;
            let lam = PermeabilityField::eigenvalue(k1, k2);
            assert!((var - lam).abs() <= 0.05 * lam, "mode {k1},{k2}: {var} vs {lam}");
        }
    }
}
