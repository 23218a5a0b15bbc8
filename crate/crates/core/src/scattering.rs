//! Wavelet scattering transform on uniform periodic 1D and 2D grids.
//!
//! Filters are Morlet wavelets defined directly in the frequency domain
//! (periodized Gaussians with the usual admissibility correction so that
//! `ψ̂(0) = 0`) and a Gaussian low-pass `φ̂` with `φ̂(0) = 1`. The wavelets
//! are rescaled by one common factor so that the Littlewood-Paley sum
//! `|φ̂|² + Σ|ψ̂_λ|²` never exceeds one, which makes every layer of the
//! cascade nonexpansive.
//!
//! Convolutions are circular. Coefficients of each path are the low-passed
//! signal sampled every `2^J` grid cells along every axis.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{LocaError, Result};

/// Centre frequency of the finest wavelet, radians per sample.
const XI_MAX: f64 = 0.35 * 2.0 * PI;
/// Bandwidth-to-centre-frequency ratio of every wavelet.
const SIGMA_RATIO: f64 = 0.4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScatteringConfig {
    /// log2 of the largest scale.
    pub j: usize,
    /// Number of orientations (2D only).
    pub l: usize,
    /// Maximum path length, 1 or 2.
    pub m0: usize,
    /// Grid extents, each a power of two.
    pub input_shape: Vec<usize>,
}

impl ScatteringConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(LocaError::Config(m));
        if self.input_shape.is_empty() || self.input_shape.len() > 2 {
            return err(format!(
                "scattering supports 1D or 2D grids, got {:?}",
                self.input_shape
            ));
        }
        if self.j == 0 || self.j >= usize::BITS as usize {
            return err(format!("scattering scale J must be positive, got {}", self.j));
        }
        if self.l == 0 {
            return err("scattering needs at least one orientation".into());
        }
        if !(1..=2).contains(&self.m0) {
            return err(format!("path length m0 must be 1 or 2, got {}", self.m0));
        }
        for &n in &self.input_shape {
            if !n.is_power_of_two() {
                return err(format!("grid extent {n} is not a power of two"));
            }
            if (1usize << self.j) > n {
                return err(format!("2^J = {} exceeds grid extent {n}", 1usize << self.j));
            }
        }
        Ok(())
    }

    fn orientations(&self) -> usize {
        if self.input_shape.len() == 1 {
            1
        } else {
            self.l
        }
    }

    /// Admissible paths in output order: the empty path, then all
    /// first-order paths, then second-order paths with strictly increasing
    /// scale.
    pub fn paths(&self) -> Vec<ScatteringPath> {
        let lambdas: Vec<(usize, usize)> = (0..self.j)
            .flat_map(|j| (0..self.orientations()).map(move |r| (r, j)))
            .collect();
        let mut paths = vec![ScatteringPath { lambdas: vec![] }];
        paths.extend(lambdas.iter().map(|&l| ScatteringPath { lambdas: vec![l] }));
        if self.m0 >= 2 {
            for &l1 in &lambdas {
                for &l2 in lambdas.iter().filter(|l2| l2.1 > l1.1) {
                    paths.push(ScatteringPath {
                        lambdas: vec![l1, l2],
                    });
                }
            }
        }
        paths
    }

    /// Coefficients per path after subsampling.
    pub fn samples_per_path(&self) -> usize {
        self.input_shape.iter().map(|n| n >> self.j).product()
    }

    pub fn output_width(&self) -> usize {
        self.paths().len() * self.samples_per_path()
    }
}

/// A sequence of `(rotation, scale)` filter indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScatteringPath {
    pub lambdas: Vec<(usize, usize)>,
}

/// Frequency responses of the whole filterbank on the input grid.
pub struct Filterbank {
    config: ScatteringConfig,
    phi: Vec<f64>,
    /// Wavelets indexed by `scale * orientations + rotation`.
    psi: Vec<Vec<f64>>,
    paths: Vec<ScatteringPath>,
    forward: Vec<Arc<dyn Fft<f64>>>,
    inverse: Vec<Arc<dyn Fft<f64>>>,
}

impl std::fmt::Debug for Filterbank {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Filterbank")
            .field("config", &self.config)
            .field("wavelets", &self.psi.len())
            .finish()
    }
}

/// Frequency in radians of DFT bin `k` on an `n`-point grid, folded
/// into `[-π, π)`.
fn bin_frequency(k: usize, n: usize) -> f64 {
    let k = k as f64;
    let n = n as f64;
    let w = 2.0 * PI * k / n;
    if w >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// Gaussian `exp(-|w - c|² / 2σ²)` periodized over neighbouring copies of
/// the frequency torus.
fn periodized_gaussian(w: &[f64], centre: &[f64], sigma: f64) -> f64 {
    let shifts = [-2.0, -1.0, 0.0, 1.0, 2.0];
    let mut total = 0.0;
    match w.len() {
        1 => {
            for s in shifts {
                let d = w[0] + 2.0 * PI * s - centre[0];
                total += (-d * d / (2.0 * sigma * sigma)).exp();
            }
        }
        _ => {
            for s1 in shifts {
                for s2 in shifts {
                    let d1 = w[0] + 2.0 * PI * s1 - centre[0];
                    let d2 = w[1] + 2.0 * PI * s2 - centre[1];
                    total += (-(d1 * d1 + d2 * d2) / (2.0 * sigma * sigma)).exp();
                }
            }
        }
    }
    total
}

fn grid_frequencies(shape: &[usize]) -> Vec<Vec<f64>> {
    match shape {
        [n] => (0..*n).map(|k| vec![bin_frequency(k, *n)]).collect(),
        [n1, n2] => (0..n1 * n2)
            .map(|idx| vec![bin_frequency(idx / n2, *n1), bin_frequency(idx % n2, *n2)])
            .collect(),
        _ => unreachable!("validated rank"),
    }
}

/// Builds the Morlet filterbank and low-pass for `cfg`.
pub fn build_filterbank(cfg: &ScatteringConfig) -> Result<Filterbank> {
    cfg.validate()?;
    let shape = &cfg.input_shape;
    let freqs = grid_frequencies(shape);
    let zero = vec![0.0; shape.len()];
    let rotations = cfg.orientations();

    let mut psi = Vec::with_capacity(cfg.j * rotations);
    for j in 0..cfg.j {
        let xi = XI_MAX / (1u64 << j) as f64;
        let sigma = SIGMA_RATIO * xi;
        for r in 0..rotations {
            let theta = PI * r as f64 / rotations as f64;
            let centre: Vec<f64> = if shape.len() == 1 {
                vec![xi]
            } else {
                vec![xi * theta.cos(), xi * theta.sin()]
            };
            // correction weight that zeroes the response at DC
            let kappa = periodized_gaussian(&zero, &centre, sigma)
                / periodized_gaussian(&zero, &zero, sigma);
            let filter: Vec<f64> = freqs
                .iter()
                .map(|w| {
                    periodized_gaussian(w, &centre, sigma)
                        - kappa * periodized_gaussian(w, &zero, sigma)
                })
                .collect();
            psi.push(filter);
        }
    }

    let sigma_phi = SIGMA_RATIO * XI_MAX / (1u64 << (cfg.j - 1)) as f64;
    let dc = periodized_gaussian(&zero, &zero, sigma_phi);
    let phi: Vec<f64> = freqs
        .iter()
        .map(|w| periodized_gaussian(w, &zero, sigma_phi) / dc)
        .collect();

    // largest common wavelet gain keeping |φ̂|² + s² Σ|ψ̂|² <= 1
    let mut s2: f64 = 1.0;
    for (k, &p) in phi.iter().enumerate() {
        let energy: f64 = psi.iter().map(|f| f[k] * f[k]).sum();
        if energy > 1e-14 {
            s2 = s2.min(((1.0 - p * p).max(0.0)) / energy);
        }
    }
    let gain = s2.sqrt();
    for f in &mut psi {
        for v in f.iter_mut() {
            *v *= gain;
        }
    }

    let mut planner = FftPlanner::new();
    let forward = shape.iter().map(|&n| planner.plan_fft_forward(n)).collect();
    let inverse = shape.iter().map(|&n| planner.plan_fft_inverse(n)).collect();
    Ok(Filterbank {
        config: cfg.clone(),
        phi,
        psi,
        paths: cfg.paths(),
        forward,
        inverse,
    })
}

impl Filterbank {
    pub fn config(&self) -> &ScatteringConfig {
        &self.config
    }

    pub fn paths(&self) -> &[ScatteringPath] {
        &self.paths
    }

    pub fn output_width(&self) -> usize {
        self.paths.len() * self.config.samples_per_path()
    }

    /// Low-pass frequency response on the grid (row-major bins).
    pub fn phi_hat(&self) -> &[f64] {
        &self.phi
    }

    /// Wavelet response for `(rotation, scale)`.
    pub fn psi_hat(&self, rotation: usize, scale: usize) -> &[f64] {
        &self.psi[scale * self.config.orientations() + rotation]
    }

    pub fn wavelet_count(&self) -> usize {
        self.psi.len()
    }

    /// `|φ̂(ω)|² + Σ_λ |ψ̂_λ(ω)|²` at every grid frequency.
    pub fn littlewood_paley(&self) -> Vec<f64> {
        (0..self.phi.len())
            .map(|k| self.phi[k].powi(2) + self.psi.iter().map(|f| f[k].powi(2)).sum::<f64>())
            .collect()
    }

    fn transform(&self, buf: &mut [Complex64], inverse: bool) {
        let plans = if inverse { &self.inverse } else { &self.forward };
        match self.config.input_shape.as_slice() {
            [_] => plans[0].process(buf),
            [n1, n2] => {
                plans[1].process(buf);
                let mut column = vec![Complex64::new(0.0, 0.0); *n1];
                for c in 0..*n2 {
                    for r in 0..*n1 {
                        column[r] = buf[r * n2 + c];
                    }
                    plans[0].process(&mut column);
                    for r in 0..*n1 {
                        buf[r * n2 + c] = column[r];
                    }
                }
            }
            _ => unreachable!("validated rank"),
        }
        if inverse {
            let scale = 1.0 / buf.len() as f64;
            for v in buf.iter_mut() {
                *v *= scale;
            }
        }
    }

    fn spectrum(&self, signal: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = signal.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.transform(&mut buf, false);
        buf
    }

    /// `|x ⋆ ψ|` given the spectrum of `x`.
    fn modulus_of_filtered(&self, spectrum: &[Complex64], filter: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex64> = spectrum.iter().zip(filter).map(|(s, f)| s * f).collect();
        self.transform(&mut buf, true);
        buf.iter().map(|c| c.norm()).collect()
    }

    /// Low-pass, then keep every `2^J`-th sample along each axis.
    fn lowpass_subsample(&self, spectrum: &[Complex64], out: &mut Vec<f64>) {
        let mut buf: Vec<Complex64> = spectrum.iter().zip(&self.phi).map(|(s, f)| s * f).collect();
        self.transform(&mut buf, true);
        let stride = 1usize << self.config.j;
        match self.config.input_shape.as_slice() {
            [n] => out.extend((0..*n).step_by(stride).map(|i| buf[i].re)),
            [n1, n2] => {
                for r in (0..*n1).step_by(stride) {
                    out.extend((0..*n2).step_by(stride).map(|c| buf[r * n2 + c].re));
                }
            }
            _ => unreachable!("validated rank"),
        }
    }

    /// Scattering coefficients of one real signal on the configured grid.
    pub fn scatter(&self, u: &[f64]) -> Result<Vec<f64>> {
        let expected: usize = self.config.input_shape.iter().product();
        if u.len() != expected {
            return Err(LocaError::shape(
                "scatter",
                format!(
                    "{} samples for grid {:?}",
                    u.len(),
                    self.config.input_shape
                ),
            ));
        }
        if !u.iter().all(|v| v.is_finite()) {
            return Err(LocaError::NumericDomain("scatter input".into()));
        }
        let rotations = self.config.orientations();
        let mut out = Vec::with_capacity(self.output_width());
        let u_hat = self.spectrum(u);
        self.lowpass_subsample(&u_hat, &mut out);

        // first layer moduli are reused by the second layer
        let mut first: Vec<Vec<Complex64>> = Vec::with_capacity(self.psi.len());
        for filter in &self.psi {
            let u1 = self.modulus_of_filtered(&u_hat, filter);
            let u1_hat = self.spectrum(&u1);
            self.lowpass_subsample(&u1_hat, &mut out);
            first.push(u1_hat);
        }
        if self.config.m0 >= 2 {
            for path in self.paths.iter().filter(|p| p.lambdas.len() == 2) {
                let (r1, j1) = path.lambdas[0];
                let (r2, j2) = path.lambdas[1];
                let u1_hat = &first[j1 * rotations + r1];
                let u2 = self.modulus_of_filtered(u1_hat, &self.psi[j2 * rotations + r2]);
                let u2_hat = self.spectrum(&u2);
                self.lowpass_subsample(&u2_hat, &mut out);
            }
        }
        debug_assert_eq!(out.len(), self.output_width());
        Ok(out)
    }
}

/// One-shot convenience wrapper: builds the filterbank and scatters `u`.
pub fn scatter(u: &[f64], cfg: &ScatteringConfig) -> Result<Vec<f64>> {
    build_filterbank(cfg)?.scatter(u)
}

/// Linear interpolation between uniform grids spanning the same interval
/// (endpoints included).
pub fn resample_linear(values: &[f64], new_len: usize) -> Result<Vec<f64>> {
    let n = values.len();
    if n < 2 || new_len < 2 {
        return Err(LocaError::Config(format!(
            "resampling needs at least two points, got {n} -> {new_len}"
        )));
    }
    Ok((0..new_len)
        .map(|i| {
            let t = i as f64 * (n - 1) as f64 / (new_len - 1) as f64;
            let lo = (t.floor() as usize).min(n - 2);
            let frac = t - lo as f64;
            values[lo] * (1.0 - frac) + values[lo + 1] * frac
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg_1d() -> ScatteringConfig {
        ScatteringConfig {
            j: 4,
            l: 8,
            m0: 2,
            input_shape: vec![128],
        }
    }

    fn cfg_2d() -> ScatteringConfig {
        ScatteringConfig {
            j: 1,
            l: 2,
            m0: 2,
            input_shape: vec![32, 32],
        }
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn config_validation() {
        assert!(cfg_1d().validate().is_ok());
        let mut c = cfg_1d();
        c.j = 8;
        assert!(c.validate().is_err());
        c = cfg_1d();
        c.input_shape = vec![100];
        assert!(c.validate().is_err());
        c = cfg_1d();
        c.m0 = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn path_structure() {
        let c = cfg_1d();
        let paths = c.paths();
        // 1 + J + J(J-1)/2
        assert_eq!(paths.len(), 1 + 4 + 6);
        for p in &paths {
            assert!(p.lambdas.len() <= c.m0);
            assert!(p.lambdas.windows(2).all(|w| w[0].1 < w[1].1));
        }
        assert_eq!(c.output_width(), 11 * 8);
        let c2 = cfg_2d();
        assert_eq!(c2.paths().len(), 1 + 2);
        assert_eq!(c2.output_width(), 3 * 256);
    }

    #[test]
    fn wavelets_are_band_pass_and_lowpass_has_unit_dc() {
        for cfg in [cfg_1d(), cfg_2d()] {
            let fb = build_filterbank(&cfg).unwrap();
            assert_eq!(fb.phi_hat()[0], 1.0);
            for f in &fb.psi {
                assert!(f[0].abs() < 1e-6, "{}", f[0]);
            }
        }
    }

    #[test]
    fn littlewood_paley_bound() {
        for cfg in [cfg_1d(), cfg_2d()] {
            let fb = build_filterbank(&cfg).unwrap();
            let max = fb.littlewood_paley().into_iter().fold(0.0, f64::max);
            assert!(max <= 1.05, "{max}");
        }
    }

    #[test]
    fn zero_and_constant_inputs() {
        for cfg in [cfg_1d(), cfg_2d()] {
            let n: usize = cfg.input_shape.iter().product();
            let fb = build_filterbank(&cfg).unwrap();
            assert!(fb.scatter(&vec![0.0; n]).unwrap().iter().all(|&v| v == 0.0));
            let s = fb.scatter(&vec![1.7; n]).unwrap();
            let per = cfg.samples_per_path();
            for (i, v) in s.iter().enumerate() {
                if i < per {
                    assert!((v - 1.7).abs() < 1e-12);
                } else {
                    assert!(v.abs() < 1e-8, "coefficient {i} = {v}");
                }
            }
        }
    }

    #[test]
    fn shift_stability_beats_raw_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let fb = build_filterbank(&cfg_1d()).unwrap();
        let u: Vec<f64> = (0..128).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut shifted = u.clone();
        shifted.rotate_right(1);
        let (su, ss) = (fb.scatter(&u).unwrap(), fb.scatter(&shifted).unwrap());
        let diff: Vec<f64> = su.iter().zip(&ss).map(|(a, b)| a - b).collect();
        let rel_scatter = norm(&diff) / norm(&su);
        let raw: Vec<f64> = u.iter().zip(&shifted).map(|(a, b)| a - b).collect();
        let rel_raw = norm(&raw) / norm(&u);
        assert!(rel_scatter <= 0.05, "{rel_scatter}");
        assert!(rel_raw >= 10.0 * rel_scatter, "{rel_raw} vs {rel_scatter}");
    }

    #[test]
    fn nonexpansive_and_energy_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for cfg in [cfg_1d(), cfg_2d()] {
            let fb = build_filterbank(&cfg).unwrap();
            let n: usize = cfg.input_shape.iter().product();
            for _ in 0..10 {
                let u: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let (su, sv) = (fb.scatter(&u).unwrap(), fb.scatter(&v).unwrap());
                let ds: Vec<f64> = su.iter().zip(&sv).map(|(a, b)| a - b).collect();
                let du: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a - b).collect();
                assert!(norm(&ds) <= 1.05 * norm(&du));
                assert!(norm(&su) <= 1.05 * norm(&u));
            }
        }
    }

    #[test]
    fn deterministic_and_shape_checked() {
        let fb = build_filterbank(&cfg_2d()).unwrap();
        let u: Vec<f64> = (0..1024).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = fb.scatter(&u).unwrap();
        let b = fb.scatter(&u).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert!(matches!(fb.scatter(&u[..1000]), Err(LocaError::Shape { .. })));
    }

    #[test]
    fn resampling_is_exact_for_linear_functions() {
        let v: Vec<f64> = (0..100).map(|i| 2.0 * i as f64 / 99.0 - 0.5).collect();
        let r = resample_linear(&v, 128).unwrap();
        for (i, x) in r.iter().enumerate() {
            assert!((x - (2.0 * i as f64 / 127.0 - 0.5)).abs() < 1e-12);
        }
    }
}
