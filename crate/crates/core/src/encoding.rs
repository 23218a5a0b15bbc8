//! Query-side positional encoding and the Fourier-projection input encoder.

use std::f64::consts::PI;

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{LocaError, Result};
use crate::numerics::Matrix;

/// Dyadic sinusoidal features of query coordinates in the unit box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PositionalEncodingConfig {
    /// Coefficients per spatial dimension; must be even.
    pub h: usize,
    pub d_y: usize,
    /// Lowest octave `j0`; frequencies are `2^j π` for
    /// `j = j0, ..., j0 + H/2 - 1`. With `j0 >= 1` every feature is
    /// 1-periodic, so opposite faces of the unit box encode identically.
    pub first_octave: u32,
}

impl PositionalEncodingConfig {
    /// Octaves `j = 1..=H/2`.
    pub fn new(h: usize, d_y: usize) -> Result<Self> {
        Self::with_first_octave(h, d_y, 1)
    }

    pub fn with_first_octave(h: usize, d_y: usize, first_octave: u32) -> Result<Self> {
        let cfg = Self { h, d_y, first_octave };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.h % 2 != 0 {
            return Err(LocaError::Config(format!(
                "positional encoding width H must be even and positive, got {}",
                self.h
            )));
        }
        if self.d_y == 0 {
            return Err(LocaError::Config("query dimension must be positive".into()));
        }
        if self.first_octave as usize + self.h / 2 > 52 {
            return Err(LocaError::Config("positional encoding frequencies exceed 2^52".into()));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.h * self.d_y
    }
}

/// Encodes one query point.
///
/// For dimension `i` (0-based) and the `k`-th octave `j = j0 + k`, slot
/// `i*H + 2k` holds `cos(2^j π y_i)` and the next slot `sin(2^j π y_i)`.
pub fn positional_encode(y: &[f64], cfg: &PositionalEncodingConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if y.len() != cfg.d_y {
        return Err(LocaError::shape(
            "positional_encode",
            format!("point has {} coordinates, config says {}", y.len(), cfg.d_y),
        ));
    }
    if !y.iter().all(|v| v.is_finite()) {
        return Err(LocaError::NumericDomain("positional_encode input".into()));
    }
    let mut out = vec![0.0; cfg.width()];
    for (i, &coord) in y.iter().enumerate() {
        for k in 0..cfg.h / 2 {
            let j = cfg.first_octave + k as u32;
            let (s, c) = ((1u64 << j) as f64 * PI * coord).sin_cos();
            let base = i * cfg.h + 2 * k;
            out[base] = c;
            out[base + 1] = s;
        }
    }
    Ok(out)
}

/// Encodes every row of an `N x d_y` point matrix.
pub fn positional_encode_rows(points: &Matrix, cfg: &PositionalEncodingConfig) -> Result<Matrix> {
    let mut out = Array2::zeros((points.nrows(), cfg.width()));
    for (row, mut dst) in points.rows().into_iter().zip(out.rows_mut()) {
        let coords: Vec<f64> = row.to_vec();
        let enc = positional_encode(&coords, cfg)?;
        dst.assign(&ndarray::ArrayView1::from(&enc));
    }
    Ok(out)
}

/// Number of retained real-valued coefficients of the Fourier projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralEncoderConfig {
    pub d: usize,
}

impl SpectralEncoderConfig {
    /// Complex coefficients needed to fill `d` real slots.
    pub fn complex_modes(&self) -> usize {
        self.d.div_ceil(2)
    }
}

/// Frequencies of a real-input transform on `shape`, lowest first.
///
/// 1D: `k = 0, 1, ..., m/2`. 2D: the half-plane `k2 >= 0` (with `k1 >= 0`
/// on the `k2 = 0` line) ordered by `k1² + k2²`, then by `k1`, then `k2`.
fn ordered_modes(shape: &[usize]) -> Vec<Vec<i64>> {
    match shape {
        [m] => (0..=(*m as i64) / 2).map(|k| vec![k]).collect(),
        [n1, n2] => {
            let (n1, n2) = (*n1 as i64, *n2 as i64);
            let mut modes = Vec::new();
            for k1 in -(n1 - 1) / 2..=n1 / 2 {
                for k2 in 0..=n2 / 2 {
                    if k2 == 0 && k1 < 0 {
                        continue;
                    }
                    modes.push(vec![k1, k2]);
                }
            }
            modes.sort_by_key(|k| (k[0] * k[0] + k[1] * k[1], k[0], k[1]));
            modes
        }
        _ => Vec::new(),
    }
}

/// Projects samples of `u` on a uniform periodic grid onto the lowest
/// trigonometric modes.
///
/// Coefficients are `c_k = (1/m) Σ_x u(x) e^{-2πi k·x}` (so `c_0` is the
/// mean), emitted lowest frequency first as `[Re c, Im c]` pairs and
/// truncated to `cfg.d` real slots. `shape` is the grid (row-major `u`).
pub fn fourier_project(u: &[f64], shape: &[usize], cfg: &SpectralEncoderConfig) -> Result<Vec<f64>> {
    let total: usize = shape.iter().product();
    if shape.is_empty() || shape.len() > 2 || total == 0 {
        return Err(LocaError::Config(format!(
            "Fourier projection supports 1D or 2D grids, got {shape:?}"
        )));
    }
    if u.len() != total {
        return Err(LocaError::shape(
            "fourier_project",
            format!("{} samples for grid {shape:?}", u.len()),
        ));
    }
    if cfg.d == 0 {
        return Err(LocaError::Config("spectral encoder needs d >= 1".into()));
    }
    let modes = ordered_modes(shape);
    if cfg.complex_modes() > modes.len() {
        return Err(LocaError::Config(format!(
            "d = {} needs {} modes but grid {shape:?} resolves {}",
            cfg.d,
            cfg.complex_modes(),
            modes.len()
        )));
    }
    let spectrum = fft_nd(u, shape);
    let scale = 1.0 / total as f64;
    let mut out = Vec::with_capacity(cfg.d);
    for k in modes.iter().take(cfg.complex_modes()) {
        let idx = match shape {
            [_] => k[0] as usize,
            [n1, n2] => {
                let r = k[0].rem_euclid(*n1 as i64) as usize;
                r * n2 + k[1] as usize
            }
            _ => unreachable!(),
        };
        let c = spectrum[idx] * scale;
        out.push(c.re);
        out.push(c.im);
    }
    out.truncate(cfg.d);
    Ok(out)
}

/// Forward DFT (no normalization) of a real row-major array.
pub(crate) fn fft_nd(u: &[f64], shape: &[usize]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = u.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let mut planner = FftPlanner::new();
    match shape {
        [m] => planner.plan_fft_forward(*m).process(&mut buf),
        [n1, n2] => fft2_in_place(&mut buf, *n1, *n2, &mut planner, false),
        _ => unreachable!("callers validate rank"),
    }
    buf
}

/// 2D transform of a row-major `n1 x n2` buffer (unnormalized either way).
pub(crate) fn fft2_in_place(
    buf: &mut [Complex64],
    n1: usize,
    n2: usize,
    planner: &mut FftPlanner<f64>,
    inverse: bool,
) {
    let rows = if inverse {
        planner.plan_fft_inverse(n2)
    } else {
        planner.plan_fft_forward(n2)
    };
    rows.process(buf);
    let cols = if inverse {
        planner.plan_fft_inverse(n1)
    } else {
        planner.plan_fft_forward(n1)
    };
    let mut column = vec![Complex64::new(0.0, 0.0); n1];
    for c in 0..n2 {
        for r in 0..n1 {
            column[r] = buf[r * n2 + c];
        }
        cols.process(&mut column);
        for r in 0..n1 {
            buf[r * n2 + c] = column[r];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn encoding_at_origin() {
        let cfg = PositionalEncodingConfig::new(4, 1).unwrap();
        assert_eq!(positional_encode(&[0.0], &cfg).unwrap(), vec![1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn encoding_at_one_first_pair() {
        let cfg = PositionalEncodingConfig::new(4, 1).unwrap();
        let e = positional_encode(&[1.0], &cfg).unwrap();
        assert!((e[0] - 1.0).abs() < 1e-12);
        assert!(e[1].abs() < 1e-12);
    }

    #[test]
    fn encoding_layout_per_dimension() {
        let cfg = PositionalEncodingConfig::new(2, 2).unwrap();
        let e = positional_encode(&[0.25, 0.0], &cfg).unwrap();
        // dimension 0: cos(π/2), sin(π/2); dimension 1: cos 0, sin 0
        assert!(e[0].abs() < 1e-15 && (e[1] - 1.0).abs() < 1e-15);
        assert_eq!(&e[2..], &[1.0, 0.0]);
    }

    #[test]
    fn odd_width_is_rejected() {
        assert!(PositionalEncodingConfig::new(3, 1).is_err());
        let bad = PositionalEncodingConfig { h: 5, d_y: 1, first_octave: 1 };
        assert!(positional_encode(&[0.1], &bad).is_err());
    }

    #[test]
    fn octave_zero_separates_unit_interval_ends() {
        let periodic = PositionalEncodingConfig::new(6, 1).unwrap();
        assert_eq!(
            positional_encode(&[0.0], &periodic).unwrap(),
            positional_encode(&[1.0], &periodic).unwrap().iter().map(|v| v.round()).collect::<Vec<_>>()
        );
        let cfg = PositionalEncodingConfig::with_first_octave(6, 1, 0).unwrap();
        let a = positional_encode(&[0.0], &cfg).unwrap();
        let b = positional_encode(&[1.0], &cfg).unwrap();
        assert!((a[0] - b[0]).abs() > 1.99);
        assert!((b[2] - 1.0).abs() < 1e-12 && (b[4] - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn encoding_is_bounded_and_lipschitz(y in -2.0f64..2.0, dy in 1e-7f64..1e-4) {
            let cfg = PositionalEncodingConfig::new(10, 1).unwrap();
            let a = positional_encode(&[y], &cfg).unwrap();
            let b = positional_encode(&[y + dy], &cfg).unwrap();
            let bound = (1u64 << 5) as f64 * PI;
            for (x, z) in a.iter().zip(&b) {
                prop_assert!(x.abs() <= 1.0);
                prop_assert!((x - z).abs() <= bound * dy * (1.0 + 1e-9));
            }
        }

        #[test]
        fn projection_is_linear(
            u in proptest::collection::vec(-3.0f64..3.0, 16),
            v in proptest::collection::vec(-3.0f64..3.0, 16),
            a in -2.0f64..2.0, b in -2.0f64..2.0,
        ) {
            let cfg = SpectralEncoderConfig { d: 12 };
            let mix: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + b * y).collect();
            let pm = fourier_project(&mix, &[16], &cfg).unwrap();
            let pu = fourier_project(&u, &[16], &cfg).unwrap();
            let pv = fourier_project(&v, &[16], &cfg).unwrap();
            for i in 0..12 {
                prop_assert!((pm[i] - (a * pu[i] + b * pv[i])).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn constant_has_only_dc() {
        let p = fourier_project(&[2.5; 32], &[32], &SpectralEncoderConfig { d: 10 }).unwrap();
        assert!((p[0] - 2.5).abs() < 1e-12);
        assert!(p[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn cosine_occupies_first_mode() {
        let m = 100;
        let u: Vec<f64> = (0..m).map(|i| (2.0 * PI * i as f64 / m as f64).cos()).collect();
        let p = fourier_project(&u, &[m], &SpectralEncoderConfig { d: 20 }).unwrap();
        // cos = (e^{iθ} + e^{-iθ}) / 2: the k = 1 coefficient carries all of it
        assert!((p[2] - 0.5).abs() < 1e-10);
        for (i, v) in p.iter().enumerate() {
            if i != 2 {
                assert!(v.abs() < 1e-10, "slot {i} = {v}");
            }
        }
    }

    fn naive_dft(u: &[f64], k: usize) -> (f64, f64) {
        let m = u.len() as f64;
        u.iter().enumerate().fold((0.0, 0.0), |(re, im), (x, &v)| {
            let t = -2.0 * PI * (k * x) as f64 / m;
            (re + v * t.cos() / m, im + v * t.sin() / m)
        })
    }

    #[test]
    fn matches_direct_summation() {
        let m = 96;
        let u: Vec<f64> = (0..m)
            .map(|i| {
                let x = i as f64 / m as f64;
                (2.0 * PI * x).sin() * 0.7 + (6.0 * PI * x).cos() - 0.3 * (x - 0.5).powi(2)
            })
            .collect();
        let p = fourier_project(&u, &[m], &SpectralEncoderConfig { d: 30 }).unwrap();
        for k in 0..15 {
            let (re, im) = naive_dft(&u, k);
            assert!((p[2 * k] - re).abs() < 1e-10);
            assert!((p[2 * k + 1] - im).abs() < 1e-10);
        }
    }

    #[test]
    fn refinement_agrees_on_shared_band() {
        let f = |x: f64| (-(2.0 * PI * x).cos()).exp();
        let coarse: Vec<f64> = (0..32).map(|i| f(i as f64 / 32.0)).collect();
        let fine: Vec<f64> = (0..64).map(|i| f(i as f64 / 64.0)).collect();
        let cfg = SpectralEncoderConfig { d: 8 };
        let a = fourier_project(&coarse, &[32], &cfg).unwrap();
        let b = fourier_project(&fine, &[64], &cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn too_many_modes_is_a_config_error() {
        let u = vec![0.0; 8];
        assert!(fourier_project(&u, &[8], &SpectralEncoderConfig { d: 10 }).is_ok());
        assert!(fourier_project(&u, &[8], &SpectralEncoderConfig { d: 11 }).is_err());
    }

    #[test]
    fn two_dimensional_projection() {
        let (n1, n2) = (8, 16);
        let u: Vec<f64> = (0..n1 * n2)
            .map(|idx| {
                let (r, c) = (idx / n2, idx % n2);
                1.0 + (2.0 * PI * c as f64 / n2 as f64).cos() * 0.5
                    + (2.0 * PI * r as f64 / n1 as f64).sin()
            })
            .collect();
        let p = fourier_project(&u, &[n1, n2], &SpectralEncoderConfig { d: 6 }).unwrap();
        // modes: (0,0), (0,1), (1,0)
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1].abs() < 1e-12);
        assert!((p[2] - 0.25).abs() < 1e-12 && p[3].abs() < 1e-12);
        assert!(p[4].abs() < 1e-12 && (p[5] + 0.5).abs() < 1e-12);
    }
}
