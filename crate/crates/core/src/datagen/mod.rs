//! Synthetic benchmark data: input-function samplers, the solution
//! operators, label subsampling, noise injection and the dataset file.

pub mod antiderivative;
pub mod darcy;
pub mod gp;

use std::path::Path;

use log::{info, warn};
use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{LocaError, Result};
use crate::numerics::{sha256_hex, Container, Matrix, NamedArray, SeededRng};

pub use antiderivative::antiderivative_solve;
pub use darcy::{darcy_permeability_sample, darcy_solve, PermeabilityField};
pub use gp::{gp_sample, GpSampler, GpSpec};

/// Per-sample provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub generator: String,
    pub index: usize,
    pub length_scale: f64,
    pub amplitude: f64,
    pub label_fraction: f64,
    pub noise: Option<NoiseSpec>,
}

/// One input/output function pair.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorSample {
    /// Sensor locations, `m x d_x`.
    pub x: Matrix,
    /// Input values at the sensors, `m x d_u`.
    pub u: Matrix,
    /// Query locations, `M x d_y`.
    pub y: Matrix,
    /// Output values at the queries, `M x d_s`.
    pub s: Matrix,
    pub meta: SampleMeta,
}

impl OperatorSample {
    pub fn validate(&self) -> Result<()> {
        if self.x.nrows() == 0 || self.y.nrows() == 0 {
            return Err(LocaError::EmptyInput("sample without sensors or queries".into()));
        }
        if self.u.nrows() != self.x.nrows() || self.s.nrows() != self.y.nrows() {
            return Err(LocaError::shape(
                "operator sample",
                format!(
                    "x {:?}, u {:?}, y {:?}, s {:?}",
                    self.x.dim(),
                    self.u.dim(),
                    self.y.dim(),
                    self.s.dim()
                ),
            ));
        }
        let finite = [&self.x, &self.u, &self.y, &self.s]
            .iter()
            .all(|m| m.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(LocaError::Data("non-finite values in sample".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseTarget {
    Inputs,
    Outputs,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub target: NoiseTarget,
}

/// Number of labels kept for a fraction of `m` queries.
pub fn label_count(fraction: f64, m: usize) -> usize {
    // the small offset keeps e.g. 0.1 * 100 from rounding down to 9
    (fraction * m as f64 + 1e-9).floor() as usize
}

/// Keeps `⌊fraction · M⌋` query/output pairs chosen uniformly without
/// replacement, in their original order.
pub fn subsample_labels<R: Rng + ?Sized>(
    sample: &OperatorSample,
    fraction: f64,
    rng: &mut R,
) -> Result<OperatorSample> {
    let m = sample.y.nrows();
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(LocaError::Config(format!("label fraction {fraction} outside (0, 1]")));
    }
    let p = label_count(fraction, m);
    if p == 0 {
        return Err(LocaError::Config(format!(
            "label fraction {fraction} of {m} queries keeps nothing"
        )));
    }
    let mut keep: Vec<usize> = if p == m {
        (0..m).collect()
    } else {
        sample_indices(rng, m, p).into_vec()
    };
    keep.sort_unstable();
    let mut out = sample.clone();
    out.y = sample.y.select(Axis(0), &keep);
    out.s = sample.s.select(Axis(0), &keep);
    out.meta.label_fraction = fraction;
    Ok(out)
}

/// Adds i.i.d. `N(0, sigma²)` to inputs, outputs or both.
pub fn add_noise<R: Rng + ?Sized>(
    sample: &OperatorSample,
    sigma: f64,
    target: NoiseTarget,
    rng: &mut R,
) -> Result<OperatorSample> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(LocaError::Config(format!("noise level {sigma} must be non-negative")));
    }
    let mut out = sample.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    if matches!(target, NoiseTarget::Inputs | NoiseTarget::Both) {
        out.u.mapv_inplace(|v| v + normal.sample(rng));
    }
    if matches!(target, NoiseTarget::Outputs | NoiseTarget::Both) {
        out.s.mapv_inplace(|v| v + normal.sample(rng));
    }
    out.meta.noise = Some(NoiseSpec { sigma, target });
    Ok(out)
}

/// Independent generator for `(base seed, sample index, purpose)`.
pub fn derive_rng(base: u64, index: usize, purpose: &str) -> SeededRng {
    let mut bytes = Vec::with_capacity(16 + purpose.len());
    bytes.extend_from_slice(&base.to_le_bytes());
    bytes.extend_from_slice(&(index as u64).to_le_bytes());
    bytes.extend_from_slice(purpose.as_bytes());
    let digest = sha256_hex(&bytes);
    let mut seed = [0u8; 32];
    hex::decode_to_slice(&digest, &mut seed).expect("sha256 digest is 32 bytes");
    SeededRng::from_seed(seed)
}

/// Runs `f` for every index on up to `threads` scoped workers and returns
/// the results in index order.
pub fn parallel_indexed<T, F>(count: usize, threads: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let threads = threads.max(1).min(count.max(1));
    if threads == 1 {
        return (0..count).map(&f).collect();
    }
    let mut slots: Vec<Option<Result<T>>> = (0..count).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunks: Vec<_> = slots
            .chunks_mut(count.div_ceil(threads))
            .enumerate()
            .map(|(c, chunk)| {
                let f = &f;
                let start = c * count.div_ceil(threads);
                scope.spawn(move || {
                    for (k, slot) in chunk.iter_mut().enumerate() {
                        *slot = Some(f(start + k));
                    }
                })
            })
            .collect();
        for h in chunks {
            h.join().expect("generation worker panicked");
        }
    });
    slots.into_iter().map(|s| s.expect("every slot filled")).collect()
}

/// How the Gaussian-process hyperparameters of each input are chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GpPrior {
    Fixed {
        length_scale: f64,
        amplitude: f64,
    },
    /// `l = 10^δ`, `o = 10^ζ` with `δ`, `ζ` uniform on the given ranges.
    MultiScale {
        log10_length_scale: [f64; 2],
        log10_amplitude: [f64; 2],
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GeneratorConfig {
    Antiderivative {
        /// Points of the integration grid.
        fine_points: usize,
        /// Sensor (and query) points, uniform on `[0, 1]`.
        sensors: usize,
        prior: GpPrior,
        jitter: f64,
    },
    Darcy {
        /// Cells per side.
        grid: usize,
        /// Relative eigenvalue cut-off of the permeability expansion.
        truncation: f64,
    },
}

impl GeneratorConfig {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Antiderivative { .. } => "antiderivative",
            Self::Darcy { .. } => "darcy",
        }
    }

    pub fn sensor_grid(&self) -> Vec<usize> {
        match self {
            Self::Antiderivative { sensors, .. } => vec![*sensors],
            Self::Darcy { grid, .. } => vec![*grid, *grid],
        }
    }

    pub fn dimension(&self) -> usize {
        self.sensor_grid().len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub generator: GeneratorConfig,
    pub samples: usize,
    pub label_fraction: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSpec>,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(LocaError::Config(m));
        if self.samples == 0 {
            return err("dataset needs at least one sample".into());
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return err(format!("label fraction {} outside (0, 1]", self.label_fraction));
        }
        match &self.generator {
            GeneratorConfig::Antiderivative {
                fine_points,
                sensors,
                prior,
                jitter,
            } => {
                if *fine_points < 2 || *sensors < 2 {
                    return err("antiderivative grids need at least two points".into());
                }
                if !(*jitter > 0.0) {
                    return err("jitter must be positive".into());
                }
                match prior {
                    GpPrior::Fixed {
                        length_scale,
                        amplitude,
                    } => GpSpec::new(*length_scale, *amplitude).validate()?,
                    GpPrior::MultiScale {
                        log10_length_scale: a,
                        log10_amplitude: b,
                    } => {
                        if !(a[0] < a[1] && b[0] < b[1]) {
                            return err("multi-scale ranges must be increasing".into());
                        }
                    }
                }
            }
            GeneratorConfig::Darcy { grid, truncation } => {
                if *grid < 2 {
                    return err("Darcy grid needs at least 2 cells per side".into());
                }
                if !(*truncation > 0.0 && *truncation < 1.0) {
                    return err(format!("truncation {truncation} outside (0, 1)"));
                }
            }
        }
        if let Some(n) = &self.noise {
            if !(n.sigma >= 0.0) {
                return err(format!("noise level {} must be non-negative", n.sigma));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LocaError::Config(format!("serializing dataset config: {e}")))
    }

    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_toml()?.as_bytes()))
    }
}

/// A set of samples sharing sensor locations and query count.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    /// Sensor locations shared by every sample, `m x d_x`.
    pub x: Matrix,
    /// `N x m x d_u`.
    pub u: Array3<f64>,
    /// `N x P x d_y`.
    pub y: Array3<f64>,
    /// `N x P x d_s`.
    pub s: Array3<f64>,
    pub length_scale: Vec<f64>,
    pub amplitude: Vec<f64>,
    /// Samples regenerated because the solver contract failed.
    pub rejected: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.u.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sensor_grid(&self) -> Vec<usize> {
        self.config.generator.sensor_grid()
    }

    pub fn inputs(&self, i: usize) -> ArrayView2<'_, f64> {
        self.u.index_axis(Axis(0), i)
    }

    pub fn queries(&self, i: usize) -> ArrayView2<'_, f64> {
        self.y.index_axis(Axis(0), i)
    }

    pub fn outputs(&self, i: usize) -> ArrayView2<'_, f64> {
        self.s.index_axis(Axis(0), i)
    }

    pub fn sample(&self, i: usize) -> OperatorSample {
        OperatorSample {
            x: self.x.clone(),
            u: self.inputs(i).to_owned(),
            y: self.queries(i).to_owned(),
            s: self.outputs(i).to_owned(),
            meta: SampleMeta {
                generator: self.config.generator.name().into(),
                index: i,
                length_scale: self.length_scale[i],
                amplitude: self.amplitude[i],
                label_fraction: self.config.label_fraction,
                noise: self.config.noise,
            },
        }
    }

    /// Stacks samples that share sensors and query counts.
    pub fn from_samples(config: DatasetConfig, samples: &[OperatorSample], rejected: usize) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| LocaError::EmptyInput("dataset without samples".into()))?;
        let n = samples.len();
        let (m, du) = first.u.dim();
        let (p, dy) = first.y.dim();
        let ds = first.s.ncols();
        let mut u = Array3::zeros((n, m, du));
        let mut y = Array3::zeros((n, p, dy));
        let mut s = Array3::zeros((n, p, ds));
        for (i, smp) in samples.iter().enumerate() {
            smp.validate()?;
            if smp.u.dim() != (m, du) || smp.y.dim() != (p, dy) || smp.s.dim() != (p, ds) || smp.x != first.x {
                return Err(LocaError::shape(
                    "dataset",
                    format!("sample {i} differs in layout from sample 0"),
                ));
            }
            u.index_axis_mut(Axis(0), i).assign(&smp.u);
            y.index_axis_mut(Axis(0), i).assign(&smp.y);
            s.index_axis_mut(Axis(0), i).assign(&smp.s);
        }
        Ok(Self {
            config,
            x: first.x.clone(),
            u,
            y,
            s,
            length_scale: samples.iter().map(|s| s.meta.length_scale).collect(),
            amplitude: samples.iter().map(|s| s.meta.amplitude).collect(),
            rejected,
        })
    }

    /// First `count` samples.
    pub fn truncated(&self, count: usize) -> Self {
        let count = count.min(self.len());
        let mut out = self.clone();
        out.u = self.u.slice(s![..count, .., ..]).to_owned();
        out.y = self.y.slice(s![..count, .., ..]).to_owned();
        out.s = self.s.slice(s![..count, .., ..]).to_owned();
        out.length_scale.truncate(count);
        out.amplitude.truncate(count);
        out.config.samples = count;
        out
    }

    /// Copy with noise added to every sample, seeded per sample index.
    pub fn with_noise(&self, noise: NoiseSpec, seed: u64) -> Result<Self> {
        let samples = (0..self.len())
            .map(|i| add_noise(&self.sample(i), noise.sigma, noise.target, &mut derive_rng(seed, i, "noise")))
            .collect::<Result<Vec<_>>>()?;
        let mut config = self.config.clone();
        config.noise = Some(noise);
        Self::from_samples(config, &samples, self.rejected)
    }

    /// Header text for the dataset file.
    fn header(&self) -> Result<String> {
        let header = serde_json::json!({
            "kind": "loca-dataset",
            "generator": self.config.generator.name(),
            "seed": self.config.seed,
            "config_hash": self.config.hash()?,
            "config": self.config.to_toml()?,
            "sensor_grid": self.sensor_grid(),
            "label_fraction": self.config.label_fraction,
            "noise": self.config.noise,
            "rejected": self.rejected,
        });
        Ok(header.to_string())
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(self.header()?);
        let arr3 = |name: &str, a: &Array3<f64>| {
            let (n0, n1, n2) = a.dim();
            NamedArray::new(name, vec![n0, n1, n2], a.iter().copied().collect())
        };
        c.push(NamedArray::new("x", vec![self.x.nrows(), self.x.ncols()], self.x.iter().copied().collect())?)?;
        c.push(arr3("u", &self.u)?)?;
        c.push(arr3("y", &self.y)?)?;
        c.push(arr3("s", &self.s)?)?;
        c.push(NamedArray::new("length_scale", vec![self.len()], self.length_scale.clone())?)?;
        c.push(NamedArray::new("amplitude", vec![self.len()], self.amplitude.clone())?)?;
        Ok(c)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let c = Container::read(path)?;
        let format_err = |detail: String| LocaError::Format {
            path: path.to_path_buf(),
            detail,
        };
        let header: serde_json::Value =
            serde_json::from_str(&c.header).map_err(|e| format_err(format!("dataset header: {e}")))?;
        if header["kind"] != "loca-dataset" {
            return Err(format_err("not a dataset file".into()));
        }
        let config: DatasetConfig = toml::from_str(header["config"].as_str().unwrap_or_default())
            .map_err(|e| format_err(format!("dataset config: {e}")))?;
        let get = |name: &str, rank: usize| -> Result<&NamedArray> {
            let a = c
                .get(name)
                .ok_or_else(|| format_err(format!("missing array {name}")))?;
            if a.shape.len() != rank {
                return Err(format_err(format!("array {name} has rank {}", a.shape.len())));
            }
            Ok(a)
        };
        let x = get("x", 2)?;
        let to3 = |a: &NamedArray| {
            Array3::from_shape_vec((a.shape[0], a.shape[1], a.shape[2]), a.data.clone())
                .map_err(|e| format_err(e.to_string()))
        };
        let u = to3(get("u", 3)?)?;
        let y = to3(get("y", 3)?)?;
        let s = to3(get("s", 3)?)?;
        let n = u.dim().0;
        let ls = get("length_scale", 1)?;
        let amp = get("amplitude", 1)?;
        if y.dim().0 != n || s.dim().0 != n || ls.data.len() != n || amp.data.len() != n || u.dim().1 != x.shape[0] {
            return Err(format_err("inconsistent sample counts".into()));
        }
        Ok(Self {
            config,
            x: Array2::from_shape_vec((x.shape[0], x.shape[1]), x.data.clone())
                .map_err(|e| format_err(e.to_string()))?,
            u,
            y,
            s,
            length_scale: ls.data.clone(),
            amplitude: amp.data.clone(),
            rejected: header["rejected"].as_u64().unwrap_or(0) as usize,
        })
    }
}

/// Attempts per Darcy sample before giving up.
const MAX_DARCY_ATTEMPTS: usize = 10;

/// Generates a dataset; byte-for-byte reproducible from the config, whatever
/// the thread count.
pub fn generate(config: &DatasetConfig, threads: usize) -> Result<Dataset> {
    config.validate()?;
    let name = config.generator.name();
    let (samples, rejected): (Vec<OperatorSample>, usize) = match &config.generator {
        GeneratorConfig::Antiderivative {
            fine_points,
            sensors,
            prior,
            jitter,
        } => {
            let fine = uniform_column(*fine_points);
            let x = uniform_column(*sensors);
            let cached = match prior {
                GpPrior::Fixed {
                    length_scale,
                    amplitude,
                } => Some(GpSampler::new(
                    &GpSpec {
                        length_scale: *length_scale,
                        amplitude: *amplitude,
                        jitter: *jitter,
                    },
                    &fine,
                )?),
                GpPrior::MultiScale { .. } => None,
            };
            let out = parallel_indexed(config.samples, threads, |i| {
                let mut rng = derive_rng(config.seed, i, "sample");
                let (spec, draw) = match (prior, &cached) {
                    (GpPrior::Fixed { length_scale, amplitude }, Some(sampler)) => {
                        ((*length_scale, *amplitude), sampler.sample(&mut rng))
                    }
                    (
                        GpPrior::MultiScale {
                            log10_length_scale: dl,
                            log10_amplitude: da,
                        },
                        _,
                    ) => {
                        let l = 10f64.powf(rng.random_range(dl[0]..dl[1]));
                        let o = 10f64.powf(rng.random_range(da[0]..da[1]));
                        let spec = GpSpec {
                            length_scale: l,
                            amplitude: o,
                            jitter: *jitter,
                        };
                        ((l, o), gp_sample(&spec, &fine, &mut rng)?)
                    }
                    _ => unreachable!("fixed prior always has a cached sampler"),
                };
                let s_fine = antiderivative_solve(&draw)?;
                let at = |vals: &[f64]| {
                    Array2::from_shape_fn((*sensors, 1), |(k, _)| {
                        antiderivative::interpolate_uniform(vals, x[[k, 0]])
                    })
                };
                finish_sample(
                    config,
                    i,
                    OperatorSample {
                        x: x.clone(),
                        u: at(&draw),
                        y: x.clone(),
                        s: at(&s_fine),
                        meta: SampleMeta {
                            generator: name.into(),
                            index: i,
                            length_scale: spec.0,
                            amplitude: spec.1,
                            label_fraction: 1.0,
                            noise: None,
                        },
                    },
                )
                .map(|s| (s, 0usize))
            })?;
            let rejected = out.iter().map(|(_, r)| r).sum();
            (out.into_iter().map(|(s, _)| s).collect(), rejected)
        }
        GeneratorConfig::Darcy { grid, truncation } => {
            let n = *grid;
            let field = PermeabilityField::new(n, *truncation)?;
            let centers = darcy::cell_centers(n);
            let out = parallel_indexed(config.samples, threads, |i| {
                for attempt in 0..MAX_DARCY_ATTEMPTS {
                    let mut rng = derive_rng(config.seed, i, &format!("sample/{attempt}"));
                    let perm = field.sample(&mut rng);
                    match darcy_solve(&perm, n) {
                        Ok(pressure) => {
                            let smp = OperatorSample {
                                x: centers.clone(),
                                u: Array2::from_shape_vec((n * n, 1), perm).expect("n² cells"),
                                y: centers.clone(),
                                s: Array2::from_shape_vec((n * n, 1), pressure).expect("n² cells"),
                                meta: SampleMeta {
                                    generator: name.into(),
                                    index: i,
                                    length_scale: 0.0,
                                    amplitude: 0.0,
                                    label_fraction: 1.0,
                                    noise: None,
                                },
                            };
                            return finish_sample(config, i, smp).map(|s| (s, attempt));
                        }
                        Err(LocaError::Solver(msg)) => {
                            warn!("sample {i} attempt {attempt} rejected: {msg}");
                        }
                        Err(e) => return Err(e),
                    }
                }
                Err(LocaError::Solver(format!(
                    "sample {i} failed the solver contract {MAX_DARCY_ATTEMPTS} times"
                )))
            })?;
            let rejected = out.iter().map(|(_, r)| r).sum();
            (out.into_iter().map(|(s, _)| s).collect(), rejected)
        }
    };
    if rejected > 0 {
        info!("{rejected} samples regenerated after failing the solver contract");
    }
    Dataset::from_samples(config.clone(), &samples, rejected)
}

fn finish_sample(config: &DatasetConfig, i: usize, smp: OperatorSample) -> Result<OperatorSample> {
    let mut smp = subsample_labels(&smp, config.label_fraction, &mut derive_rng(config.seed, i, "labels"))?;
    if let Some(noise) = config.noise {
        smp = add_noise(&smp, noise.sigma, noise.target, &mut derive_rng(config.seed, i, "noise"))?;
    }
    Ok(smp)
}

fn uniform_column(points: usize) -> Matrix {
    Array2::from_shape_fn((points, 1), |(i, _)| i as f64 / (points - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn antiderivative_config(samples: usize) -> DatasetConfig {
        DatasetConfig {
            generator: GeneratorConfig::Antiderivative {
                fine_points: 500,
                sensors: 100,
                prior: GpPrior::Fixed {
                    length_scale: 0.1,
                    amplitude: 1.0,
                },
                jitter: 1e-10,
            },
            samples,
            label_fraction: 1.0,
            seed: 5,
            noise: None,
        }
    }

    fn toy_sample(m: usize) -> OperatorSample {
        OperatorSample {
            x: Array2::from_shape_fn((4, 1), |(i, _)| i as f64),
            u: Array2::from_shape_fn((4, 1), |(i, _)| i as f64 * 0.5),
            y: Array2::from_shape_fn((m, 2), |(i, j)| (i * 2 + j) as f64),
            s: Array2::from_shape_fn((m, 1), |(i, _)| (i as f64).sqrt()),
            meta: SampleMeta {
                generator: "toy".into(),
                index: 0,
                length_scale: 1.0,
                amplitude: 1.0,
                label_fraction: 1.0,
                noise: None,
            },
        }
    }

    #[test]
    fn label_fraction_arithmetic() {
        assert_eq!(label_count(0.015, 1024), 15);
        assert_eq!(label_count(0.1, 100), 10);
        assert_eq!(label_count(1.0, 100), 100);
    }

    #[test]
    fn subsampling_keeps_original_pairs() {
        let smp = toy_sample(1024);
        let mut rng = derive_rng(1, 0, "t");
        let same = subsample_labels(&smp, 1.0, &mut rng).unwrap();
        assert_eq!(same.y, smp.y);
        let sub = subsample_labels(&smp, 0.015, &mut rng).unwrap();
        assert_eq!(sub.y.nrows(), 15);
        for (yr, sr) in sub.y.rows().into_iter().zip(sub.s.rows()) {
            let idx = (yr[0] / 2.0) as usize;
            assert_eq!(smp.y.row(idx), yr);
            assert_eq!(smp.s.row(idx), sr);
        }
        assert!(matches!(subsample_labels(&smp, 1e-4, &mut rng), Err(LocaError::Config(_))));
    }

    #[test]
    fn noise_levels() {
        let smp = toy_sample(100_000);
        let mut rng = derive_rng(2, 0, "noise");
        let clean = add_noise(&smp, 0.0, NoiseTarget::Both, &mut rng).unwrap();
        assert_eq!(clean, smp);
        let noisy = add_noise(&smp, 0.15, NoiseTarget::Outputs, &mut rng).unwrap();
        assert_eq!(noisy.u, smp.u);
        let diff = &noisy.s - &smp.s;
        let mean = diff.mean().unwrap();
        let std = (diff.mapv(|d| (d - mean).powi(2)).sum() / (diff.len() - 1) as f64).sqrt();
        assert!((std - 0.15).abs() <= 0.02 * 0.15, "{std}");
        let again = add_noise(&smp, 0.15, NoiseTarget::Outputs, &mut derive_rng(2, 0, "noise")).unwrap();
        let other = add_noise(&smp, 0.15, NoiseTarget::Outputs, &mut derive_rng(2, 1, "noise")).unwrap();
        assert_eq!(again.s, add_noise(&smp, 0.15, NoiseTarget::Outputs, &mut derive_rng(2, 0, "noise")).unwrap().s);
        assert_ne!(again.s, other.s);
    }

    #[test]
    fn antiderivative_dataset_layout_and_reproducibility() {
        let cfg = antiderivative_config(6);
        let a = generate(&cfg, 1).unwrap();
        assert_eq!(a.u.dim(), (6, 100, 1));
        assert_eq!(a.s.dim(), (6, 100, 1));
        assert_eq!(a.y.dim(), (6, 100, 1));
        for i in 0..6 {
            assert_eq!(a.outputs(i)[[0, 0]], 0.0);
        }
        let b = generate(&cfg, 3).unwrap();
        assert_eq!(a.to_container().unwrap().to_bytes(), b.to_container().unwrap().to_bytes());
    }

    #[test]
    fn darcy_dataset_with_sparse_labels() {
        let cfg = DatasetConfig {
            generator: GeneratorConfig::Darcy {
                grid: 32,
                truncation: 1e-8,
            },
            samples: 3,
            label_fraction: 0.015,
            seed: 1,
            noise: None,
        };
        let d = generate(&cfg, 1).unwrap();
        assert_eq!(d.u.dim(), (3, 1024, 1));
        assert_eq!(d.y.dim(), (3, 15, 2));
        assert_ne!(d.queries(0), d.queries(1));
        assert!(d.u.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn dataset_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let mut cfg = antiderivative_config(3);
        cfg.noise = Some(NoiseSpec {
            sigma: 0.1,
            target: NoiseTarget::Inputs,
        });
        let d = generate(&cfg, 1).unwrap();
        d.write(&path).unwrap();
        let back = Dataset::read(&path).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn multiscale_prior_varies_hyperparameters() {
        let mut cfg = antiderivative_config(4);
        cfg.generator = GeneratorConfig::Antiderivative {
            fine_points: 200,
            sensors: 50,
            prior: GpPrior::MultiScale {
                log10_length_scale: [-2.0, 1.0],
                log10_amplitude: [-2.0, 2.0],
            },
            jitter: 1e-10,
        };
        let d = generate(&cfg, 1).unwrap();
        assert!(d.length_scale.windows(2).any(|w| w[0] != w[1]));
        assert!(d.length_scale.iter().all(|l| (0.01..=10.0).contains(l)));
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let mut cfg = antiderivative_config(0);
        assert!(cfg.validate().is_err());
        cfg.samples = 2;
        cfg.label_fraction = 0.0;
        assert!(cfg.validate().is_err());
        let text = "samples = 1\nlabel_fraction = 1.0\nseed = 0\nbogus = 3\n[generator]\nkind = \"darcy\"\ngrid = 8\ntruncation = 1e-4\n";
        assert!(toml::from_str::<DatasetConfig>(text).is_err());
    }
}
