//! Experiment configuration files, presets and end-to-end pipelines.
//!
//! An experiment file is TOML with an explicit `schema_version`; unknown
//! keys are rejected at every level. Every artifact written by a pipeline
//! carries the experiment's config hash and seed.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::datagen::{generate, Dataset, DatasetConfig, GeneratorConfig, GpPrior, NoiseSpec, NoiseTarget};
use crate::datagen::derive_rng;
use crate::error::{LocaError, Result, StageExt};
use crate::kca::{BoxDomain, KernelConfig};
use crate::model::{EncoderConfig, LocaConfig, LocaModel, QuadratureSpec};
use crate::numerics::container::write_atomic;
use crate::numerics::{sha256_hex, AdamConfig, MlpShape};
use crate::trainer::{
    error_stats, evaluate, read_errors_csv, train, write_errors_csv, write_history_csv, write_quantiles_csv,
    ErrorStats, Evaluation, TrainConfig, TrainOutcome,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Antiderivative,
    AntiderivativeOod,
    AntiderivativeMultiscale,
    Darcy,
    DarcyAblation,
    DarcyNoise,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 6] = [
        Self::Antiderivative,
        Self::AntiderivativeOod,
        Self::AntiderivativeMultiscale,
        Self::Darcy,
        Self::DarcyAblation,
        Self::DarcyNoise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Antiderivative => "antiderivative",
            Self::AntiderivativeOod => "antiderivative-ood",
            Self::AntiderivativeMultiscale => "antiderivative-multiscale",
            Self::Darcy => "darcy",
            Self::DarcyAblation => "darcy-ablation",
            Self::DarcyNoise => "darcy-noise",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// Optimizer schedule; the seed lives at the top level of the experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub batch_size: usize,
    pub iterations: usize,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default)]
    pub log_every: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    /// Report squared-norm ratios instead of norm ratios.
    #[serde(default)]
    pub squared: bool,
    /// Standard deviation of Gaussian noise added to test inputs for a
    /// second, noisy evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_noise: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepParameter {
    /// Length-scale of the training inputs (test data unchanged).
    TrainLengthScale,
    /// Fraction of labeled queries per training sample.
    LabelFraction,
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            Self::TrainLengthScale => "train-length-scale",
            Self::LabelFraction => "label-fraction",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
    /// Seeds per value; per-sample errors are averaged over them.
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub experiment: ExperimentKind,
    /// Seeds parameter initialization and batch selection. Dataset seeds
    /// live in the dataset sections.
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub train_data: DatasetConfig,
    pub test_data: DatasetConfig,
    pub model: LocaConfig,
    pub training: TrainingSection,
    #[serde(default)]
    pub evaluation: EvaluationSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
}

fn antiderivative_data(samples: usize, length_scale: f64, seed: u64) -> DatasetConfig {
    DatasetConfig {
        generator: GeneratorConfig::Antiderivative {
            fine_points: 500,
            sensors: 100,
            prior: GpPrior::Fixed {
                length_scale,
                amplitude: 1.0,
            },
            jitter: 1e-10,
        },
        samples,
        label_fraction: 1.0,
        seed,
        noise: None,
    }
}

fn darcy_data(samples: usize, label_fraction: f64, seed: u64) -> DatasetConfig {
    DatasetConfig {
        generator: GeneratorConfig::Darcy {
            grid: 32,
            truncation: 1e-8,
        },
        samples,
        label_fraction,
        seed,
        noise: None,
    }
}

fn antiderivative_model() -> LocaConfig {
    LocaConfig {
        n: 100,
        lift: 100,
        h: 10,
        encoding_first_octave: 0,
        d_y: 1,
        d_u: 1,
        d_s: 1,
        sensor_grid: vec![100],
        domain: BoxDomain::unit(1),
        encoder: EncoderConfig::Scattering {
            j: 4,
            l: 8,
            m0: 2,
            grid: vec![128],
        },
        q_net: MlpShape::new(2, 100),
        g_net: MlpShape::new(2, 100),
        f_net: MlpShape::new(1, 500),
        use_kca: true,
        quadrature: QuadratureSpec::GaussLegendre { q_per_dim: 64 },
        kernel: KernelConfig::default(),
    }
}

fn darcy_model() -> LocaConfig {
    LocaConfig {
        n: 100,
        lift: 100,
        h: 6,
        encoding_first_octave: 0,
        d_y: 2,
        d_u: 1,
        d_s: 1,
        sensor_grid: vec![32, 32],
        domain: BoxDomain::unit(2),
        encoder: EncoderConfig::Scattering {
            j: 1,
            l: 2,
            m0: 2,
            grid: vec![32, 32],
        },
        q_net: MlpShape::new(2, 100),
        g_net: MlpShape::new(2, 100),
        f_net: MlpShape::new(2, 100),
        use_kca: true,
        quadrature: QuadratureSpec::GaussLegendre { q_per_dim: 16 },
        kernel: KernelConfig::default(),
    }
}

impl ExperimentConfig {
    /// Shipped configuration of each experiment.
    pub fn preset(kind: ExperimentKind) -> Self {
        let training = |iterations| TrainingSection {
            batch_size: 100,
            iterations,
            optimizer: AdamConfig::default(),
            log_every: 1000,
        };
        let base = |train_data, test_data, model, iterations| ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            experiment: kind,
            seed: 0,
            output_dir: None,
            train_data,
            test_data,
            model,
            training: training(iterations),
            evaluation: EvaluationSection::default(),
            sweep: None,
        };
        match kind {
            ExperimentKind::Antiderivative => base(
                antiderivative_data(1000, 0.1, 1),
                antiderivative_data(1000, 0.1, 2),
                antiderivative_model(),
                50_000,
            ),
            ExperimentKind::AntiderivativeOod => {
                let mut cfg = base(
                    antiderivative_data(1000, 0.1, 1),
                    antiderivative_data(1000, 0.1, 2),
                    antiderivative_model(),
                    50_000,
                );
                cfg.sweep = Some(SweepSection {
                    parameter: SweepParameter::TrainLengthScale,
                    values: (1..=9).map(|k| k as f64 / 10.0).collect(),
                    seeds: (0..10).collect(),
                });
                cfg
            }
            ExperimentKind::AntiderivativeMultiscale => {
                let multi = |seed| {
                    let mut d = antiderivative_data(1000, 0.1, seed);
                    if let GeneratorConfig::Antiderivative { prior, .. } = &mut d.generator {
                        *prior = GpPrior::MultiScale {
                            log10_length_scale: [-2.0, 1.0],
                            log10_amplitude: [-2.0, 2.0],
                        };
                    }
                    d
                };
                base(multi(1), multi(2), antiderivative_model(), 50_000)
            }
            ExperimentKind::Darcy => base(darcy_data(1000, 0.06, 1), darcy_data(1000, 1.0, 2), darcy_model(), 20_000),
            ExperimentKind::DarcyAblation => {
                base(darcy_data(200, 0.015, 1), darcy_data(1000, 1.0, 2), darcy_model(), 20_000)
            }
            ExperimentKind::DarcyNoise => {
                let mut cfg = base(darcy_data(200, 0.015, 1), darcy_data(1000, 1.0, 2), darcy_model(), 20_000);
                cfg.evaluation.input_noise = Some(0.15);
                cfg
            }
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: toml::Value = toml::from_str(text).map_err(|e| LocaError::Config(e.to_string()))?;
        match raw.get("schema_version").and_then(|v| v.as_integer()) {
            Some(v) if v == SCHEMA_VERSION as i64 => {}
            Some(v) => {
                return Err(LocaError::Config(format!(
                    "schema_version {v} is not supported (expected {SCHEMA_VERSION})"
                )))
            }
            None => return Err(LocaError::Config("missing schema_version".into())),
        }
        let cfg: Self = toml::from_str(text).map_err(|e| LocaError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LocaError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            LocaError::Config(m) => LocaError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LocaError::Config(format!("serializing experiment: {e}")))
    }

    /// SHA-256 of the canonical TOML, ignoring the output directory.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = None;
        Ok(sha256_hex(c.to_toml()?.as_bytes()))
    }

    /// `config_hash=<hex> seed=<n>`, stamped on every artifact.
    pub fn provenance(&self) -> Result<String> {
        Ok(format!("config_hash={} seed={}", self.hash()?, self.seed))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.training.batch_size,
            iterations: self.training.iterations,
            optimizer: self.training.optimizer,
            seed: self.seed,
            log_every: self.training.log_every,
            eval_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(LocaError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return err(format!("schema_version {} is not supported", self.schema_version));
        }
        self.model.validate()?;
        self.train_data.validate()?;
        self.test_data.validate()?;
        for (name, data) in [("train_data", &self.train_data), ("test_data", &self.test_data)] {
            if data.generator.sensor_grid() != self.model.sensor_grid {
                return err(format!(
                    "{name}: sensor grid {:?} differs from model.sensor_grid {:?}",
                    data.generator.sensor_grid(),
                    self.model.sensor_grid
                ));
            }
            if data.generator.dimension() != self.model.d_y {
                return err(format!("{name}: query dimension differs from model.d_y"));
            }
        }
        if self.model.d_u != 1 || self.model.d_s != 1 {
            return err("the shipped generators produce scalar inputs and outputs (d_u = d_s = 1)".into());
        }
        if self.training.batch_size == 0 || self.training.batch_size > self.train_data.samples {
            return err(format!(
                "training.batch_size {} must lie in 1..={}",
                self.training.batch_size, self.train_data.samples
            ));
        }
        if self.training.iterations == 0 {
            return err("training.iterations must be positive".into());
        }
        self.training.optimizer.validate()?;
        if let Some(sigma) = self.evaluation.input_noise {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return err(format!("evaluation.input_noise {sigma} must be non-negative"));
            }
        }
        if self.experiment == ExperimentKind::DarcyNoise && self.evaluation.input_noise.is_none() {
            return err("darcy-noise needs evaluation.input_noise".into());
        }
        if self.experiment == ExperimentKind::AntiderivativeOod && self.sweep.is_none() {
            return err("antiderivative-ood needs a [sweep] section".into());
        }
        if let Some(sweep) = &self.sweep {
            if sweep.values.is_empty() || sweep.seeds.is_empty() {
                return err("sweep needs at least one value and one seed".into());
            }
            for &v in &sweep.values {
                let ok = match sweep.parameter {
                    SweepParameter::TrainLengthScale => {
                        v > 0.0 && matches!(self.train_data.generator, GeneratorConfig::Antiderivative { .. })
                    }
                    SweepParameter::LabelFraction => v > 0.0 && v <= 1.0,
                };
                if !ok {
                    return err(format!("sweep value {v} invalid for {}", sweep.parameter.name()));
                }
            }
        }
        Ok(())
    }

    /// One configuration per (value, seed) of the sweep, values outermost.
    pub fn sweep_variants(&self) -> Result<Vec<SweepVariant>> {
        let sweep = self
            .sweep
            .as_ref()
            .ok_or_else(|| LocaError::Config("configuration has no [sweep] section".into()))?;
        let mut out = Vec::new();
        for (vi, &value) in sweep.values.iter().enumerate() {
            for &seed in &sweep.seeds {
                let mut cfg = self.clone();
                cfg.sweep = None;
                cfg.seed = seed;
                cfg.output_dir = None;
                match sweep.parameter {
                    SweepParameter::TrainLengthScale => {
                        if let GeneratorConfig::Antiderivative { prior, .. } = &mut cfg.train_data.generator {
                            *prior = GpPrior::Fixed {
                                length_scale: value,
                                amplitude: match prior {
                                    GpPrior::Fixed { amplitude, .. } => *amplitude,
                                    GpPrior::MultiScale { .. } => 1.0,
                                },
                            };
                        }
                    }
                    SweepParameter::LabelFraction => cfg.train_data.label_fraction = value,
                }
                if cfg.experiment == ExperimentKind::AntiderivativeOod {
                    cfg.experiment = ExperimentKind::Antiderivative;
                }
                out.push(SweepVariant {
                    value_index: vi,
                    value,
                    seed,
                    dir_name: format!("v{vi:02}-s{seed}"),
                    config: cfg,
                });
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct SweepVariant {
    pub value_index: usize,
    pub value: f64,
    pub seed: u64,
    pub dir_name: String,
    pub config: ExperimentConfig,
}

/// Cache location of a dataset below `data_dir`, keyed by its config hash.
pub fn dataset_path(data_dir: &Path, cfg: &DatasetConfig) -> Result<PathBuf> {
    Ok(data_dir.join(format!("{}-{}.loca", cfg.generator.name(), &cfg.hash()?[..16])))
}

/// Reads the cached dataset for `cfg`, generating and writing it first if
/// needed. Regeneration from the same config produces identical bytes.
pub fn load_or_generate(data_dir: &Path, cfg: &DatasetConfig, threads: usize) -> Result<Dataset> {
    let path = dataset_path(data_dir, cfg)?;
    if path.exists() {
        let data = Dataset::read(&path)?;
        if &data.config == cfg {
            return Ok(data);
        }
        info!("cached dataset {} has a different config; regenerating", path.display());
    }
    info!("generating {} samples into {}", cfg.samples, path.display());
    let data = generate(cfg, threads)?;
    data.write(&path)?;
    Ok(data)
}

/// Generates (or finds) the train and test sets of an experiment.
pub fn generate_datasets(cfg: &ExperimentConfig, data_dir: &Path, threads: usize) -> Result<(Dataset, Dataset)> {
    let train = load_or_generate(data_dir, &cfg.train_data, threads).stage("generating training data")?;
    let test = load_or_generate(data_dir, &cfg.test_data, threads).stage("generating test data")?;
    Ok((train, test))
}

/// Freshly initialized model for an experiment's seed.
pub fn init_model(cfg: &ExperimentConfig) -> Result<LocaModel> {
    LocaModel::new(cfg.model.clone(), &mut derive_rng(cfg.seed, 0, "init"))
}

/// Test inputs corrupted with Gaussian noise of standard deviation `sigma`.
pub fn noisy_inputs(test: &Dataset, sigma: f64, seed: u64) -> Result<Dataset> {
    test.with_noise(
        NoiseSpec {
            sigma,
            target: NoiseTarget::Inputs,
        },
        seed,
    )
}

/// Headline numbers of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub experiment: String,
    pub config_hash: String,
    pub seed: u64,
    pub use_kca: bool,
    pub train_samples: usize,
    pub labels_per_sample: usize,
    pub test_samples: usize,
    pub iterations: usize,
    pub final_loss: f64,
    pub squared_metric: bool,
    pub test: ErrorStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noisy_test: Option<ErrorStats>,
    /// `100 (mean_noisy / mean_clean - 1)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_increase_percent: Option<f64>,
}

/// Pretty JSON with a trailing newline, written atomically.
pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| LocaError::Data(format!("json encoding: {e}")))?;
    write_atomic(path, format!("{text}\n").as_bytes())
}

pub fn read_summary(path: &Path) -> Result<RunSummary> {
    let text = fs::read_to_string(path).map_err(|e| LocaError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| LocaError::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

/// Writes `errors.csv`, `quantiles.csv` (prefixed by `prefix`) into `dir`.
pub fn write_evaluation(dir: &Path, prefix: &str, eval: &Evaluation, provenance: &str) -> Result<()> {
    write_errors_csv(&dir.join(format!("{prefix}errors.csv")), &eval.errors, Some(provenance))?;
    write_quantiles_csv(&dir.join(format!("{prefix}quantiles.csv")), &eval.stats, Some(provenance))
}

/// Everything a single training run produced.
pub struct TrainedRun {
    pub model: LocaModel,
    pub outcome: TrainOutcome,
    pub evaluation: Evaluation,
    pub noisy_evaluation: Option<Evaluation>,
    pub summary: RunSummary,
}

/// Trains one model on `train`, evaluates it on `test` (and on noisy test
/// inputs if configured) and writes all artifacts into `run_dir`.
pub fn train_and_evaluate(
    cfg: &ExperimentConfig,
    train_data: &Dataset,
    test_data: &Dataset,
    run_dir: &Path,
    threads: usize,
) -> Result<TrainedRun> {
    let provenance = cfg.provenance()?;
    let hash = cfg.hash()?;
    fs::create_dir_all(run_dir).map_err(|e| LocaError::io(run_dir, e))?;
    write_atomic(&run_dir.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    let mut model = init_model(cfg)?;
    info!(
        "training {} ({} parameters, kca = {}) for {} iterations",
        cfg.experiment.name(),
        model.params.parameter_count(),
        cfg.model.use_kca,
        cfg.training.iterations
    );
    let outcome = train(&mut model, train_data, &cfg.train_config()).stage("training")?;
    write_history_csv(&run_dir.join("history.csv"), &outcome.history, Some(&provenance))?;
    model.save(
        &run_dir.join("checkpoint.loca"),
        serde_json::json!({
            "experiment_hash": hash,
            "seed": cfg.seed,
            "iterations": cfg.training.iterations,
            "final_loss": outcome.final_loss(),
        }),
    )?;
    let evaluation = evaluate(&model, test_data, cfg.evaluation.squared, threads).stage("evaluation")?;
    write_evaluation(run_dir, "", &evaluation, &provenance)?;
    let noisy_evaluation = match cfg.evaluation.input_noise {
        Some(sigma) => {
            let noisy = noisy_inputs(test_data, sigma, cfg.seed)?;
            let e = evaluate(&model, &noisy, cfg.evaluation.squared, threads).stage("noisy evaluation")?;
            write_evaluation(run_dir, "noisy-", &e, &provenance)?;
            Some(e)
        }
        None => None,
    };
    let summary = RunSummary {
        experiment: cfg.experiment.name().into(),
        config_hash: hash,
        seed: cfg.seed,
        use_kca: cfg.model.use_kca,
        train_samples: train_data.len(),
        labels_per_sample: train_data.y.dim().1,
        test_samples: test_data.len(),
        iterations: cfg.training.iterations,
        final_loss: outcome.final_loss(),
        squared_metric: cfg.evaluation.squared,
        noise_increase_percent: noisy_evaluation
            .as_ref()
            .map(|n| 100.0 * (n.stats.mean / evaluation.stats.mean - 1.0)),
        test: evaluation.stats.clone(),
        noisy_test: noisy_evaluation.as_ref().map(|n| n.stats.clone()),
    };
    write_json(&run_dir.join("summary.json"), &summary)?;
    info!(
        "{}: median {:.4e}, mean {:.4e} over {} test samples",
        run_dir.display(),
        summary.test.median,
        summary.test.mean,
        summary.test.count
    );
    Ok(TrainedRun {
        model,
        outcome,
        evaluation,
        noisy_evaluation,
        summary,
    })
}

/// Mean errors of a with/without-KCA pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config_hash: String,
    pub seed: u64,
    pub with_kca_mean: f64,
    pub without_kca_mean: f64,
    /// `without / with`.
    pub ratio: f64,
}

/// Result of [`run_experiment`].
pub enum ExperimentOutcome {
    Single(RunSummary),
    Ablation {
        with_kca: RunSummary,
        without_kca: RunSummary,
        report: AblationReport,
    },
}

/// Runs a non-sweep experiment below `out`, caching datasets in `data_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, data_dir: &Path, threads: usize) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    if cfg.sweep.is_some() {
        return Err(LocaError::Config(format!(
            "{} describes a sweep; run it with the sweep command",
            cfg.experiment.name()
        )));
    }
    let (train_data, test_data) = generate_datasets(cfg, data_dir, threads)?;
    if cfg.experiment != ExperimentKind::DarcyAblation {
        let run = train_and_evaluate(cfg, &train_data, &test_data, out, threads)?;
        return Ok(ExperimentOutcome::Single(run.summary));
    }
    let mut with_cfg = cfg.clone();
    with_cfg.model.use_kca = true;
    let mut without_cfg = cfg.clone();
    without_cfg.model.use_kca = false;
    let with_kca = train_and_evaluate(&with_cfg, &train_data, &test_data, &out.join("with-kca"), threads)
        .stage("with-KCA run")?
        .summary;
    let without_kca = train_and_evaluate(&without_cfg, &train_data, &test_data, &out.join("without-kca"), threads)
        .stage("without-KCA run")?
        .summary;
    let report = AblationReport {
        config_hash: cfg.hash()?,
        seed: cfg.seed,
        with_kca_mean: with_kca.test.mean,
        without_kca_mean: without_kca.test.mean,
        ratio: without_kca.test.mean / with_kca.test.mean,
    };
    write_json(&out.join("ablation.json"), &report)?;
    Ok(ExperimentOutcome::Ablation {
        with_kca,
        without_kca,
        report,
    })
}

/// One row of the aggregated sweep table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub parameter: String,
    pub value: f64,
    pub runs: usize,
    pub failed: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

/// Collects the per-variant error files below `out` into `sweep.csv`.
///
/// For each swept value the per-sample errors of all successful seeds are
/// averaged sample-wise before the statistics are taken. Values with no
/// successful run get `NaN` statistics.
pub fn aggregate_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<SweepRow>> {
    let sweep = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| LocaError::Config("configuration has no [sweep] section".into()))?;
    let variants = cfg.sweep_variants()?;
    let mut rows = Vec::new();
    for (vi, &value) in sweep.values.iter().enumerate() {
        let mut sums: Vec<f64> = Vec::new();
        let mut counts: Vec<usize> = Vec::new();
        let (mut runs, mut failed) = (0, 0);
        for v in variants.iter().filter(|v| v.value_index == vi) {
            match read_errors_csv(&out.join(&v.dir_name).join("errors.csv")) {
                Ok(errors) => {
                    runs += 1;
                    if sums.is_empty() {
                        sums = vec![0.0; errors.len()];
                        counts = vec![0; errors.len()];
                    }
                    for (k, e) in errors.iter().enumerate().take(sums.len()) {
                        if let Some(e) = e {
                            sums[k] += e;
                            counts[k] += 1;
                        }
                    }
                }
                Err(_) => failed += 1,
            }
        }
        let averaged: Vec<f64> = sums
            .iter()
            .zip(&counts)
            .filter(|(_, &c)| c > 0)
            .map(|(s, &c)| s / c as f64)
            .collect();
        let stats = error_stats(&averaged).ok();
        let get = |f: fn(&ErrorStats) -> f64| stats.as_ref().map_or(f64::NAN, f);
        rows.push(SweepRow {
            parameter: sweep.parameter.name().into(),
            value,
            runs,
            failed,
            median: get(|s| s.median),
            q1: get(|s| s.q1),
            q3: get(|s| s.q3),
            mean: get(|s| s.mean),
            std: get(|s| s.std),
            min: get(|s| s.min),
            max: get(|s| s.max),
        });
    }
    let mut w = csv::Writer::from_writer(format!("# {}\n", cfg.provenance()?).into_bytes());
    for row in &rows {
        w.serialize(row).map_err(|e| LocaError::Data(format!("csv encoding: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| LocaError::Data(format!("csv encoding: {e}")))?;
    write_atomic(&out.join("sweep.csv"), &bytes)?;
    Ok(rows)
}

/// Runs every sweep variant in this process, sequentially, sharing one
/// dataset cache. Failed variants are logged and counted, not fatal.
pub fn run_sweep_in_process(cfg: &ExperimentConfig, out: &Path, threads: usize) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let data_dir = out.join("data");
    for v in cfg.sweep_variants()? {
        let result = generate_datasets(&v.config, &data_dir, threads).and_then(|(train_data, test_data)| {
            train_and_evaluate(&v.config, &train_data, &test_data, &out.join(&v.dir_name), threads)
        });
        if let Err(e) = result {
            log::error!("sweep variant {} failed: {e}", v.dir_name);
        }
    }
    aggregate_sweep(cfg, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(kind: ExperimentKind) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::preset(kind);
        cfg.train_data.samples = 6;
        cfg.test_data.samples = 4;
        cfg.training.batch_size = 3;
        cfg.training.iterations = 3;
        cfg.model.n = 8;
        cfg.model.lift = 8;
        cfg.model.q_net = MlpShape::new(1, 8);
        cfg.model.g_net = MlpShape::new(1, 8);
        cfg.model.f_net = MlpShape::new(1, 8);
        if let QuadratureSpec::GaussLegendre { q_per_dim } = &mut cfg.model.quadrature {
            *q_per_dim = 8;
        }
        if let GeneratorConfig::Darcy { grid, .. } = &mut cfg.train_data.generator {
            *grid = 8;
        }
        if let GeneratorConfig::Darcy { grid, .. } = &mut cfg.test_data.generator {
            *grid = 8;
        }
        if matches!(cfg.model.encoder, EncoderConfig::Scattering { j: 1, .. }) {
            cfg.model.sensor_grid = vec![8, 8];
            cfg.model.encoder = EncoderConfig::Scattering {
                j: 1,
                l: 2,
                m0: 2,
                grid: vec![8, 8],
            };
            cfg.train_data.label_fraction = 0.25;
        }
        if let Some(s) = &mut cfg.sweep {
            s.values.truncate(2);
            s.seeds.truncate(2);
        }
        cfg
    }

    #[test]
    fn presets_validate_and_round_trip() {
        for kind in ExperimentKind::ALL {
            let cfg = ExperimentConfig::preset(kind);
            cfg.validate().unwrap();
            let text = cfg.to_toml().unwrap();
            let back = ExperimentConfig::from_toml_str(&text).unwrap();
            assert_eq!(back, cfg, "{}", kind.name());
            assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
            assert_eq!(ExperimentKind::from_name(kind.name()), Some(kind));
        }
    }

    #[test]
    fn unknown_keys_and_versions_are_rejected() {
        let text = ExperimentConfig::preset(ExperimentKind::Antiderivative).to_toml().unwrap();
        let extra = text.replacen("seed = 0", "seed = 0\nbogus = 1", 1);
        assert!(matches!(ExperimentConfig::from_toml_str(&extra), Err(LocaError::Config(_))));
        let nested = text.replacen("[training]", "[training]\nbogus = 1", 1);
        assert!(ExperimentConfig::from_toml_str(&nested).is_err());
        let version = text.replacen("schema_version = 1", "schema_version = 7", 1);
        let e = ExperimentConfig::from_toml_str(&version).unwrap_err().to_string();
        assert!(e.contains("schema_version 7"), "{e}");
    }

    #[test]
    fn inconsistent_configs_are_rejected() {
        let mut cfg = ExperimentConfig::preset(ExperimentKind::Antiderivative);
        cfg.model.sensor_grid = vec![64];
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::preset(ExperimentKind::DarcyAblation);
        cfg.training.batch_size = 500;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::preset(ExperimentKind::AntiderivativeOod);
        cfg.sweep.as_mut().unwrap().values.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn output_dir_does_not_change_the_hash() {
        let a = ExperimentConfig::preset(ExperimentKind::Darcy);
        let mut b = a.clone();
        b.output_dir = Some("/elsewhere".into());
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.seed = 1;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }

    #[test]
    fn ood_sweep_has_nine_values() {
        let cfg = ExperimentConfig::preset(ExperimentKind::AntiderivativeOod);
        let variants = cfg.sweep_variants().unwrap();
        assert_eq!(variants.len(), 9 * 10);
        let v = &variants[10];
        assert_eq!(v.seed, 0);
        match &v.config.train_data.generator {
            GeneratorConfig::Antiderivative {
                prior: GpPrior::Fixed { length_scale, .. },
                ..
            } => assert_eq!(*length_scale, 0.2),
            other => panic!("{other:?}"),
        }
        assert_eq!(v.config.test_data, cfg.test_data);
    }

    #[test]
    fn single_run_writes_stamped_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(ExperimentKind::Antiderivative);
        let outcome = run_experiment(&cfg, dir.path(), &dir.path().join("data"), 1).unwrap();
        let ExperimentOutcome::Single(summary) = outcome else {
            panic!("expected a single run")
        };
        assert_eq!(summary.config_hash, cfg.hash().unwrap());
        for f in ["history.csv", "errors.csv", "quantiles.csv"] {
            let text = fs::read_to_string(dir.path().join(f)).unwrap();
            assert!(text.starts_with(&format!("# {}", cfg.provenance().unwrap())), "{f}");
        }
        assert_eq!(read_summary(&dir.path().join("summary.json")).unwrap(), summary);
        let model = LocaModel::load(&dir.path().join("checkpoint.loca")).unwrap();
        let test = load_or_generate(&dir.path().join("data"), &cfg.test_data, 1).unwrap();
        let again = evaluate(&model, &test, false, 2).unwrap();
        assert!((again.stats.mean - summary.test.mean).abs() <= 1e-12);
    }

    #[test]
    fn dataset_cache_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(ExperimentKind::Antiderivative);
        let a = load_or_generate(dir.path(), &cfg.train_data, 1).unwrap();
        let path = dataset_path(dir.path(), &cfg.train_data).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::remove_file(&path).unwrap();
        let b = load_or_generate(dir.path(), &cfg.train_data, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(fs::read(&path).unwrap(), bytes);
    }

    #[test]
    fn ablation_and_noise_reports() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(ExperimentKind::DarcyAblation);
        let ExperimentOutcome::Ablation { report, with_kca, without_kca } =
            run_experiment(&cfg, dir.path(), &dir.path().join("data"), 1).unwrap()
        else {
            panic!("expected an ablation")
        };
        assert!(with_kca.use_kca && !without_kca.use_kca);
        assert!((report.ratio - without_kca.test.mean / with_kca.test.mean).abs() < 1e-15);
        assert!(dir.path().join("ablation.json").exists());

        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(ExperimentKind::DarcyNoise);
        let ExperimentOutcome::Single(s) = run_experiment(&cfg, dir.path(), &dir.path().join("data"), 1).unwrap() else {
            panic!("expected a single run")
        };
        let noisy = s.noisy_test.as_ref().unwrap();
        let pct = s.noise_increase_percent.unwrap();
        assert!((pct - 100.0 * (noisy.mean / s.test.mean - 1.0)).abs() < 1e-9);
        assert!(dir.path().join("noisy-errors.csv").exists());
    }

    #[test]
    fn sweep_aggregates_one_row_per_value() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(ExperimentKind::AntiderivativeOod);
        let rows = run_sweep_in_process(&cfg, dir.path(), 1).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.runs == 2 && r.failed == 0 && r.median.is_finite()));
        let text = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
        assert_eq!(text.lines().count(), 1 + 1 + 2);
        let mut no_sweep = cfg.clone();
        no_sweep.sweep = None;
        assert!(aggregate_sweep(&no_sweep, dir.path()).is_err());
    }
}
