//! Mini-batch training, evaluation metrics and error statistics.

use std::path::Path;

use log::{debug, warn};
use ndarray::{ArrayView2, Axis};
use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::datagen::{derive_rng, parallel_indexed, Dataset};
use crate::error::{LocaError, Result};
use crate::model::LocaModel;
use crate::numerics::container::write_atomic;
use crate::numerics::{AdamConfig, AdamState, Matrix, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
    /// Log progress every this many iterations (0 disables).
    #[serde(default)]
    pub log_every: usize,
    /// Call the monitor of [`train_with_monitor`] every this many
    /// iterations (0 disables).
    #[serde(default)]
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn validate(&self, dataset_len: usize) -> Result<()> {
        if self.iterations == 0 {
            return Err(LocaError::Config("training needs at least one iteration".into()));
        }
        if self.batch_size == 0 || self.batch_size > dataset_len {
            return Err(LocaError::Config(format!(
                "batch size {} must lie in 1..={dataset_len}",
                self.batch_size
            )));
        }
        self.optimizer.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<HistoryRow>,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> f64 {
        self.history.last().map_or(f64::NAN, |r| r.loss)
    }

    /// Means of consecutive non-overlapping windows of the loss.
    pub fn window_means(&self, window: usize) -> Vec<f64> {
        self.history
            .chunks_exact(window.max(1))
            .map(|c| c.iter().map(|r| r.loss).sum::<f64>() / c.len() as f64)
            .collect()
    }

    /// False when some window mean rises more than `tolerance` (relative)
    /// above the previous one, which flags a diverging run.
    pub fn is_stable(&self, window: usize, tolerance: f64) -> bool {
        self.window_means(window)
            .windows(2)
            .all(|w| w[1] <= w[0] * (1.0 + tolerance))
    }
}

/// `(1/B) Σ_b Σ_ℓ |pred - truth|²` on the tape.
pub fn mse_loss_tape(tape: &mut Tape, pred: Var, truth: Var, batch: usize) -> Result<Var> {
    if tape.shape(pred) != tape.shape(truth) {
        return Err(LocaError::shape(
            "mse loss",
            format!("{:?} vs {:?}", tape.shape(pred), tape.shape(truth)),
        ));
    }
    let diff = tape.sub(pred, truth)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq)?;
    tape.scale(total, 1.0 / batch.max(1) as f64)
}

/// Plain form of [`mse_loss_tape`] for predictions stacked by sample.
pub fn mse_loss(pred: &[Matrix], truth: &[Matrix]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(LocaError::shape(
            "mse loss",
            format!("{} predictions for {} targets", pred.len(), truth.len()),
        ));
    }
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        if p.dim() != t.dim() {
            return Err(LocaError::shape("mse loss", format!("{:?} vs {:?}", p.dim(), t.dim())));
        }
        total += (p - t).mapv(|d| d * d).sum();
    }
    Ok(total / pred.len() as f64)
}

fn stack_targets(data: &Dataset, batch: &[usize]) -> Matrix {
    let views: Vec<ArrayView2<f64>> = batch.iter().map(|&i| data.outputs(i)).collect();
    ndarray::concatenate(Axis(0), &views).expect("equal channel counts")
}

fn record_batch_loss(
    tape: &mut Tape,
    model: &LocaModel,
    vars: &crate::model::ParamVars,
    features: &Matrix,
    data: &Dataset,
    batch: &[usize],
) -> Result<Var> {
    let feats = features.select(Axis(0), batch);
    let queries: Vec<ArrayView2<f64>> = batch.iter().map(|&i| data.queries(i)).collect();
    let pred = model.forward_tape(tape, vars, &feats, &queries)?;
    let truth = tape.constant(stack_targets(data, batch))?;
    mse_loss_tape(tape, pred, truth, batch.len())
}

/// Training loss of `batch`; `features` holds the encoded inputs of every
/// sample of `data`.
pub fn batch_loss(model: &LocaModel, features: &Matrix, data: &Dataset, batch: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = model.register_frozen(&mut tape)?;
    let loss = record_batch_loss(&mut tape, model, &vars, features, data, batch)?;
    Ok(tape.value(loss)[[0, 0]])
}

/// Loss of `batch` and its gradient for every parameter tensor, in
/// canonical tensor order.
pub fn batch_loss_and_gradients(
    model: &LocaModel,
    features: &Matrix,
    data: &Dataset,
    batch: &[usize],
) -> Result<(f64, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape)?;
    let loss = record_batch_loss(&mut tape, model, &vars, features, data, batch)?;
    let value = tape.value(loss)[[0, 0]];
    let mut grads = tape.backward(loss)?;
    Ok((value, vars.collect(&mut grads, &model.params)))
}

/// Reverse-mode against central-difference gradients for one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    /// `|g_ad - g_fd| / max(|g_fd|, 1e-8)` with Frobenius norms.
    pub relative_error: f64,
}

/// Compares the taped gradient of the batch loss with central differences
/// of step `h`, entry by entry over every parameter.
pub fn gradient_check(model: &LocaModel, data: &Dataset, batch: &[usize], h: f64) -> Result<Vec<TensorCheck>> {
    check_compatible(model, data)?;
    let features = model.encode_many((0..data.len()).map(|i| data.inputs(i)))?;
    let (_, analytic) = batch_loss_and_gradients(model, &features, data, batch)?;
    let mut probe = LocaModel::from_parts(model.config.clone(), model.params.clone())?;
    let names = model.params.tensor_names();
    let mut out = Vec::with_capacity(names.len());
    for (t, (name, g_ad)) in names.into_iter().zip(&analytic).enumerate() {
        let mut g_fd = Matrix::zeros(g_ad.dim());
        for idx in 0..g_ad.len() {
            let (r, c) = (idx / g_ad.ncols(), idx % g_ad.ncols());
            let orig = probe.params.tensors()[t][[r, c]];
            probe.params.tensors_mut()[t][[r, c]] = orig + h;
            let up = batch_loss(&probe, &features, data, batch)?;
            probe.params.tensors_mut()[t][[r, c]] = orig - h;
            let down = batch_loss(&probe, &features, data, batch)?;
            probe.params.tensors_mut()[t][[r, c]] = orig;
            g_fd[[r, c]] = (up - down) / (2.0 * h);
        }
        let diff = (g_ad - &g_fd).mapv(|v| v * v).sum().sqrt();
        let norm = g_fd.mapv(|v| v * v).sum().sqrt();
        out.push(TensorCheck {
            name,
            entries: g_ad.len(),
            relative_error: diff / norm.max(1e-8),
        });
    }
    Ok(out)
}

/// Runs the optimizer for `tcfg.iterations` steps on `data`.
///
/// Each iteration draws a batch of distinct samples from an
/// iteration-indexed generator, so batches are independent across
/// iterations and the run is reproducible from the seed.
pub fn train(model: &mut LocaModel, data: &Dataset, tcfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_monitor(model, data, tcfg, |_, _| Ok(()))
}

/// [`train`] with a callback receiving the 1-based iteration count and the
/// current model every `tcfg.eval_every` iterations.
pub fn train_with_monitor(
    model: &mut LocaModel,
    data: &Dataset,
    tcfg: &TrainConfig,
    mut monitor: impl FnMut(usize, &LocaModel) -> Result<()>,
) -> Result<TrainOutcome> {
    tcfg.validate(data.len())?;
    check_compatible(model, data)?;
    let features = model.encode_many((0..data.len()).map(|i| data.inputs(i)))?;
    let mut adam = AdamState::new(tcfg.optimizer, model.params.tensors());
    let mut outcome = TrainOutcome {
        history: Vec::with_capacity(tcfg.iterations),
    };
    for it in 0..tcfg.iterations {
        let mut rng = derive_rng(tcfg.seed, it, "batch");
        let batch: Vec<usize> = if tcfg.batch_size == data.len() {
            (0..data.len()).collect()
        } else {
            sample_indices(&mut rng, data.len(), tcfg.batch_size).into_vec()
        };
        let (loss_value, grads) = batch_loss_and_gradients(model, &features, data, &batch).map_err(|e| match e {
            e @ LocaError::NumericDomain(_) => LocaError::NumericAbort {
                iteration: it,
                diagnostics: e.to_string(),
            },
            e => e,
        })?;
        if let Some(bad) = grads.iter().position(|g| !g.iter().all(|v| v.is_finite())) {
            return Err(LocaError::NumericAbort {
                iteration: it,
                diagnostics: format!("non-finite gradient in tensor {}", model.params.tensor_names()[bad]),
            });
        }
        let lr = adam.current_lr();
        adam.update(&mut model.params.tensors_mut(), &grads)?;
        if !model.params.all_finite() {
            return Err(LocaError::NumericAbort {
                iteration: it,
                diagnostics: format!("parameters became non-finite (loss {loss_value:e}, lr {lr:e})"),
            });
        }
        outcome.history.push(HistoryRow {
            iteration: it,
            loss: loss_value,
            lr,
        });
        if tcfg.log_every > 0 && (it + 1) % tcfg.log_every == 0 {
            debug!("iteration {}: loss {loss_value:.6e}, lr {lr:.3e}", it + 1);
        }
        if tcfg.eval_every > 0 && (it + 1) % tcfg.eval_every == 0 {
            monitor(it + 1, model)?;
        }
    }
    if !outcome.is_stable(500, 0.1) {
        warn!("loss running mean increased across a 500-iteration window");
    }
    Ok(outcome)
}

/// Relative L2 error over all queries and channels of one sample; the
/// squared variant returns the ratio of squared norms.
pub fn relative_l2(pred: &Matrix, truth: &Matrix, squared: bool) -> Result<f64> {
    if pred.dim() != truth.dim() {
        return Err(LocaError::shape("relative L2", format!("{:?} vs {:?}", pred.dim(), truth.dim())));
    }
    let num: f64 = (pred - truth).mapv(|d| d * d).sum();
    let den: f64 = truth.mapv(|d| d * d).sum();
    if den == 0.0 {
        return Err(LocaError::Data("relative error undefined for an all-zero target".into()));
    }
    Ok(if squared { num / den } else { (num / den).sqrt() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub count: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    /// Most extreme values inside the 1.5 IQR fences.
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn error_stats(errors: &[f64]) -> Result<ErrorStats> {
    if errors.is_empty() {
        return Err(LocaError::EmptyInput("error statistics of no samples".into()));
    }
    if !errors.iter().all(|e| e.is_finite()) {
        return Err(LocaError::NumericDomain("error statistics input".into()));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (q1, median, q3) = (quantile(&sorted, 0.25), quantile(&sorted, 0.5), quantile(&sorted, 0.75));
    let iqr = q3 - q1;
    let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside: Vec<f64> = sorted.iter().copied().filter(|e| *e >= lo_fence && *e <= hi_fence).collect();
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let std = if errors.len() > 1 {
        (errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(ErrorStats {
        count: errors.len(),
        median,
        q1,
        q3,
        whisker_low: inside.first().copied().unwrap_or(median),
        whisker_high: inside.last().copied().unwrap_or(median),
        outliers: sorted.iter().copied().filter(|e| *e < lo_fence || *e > hi_fence).collect(),
        mean,
        std,
        min: sorted[0],
        max: sorted[sorted.len() - 1],
    })
}

/// Per-sample errors (in dataset order) and their statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// `None` where the metric is undefined (all-zero target).
    pub errors: Vec<Option<f64>>,
    pub stats: ErrorStats,
}

impl Evaluation {
    pub fn defined_errors(&self) -> Vec<f64> {
        self.errors.iter().flatten().copied().collect()
    }
}

/// Config error unless `data` has the sensor grid and channel counts the
/// model was built for.
pub fn check_compatible(model: &LocaModel, data: &Dataset) -> Result<()> {
    let c = &model.config;
    let (_, _, d_u) = data.u.dim();
    let (_, _, d_y) = data.y.dim();
    let (_, _, d_s) = data.s.dim();
    if data.sensor_grid() != c.sensor_grid || d_u != c.d_u || d_y != c.d_y || d_s != c.d_s {
        return Err(LocaError::Config(format!(
            "dataset (grid {:?}, d_u {d_u}, d_y {d_y}, d_s {d_s}) does not match the model (grid {:?}, d_u {}, d_y {}, d_s {})",
            data.sensor_grid(),
            c.sensor_grid,
            c.d_u,
            c.d_y,
            c.d_s
        )));
    }
    Ok(())
}

/// Samples predicted per tape during evaluation.
const EVAL_CHUNK: usize = 50;

/// Predictions for every sample of `data` at its stored query set.
pub fn predict_dataset(model: &LocaModel, data: &Dataset, threads: usize) -> Result<Vec<Matrix>> {
    let chunks = data.len().div_ceil(EVAL_CHUNK);
    let per_chunk = parallel_indexed(chunks, threads, |c| {
        let idx: Vec<usize> = (c * EVAL_CHUNK..((c + 1) * EVAL_CHUNK).min(data.len())).collect();
        let feats = model.encode_many(idx.iter().map(|&i| data.inputs(i)))?;
        let queries: Vec<ArrayView2<f64>> = idx.iter().map(|&i| data.queries(i)).collect();
        let mut tape = Tape::new();
        let vars = model.register_frozen(&mut tape)?;
        let out = model.forward_tape(&mut tape, &vars, &feats, &queries)?;
        let stacked = tape.value(out);
        let mut preds = Vec::with_capacity(idx.len());
        let mut row = 0;
        for q in &queries {
            preds.push(stacked.slice(ndarray::s![row..row + q.nrows(), ..]).to_owned());
            row += q.nrows();
        }
        Ok(preds)
    })?;
    Ok(per_chunk.into_iter().flatten().collect())
}

/// Relative errors of `model` on every sample at that sample's full query
/// set. Never mutates the model.
pub fn evaluate(model: &LocaModel, data: &Dataset, squared: bool, threads: usize) -> Result<Evaluation> {
    check_compatible(model, data)?;
    let preds = predict_dataset(model, data, threads)?;
    let mut errors = Vec::with_capacity(preds.len());
    for (i, p) in preds.iter().enumerate() {
        match relative_l2(p, &data.outputs(i).to_owned(), squared) {
            Ok(e) => errors.push(Some(e)),
            Err(LocaError::Data(msg)) => {
                warn!("sample {i} excluded from metrics: {msg}");
                errors.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    let defined: Vec<f64> = errors.iter().flatten().copied().collect();
    Ok(Evaluation {
        stats: error_stats(&defined)?,
        errors,
    })
}

/// Builds CSV text, optionally led by a `# ...` provenance comment line.
fn csv_bytes(
    provenance: Option<&str>,
    write: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>,
) -> Result<Vec<u8>> {
    let mut lead = Vec::new();
    if let Some(p) = provenance {
        lead = format!("# {p}\n").into_bytes();
    }
    let mut w = csv::Writer::from_writer(lead);
    write(&mut w).map_err(|e| LocaError::Data(format!("csv encoding: {e}")))?;
    w.into_inner()
        .map_err(|e| LocaError::Data(format!("csv encoding: {e}")))
}

/// `iteration,loss,lr` per row.
pub fn write_history_csv(path: &Path, history: &[HistoryRow], provenance: Option<&str>) -> Result<()> {
    let bytes = csv_bytes(provenance, |w| {
        for row in history {
            w.serialize(row)?;
        }
        Ok(())
    })?;
    write_atomic(path, &bytes)
}

/// `sample,error` per row; undefined errors are left empty.
pub fn write_errors_csv(path: &Path, errors: &[Option<f64>], provenance: Option<&str>) -> Result<()> {
    let bytes = csv_bytes(provenance, |w| {
        w.write_record(["sample", "error"])?;
        for (i, e) in errors.iter().enumerate() {
            w.write_record([i.to_string(), e.map(|v| format!("{v:.17e}")).unwrap_or_default()])?;
        }
        Ok(())
    })?;
    write_atomic(path, &bytes)
}

/// Boxplot-ready quantile file: one `statistic,value` row per field.
pub fn write_quantiles_csv(path: &Path, stats: &ErrorStats, provenance: Option<&str>) -> Result<()> {
    let rows = [
        ("min", stats.min),
        ("whisker_low", stats.whisker_low),
        ("q1", stats.q1),
        ("median", stats.median),
        ("q3", stats.q3),
        ("whisker_high", stats.whisker_high),
        ("max", stats.max),
        ("mean", stats.mean),
        ("std", stats.std),
        ("outliers", stats.outliers.len() as f64),
    ];
    let bytes = csv_bytes(provenance, |w| {
        w.write_record(["statistic", "value"])?;
        for (name, v) in rows {
            w.write_record([name.to_string(), format!("{v:.17e}")])?;
        }
        Ok(())
    })?;
    write_atomic(path, &bytes)
}

pub fn read_errors_csv(path: &Path) -> Result<Vec<Option<f64>>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| LocaError::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| LocaError::Format {
                path: path.to_path_buf(),
                detail: e.to_string(),
            })?;
            let field = rec.get(1).unwrap_or("");
            if field.is_empty() {
                Ok(None)
            } else {
                field.parse().map(Some).map_err(|e| LocaError::Format {
                    path: path.to_path_buf(),
                    detail: format!("error value {field:?}: {e}"),
                })
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, DatasetConfig, GeneratorConfig, GpPrior};
    use crate::kca::{BoxDomain, KernelConfig};
    use crate::model::{EncoderConfig, LocaConfig, QuadratureSpec};
    use crate::numerics::{MlpShape, SeededRng};
    use ndarray::array;
    use rand::SeedableRng;

    fn tiny_dataset(samples: usize) -> Dataset {
        generate(
            &DatasetConfig {
                generator: GeneratorConfig::Antiderivative {
                    fine_points: 500,
                    sensors: 100,
                    prior: GpPrior::Fixed {
                        length_scale: 0.2,
                        amplitude: 1.0,
                    },
                    jitter: 1e-10,
                },
                samples,
                label_fraction: 1.0,
                seed: 3,
                noise: None,
            },
            1,
        )
        .unwrap()
    }

    fn small_model(seed: u64) -> LocaModel {
        let cfg = LocaConfig {
            n: 20,
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
            q_net: MlpShape { depth: 2, width: 100 },
            g_net: MlpShape { depth: 2, width: 100 },
            f_net: MlpShape { depth: 1, width: 500 },
            use_kca: true,
            quadrature: QuadratureSpec::GaussLegendre { q_per_dim: 100 },
            kernel: KernelConfig::default(),
        };
        LocaModel::new(cfg, &mut SeededRng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn mse_reference_values() {
        let t = vec![Matrix::from_elem((100, 1), 0.3)];
        assert_eq!(mse_loss(&t, &t).unwrap(), 0.0);
        let p = vec![&t[0] + 1.0];
        assert!((mse_loss(&p, &t).unwrap() - 100.0).abs() < 1e-12);
    }

    #[test]
    fn mse_gradient_is_scaled_residual() {
        let pred = array![[1.0, 2.0], [0.5, -1.0]];
        let truth = array![[0.0, 2.5], [0.5, 1.0]];
        let mut tape = Tape::new();
        let p = tape.leaf(pred.clone()).unwrap();
        let t = tape.constant(truth.clone()).unwrap();
        let loss = mse_loss_tape(&mut tape, p, t, 4).unwrap();
        let g = tape.backward(loss).unwrap();
        let expected = (&pred - &truth) * 2.0 / 4.0;
        assert_eq!(g.get(p).unwrap(), &expected);
    }

    #[test]
    fn relative_l2_reference_values() {
        let t = array![[1.0], [-2.0], [0.5]];
        assert_eq!(relative_l2(&t, &t, false).unwrap(), 0.0);
        assert!((relative_l2(&Matrix::zeros((3, 1)), &t, false).unwrap() - 1.0).abs() < 1e-15);
        assert!((relative_l2(&(&t * 2.0), &t, false).unwrap() - 1.0).abs() < 1e-15);
        assert!((relative_l2(&(&t * 3.0), &t, true).unwrap() - 4.0).abs() < 1e-14);
        assert!(matches!(relative_l2(&t, &Matrix::zeros((3, 1)), false), Err(LocaError::Data(_))));
    }

    #[test]
    fn quartiles_and_outliers() {
        let s = error_stats(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!((s.median, s.q1, s.q3), (3.0, 2.0, 4.0));
        let c = error_stats(&[0.2; 7]).unwrap();
        assert_eq!(c.q3 - c.q1, 0.0);
        assert!(c.outliers.is_empty());
        let fixture = [0.008, 0.012, 0.015, 0.017, 0.019, 0.022, 0.041];
        let f = error_stats(&fixture).unwrap();
        assert_eq!((f.min, f.max), (0.008, 0.041));
        assert_eq!(f.outliers, vec![0.041]);
        assert_eq!(f.whisker_high, 0.022);
        assert!(error_stats(&[]).is_err());
    }

    #[test]
    fn overfits_a_single_sample() {
        let data = tiny_dataset(1);
        let mut model = small_model(1);
        let tcfg = TrainConfig {
            batch_size: 1,
            iterations: 2000,
            optimizer: AdamConfig::default(),
            seed: 0,
            log_every: 0,
            eval_every: 0,
        };
        let out = train(&mut model, &data, &tcfg).unwrap();
        assert_eq!(out.history.len(), 2000);
        assert!(out.final_loss() <= 1e-4, "final loss {}", out.final_loss());
        let before = model.params.fingerprint();
        let eval = evaluate(&model, &data, false, 1).unwrap();
        assert_eq!(model.params.fingerprint(), before);
        assert_eq!(eval.errors.len(), 1);
        assert!(eval.stats.median <= 1e-2, "{}", eval.stats.median);
    }

    #[test]
    fn training_is_deterministic() {
        let data = tiny_dataset(8);
        let tcfg = TrainConfig {
            batch_size: 4,
            iterations: 30,
            optimizer: AdamConfig::default(),
            seed: 9,
            log_every: 0,
            eval_every: 0,
        };
        let mut a = small_model(2);
        let mut b = small_model(2);
        let ha = train(&mut a, &data, &tcfg).unwrap();
        let hb = train(&mut b, &data, &tcfg).unwrap();
        assert_eq!(ha.final_loss().to_bits(), hb.final_loss().to_bits());
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn invalid_batch_size() {
        let data = tiny_dataset(2);
        let mut model = small_model(0);
        let tcfg = TrainConfig {
            batch_size: 3,
            iterations: 1,
            optimizer: AdamConfig::default(),
            seed: 0,
            log_every: 0,
            eval_every: 0,
        };
        assert!(matches!(train(&mut model, &data, &tcfg), Err(LocaError::Config(_))));
    }

    #[test]
    fn csv_outputs_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let errs = vec![Some(0.25), None, Some(1e-3)];
        let p = dir.path().join("errors.csv");
        write_errors_csv(&p, &errs, Some("config_hash=abc seed=1")).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("# config_hash=abc"));
        assert_eq!(read_errors_csv(&p).unwrap(), errs);
        let stats = error_stats(&[0.25, 1e-3]).unwrap();
        write_quantiles_csv(&dir.path().join("q.csv"), &stats, None).unwrap();
        let history = [HistoryRow { iteration: 0, loss: 1.5, lr: 1e-3 }];
        let h = dir.path().join("h.csv");
        write_history_csv(&h, &history, None).unwrap();
        let text = std::fs::read_to_string(h).unwrap();
        assert!(text.starts_with("iteration,loss,lr"));
    }
}
