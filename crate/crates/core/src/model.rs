//! The full operator model: input encoder, feature network, score network,
//! kernel-coupled attention and the per-channel expectation that produces
//! predictions.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{fourier_project, positional_encode_rows, PositionalEncodingConfig, SpectralEncoderConfig};
use crate::error::{LocaError, Result};
use crate::kca::{
    coupling_kernel_tape, gauss_legendre_rule, kca_transform_tape, AttentionWeights, BoxDomain,
    KernelConfig, KernelVars, QuadratureRule,
};
use crate::numerics::{
    mlp_forward, sha256_hex, Container, Gradients, Matrix, MlpParams, MlpShape, MlpVars, NamedArray,
    RowBlock, Tape, Var,
};
use crate::scattering::{build_filterbank, resample_linear, Filterbank, ScatteringConfig};

/// How input functions are turned into a fixed-width vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EncoderConfig {
    /// Scattering coefficients on `grid`; 1D sensor data on a different
    /// number of points is linearly resampled onto it first.
    Scattering {
        j: usize,
        l: usize,
        m0: usize,
        grid: Vec<usize>,
    },
    /// Lowest `d` real Fourier coefficients of the sensor values.
    Fourier { d: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum QuadratureSpec {
    /// One global tensor-product rule on the query domain.
    GaussLegendre { q_per_dim: usize },
    /// The queries of each sample double as equal-weight integration nodes.
    MonteCarlo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocaConfig {
    /// Number of latent features.
    pub n: usize,
    /// Width of the lifted query space.
    pub lift: usize,
    /// Positional-encoding coefficients per query dimension.
    pub h: usize,
    /// Lowest positional-encoding octave; 0 keeps the unit box faces apart.
    #[serde(default)]
    pub encoding_first_octave: u32,
    pub d_y: usize,
    pub d_u: usize,
    pub d_s: usize,
    /// Shape of the fixed sensor grid (row-major).
    pub sensor_grid: Vec<usize>,
    pub domain: BoxDomain,
    pub encoder: EncoderConfig,
    pub q_net: MlpShape,
    pub g_net: MlpShape,
    pub f_net: MlpShape,
    /// Smooth the scores with the coupling kernel before the softmax.
    pub use_kca: bool,
    pub quadrature: QuadratureSpec,
    pub kernel: KernelConfig,
}

impl LocaConfig {
    pub fn positional_encoding(&self) -> Result<PositionalEncodingConfig> {
        PositionalEncodingConfig::with_first_octave(self.h, self.d_y, self.encoding_first_octave)
    }

    pub fn sensor_count(&self) -> usize {
        self.sensor_grid.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(LocaError::Config(m));
        if self.n == 0 || self.lift == 0 || self.d_s == 0 || self.d_u == 0 {
            return err("n, lift, d_s and d_u must be positive".into());
        }
        self.positional_encoding()?;
        self.domain.validate()?;
        if self.domain.dim() != self.d_y {
            return err(format!(
                "query domain has {} dimensions, d_y = {}",
                self.domain.dim(),
                self.d_y
            ));
        }
        if self.sensor_grid.is_empty() || self.sensor_count() == 0 {
            return err("sensor grid is empty".into());
        }
        if let QuadratureSpec::GaussLegendre { q_per_dim } = self.quadrature {
            if q_per_dim == 0 {
                return err("quadrature needs at least one node per dimension".into());
            }
        }
        Ok(())
    }

    /// Canonical text form, used for hashing and checkpoint headers.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LocaError::Config(format!("serializing model config: {e}")))
    }
}

enum Encoder {
    Scattering {
        bank: Box<Filterbank>,
        resample_to: Option<usize>,
    },
    Fourier(SpectralEncoderConfig),
}

impl Encoder {
    fn build(cfg: &LocaConfig) -> Result<Self> {
        match &cfg.encoder {
            EncoderConfig::Scattering { j, l, m0, grid } => {
                if grid.len() != cfg.sensor_grid.len() {
                    return Err(LocaError::Config(format!(
                        "scattering grid {grid:?} and sensor grid {:?} differ in rank",
                        cfg.sensor_grid
                    )));
                }
                let resample_to = if *grid == cfg.sensor_grid {
                    None
                } else if grid.len() == 1 {
                    Some(grid[0])
                } else {
                    return Err(LocaError::Config(format!(
                        "2D sensor grid {:?} must match the scattering grid {grid:?}",
                        cfg.sensor_grid
                    )));
                };
                let bank = build_filterbank(&ScatteringConfig {
                    j: *j,
                    l: *l,
                    m0: *m0,
                    input_shape: grid.clone(),
                })?;
                Ok(Self::Scattering {
                    bank: Box::new(bank),
                    resample_to,
                })
            }
            EncoderConfig::Fourier { d } => {
                let spectral = SpectralEncoderConfig { d: *d };
                // surface an unresolvable mode count now rather than mid-training
                fourier_project(&vec![0.0; cfg.sensor_count()], &cfg.sensor_grid, &spectral)?;
                Ok(Self::Fourier(spectral))
            }
        }
    }

    fn width(&self, d_u: usize) -> usize {
        match self {
            Self::Scattering { bank, .. } => bank.output_width() * d_u,
            Self::Fourier(cfg) => cfg.d * d_u,
        }
    }

    /// `u` holds one row per sensor and one column per input channel.
    fn encode(&self, u: ArrayView2<f64>, grid: &[usize]) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for channel in u.columns() {
            let values = channel.to_vec();
            match self {
                Self::Scattering { bank, resample_to } => {
                    let signal = match resample_to {
                        Some(len) => resample_linear(&values, *len)?,
                        None => values,
                    };
                    out.extend(bank.scatter(&signal)?);
                }
                Self::Fourier(cfg) => out.extend(fourier_project(&values, grid, cfg)?),
            }
        }
        Ok(out)
    }
}

/// Trainable tensors. The kernel log-parameters are `1 x 1` matrices so
/// that every tensor can be handled uniformly by the optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct LocaParams {
    pub q: MlpParams,
    pub g: MlpParams,
    pub f: MlpParams,
    pub log_gamma: Matrix,
    pub log_beta: Matrix,
}

impl LocaParams {
    pub fn kernel(&self, trainable: bool) -> KernelConfig {
        KernelConfig {
            log_gamma: self.log_gamma[[0, 0]],
            log_beta: self.log_beta[[0, 0]],
            trainable,
        }
    }

    /// All tensors in canonical order: q, g, f layers (weight, bias), then
    /// `log_gamma`, `log_beta`.
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out: Vec<&Matrix> = self.q.tensors().chain(self.g.tensors()).chain(self.f.tensors()).collect();
        out.push(&self.log_gamma);
        out.push(&self.log_beta);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = self
            .q
            .tensors_mut()
            .chain(self.g.tensors_mut())
            .chain(self.f.tensors_mut())
            .collect();
        out.push(&mut self.log_gamma);
        out.push(&mut self.log_beta);
        out
    }

    /// Names matching [`tensors`](Self::tensors), used in checkpoints.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (net, mlp) in [("q", &self.q), ("g", &self.g), ("f", &self.f)] {
            for idx in 0..mlp.layers.len() {
                names.push(format!("{net}.{idx}.weight"));
                names.push(format!("{net}.{idx}.bias"));
            }
        }
        names.push("kernel.log_gamma".into());
        names.push("kernel.log_beta".into());
        names
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// SHA-256 over the raw little-endian bytes of every tensor.
    pub fn fingerprint(&self) -> String {
        let mut bytes = Vec::new();
        for t in self.tensors() {
            for v in t.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        sha256_hex(&bytes)
    }
}

/// Tape handles of every parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub q: MlpVars,
    pub g: MlpVars,
    pub f: MlpVars,
    pub kernel: KernelVars,
}

impl ParamVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.q.vars().chain(self.g.vars()).chain(self.f.vars()).collect();
        out.push(self.kernel.log_gamma);
        out.push(self.kernel.log_beta);
        out
    }

    /// Gradients in canonical tensor order; tensors the loss does not depend
    /// on get zeros.
    pub fn collect(&self, grads: &mut Gradients, params: &LocaParams) -> Vec<Matrix> {
        self.vars()
            .into_iter()
            .zip(params.tensors())
            .map(|(v, t)| grads.take(v).unwrap_or_else(|| Matrix::zeros(t.dim())))
            .collect()
    }
}

pub struct LocaModel {
    pub config: LocaConfig,
    pub params: LocaParams,
    encoder: Encoder,
    encoding: PositionalEncodingConfig,
    rule: Option<QuadratureRule>,
    encoded_nodes: Option<Matrix>,
}

impl std::fmt::Debug for LocaModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LocaModel")
            .field("config", &self.config)
            .field("parameters", &self.params.parameter_count())
            .finish()
    }
}

impl LocaModel {
    /// Builds a model with Glorot-initialized networks and the configured
    /// initial kernel parameters.
    pub fn new<R: Rng + ?Sized>(config: LocaConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::build(&config)?;
        let pe = config.positional_encoding()?.width();
        let feats = config.n * config.d_s;
        let params = LocaParams {
            q: MlpParams::glorot(rng, pe, config.q_net, config.lift)?,
            g: MlpParams::glorot(rng, pe, config.g_net, feats)?,
            f: MlpParams::glorot(rng, encoder.width(config.d_u), config.f_net, feats)?,
            log_gamma: Matrix::from_elem((1, 1), config.kernel.log_gamma),
            log_beta: Matrix::from_elem((1, 1), config.kernel.log_beta),
        };
        Self::assemble(config, params, encoder)
    }

    /// Wraps existing parameters after checking them against `config`.
    pub fn from_parts(config: LocaConfig, params: LocaParams) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::build(&config)?;
        Self::assemble(config, params, encoder)
    }

    fn assemble(config: LocaConfig, params: LocaParams, encoder: Encoder) -> Result<Self> {
        let encoding = config.positional_encoding()?;
        let feats = config.n * config.d_s;
        let expect = |mlp: &MlpParams, shape: MlpShape, input: usize, output: usize, name: &str| {
            let widths = shape.widths(input, output);
            let actual: Vec<usize> = mlp
                .layers
                .iter()
                .map(|l| l.weight.nrows())
                .chain(mlp.layers.last().map(|l| l.weight.ncols()))
                .collect();
            let biases_ok = mlp.layers.iter().all(|l| l.bias.dim() == (1, l.weight.ncols()));
            if actual != widths || !biases_ok {
                return Err(LocaError::Config(format!(
                    "{name} network has widths {actual:?}, config implies {widths:?}"
                )));
            }
            Ok(())
        };
        expect(&params.q, config.q_net, encoding.width(), config.lift, "q")?;
        expect(&params.g, config.g_net, encoding.width(), feats, "g")?;
        expect(&params.f, config.f_net, encoder.width(config.d_u), feats, "f")?;
        if params.log_gamma.dim() != (1, 1) || params.log_beta.dim() != (1, 1) {
            return Err(LocaError::Config("kernel parameters must be scalars".into()));
        }
        if !params.all_finite() {
            return Err(LocaError::NumericDomain("model parameters".into()));
        }
        let (rule, encoded_nodes) = match (&config.quadrature, config.use_kca) {
            (QuadratureSpec::GaussLegendre { q_per_dim }, true) => {
                let rule = gauss_legendre_rule(*q_per_dim, &config.domain)?;
                let enc = positional_encode_rows(&rule.nodes, &encoding)?;
                (Some(rule), Some(enc))
            }
            _ => (None, None),
        };
        Ok(Self {
            config,
            params,
            encoder,
            encoding,
            rule,
            encoded_nodes,
        })
    }

    /// Width of the encoder output `𝒟(u)`.
    pub fn encoder_width(&self) -> usize {
        self.encoder.width(self.config.d_u)
    }

    pub fn quadrature_rule(&self) -> Option<&QuadratureRule> {
        self.rule.as_ref()
    }

    /// Encoder features of one input function given as `m x d_u` sensor values.
    pub fn encode(&self, u: ArrayView2<f64>) -> Result<Vec<f64>> {
        if u.dim() != (self.config.sensor_count(), self.config.d_u) {
            return Err(LocaError::shape(
                "encode",
                format!(
                    "input {:?}, expected {}x{}",
                    u.dim(),
                    self.config.sensor_count(),
                    self.config.d_u
                ),
            ));
        }
        self.encoder.encode(u, &self.config.sensor_grid)
    }

    /// Encoder features for a batch of inputs (`N` blocks of `m x d_u`), one
    /// row per input.
    pub fn encode_many<'a>(&self, inputs: impl IntoIterator<Item = ArrayView2<'a, f64>>) -> Result<Matrix> {
        let rows: Vec<Vec<f64>> = inputs.into_iter().map(|u| self.encode(u)).collect::<Result<_>>()?;
        let width = self.encoder_width();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Array2::from_shape_vec((flat.len() / width.max(1), width), flat)
            .map_err(|e| LocaError::shape("encode_many", e.to_string()))
    }

    /// `v(u) = f(𝒟(u))` reshaped to `n x d_s`.
    pub fn encode_input(&self, u: ArrayView2<f64>) -> Result<Matrix> {
        let feats = Matrix::from_shape_vec((1, self.encoder_width()), self.encode(u)?)
            .expect("encoder width");
        let v = self.params.f.forward(&feats)?;
        Ok(Matrix::from_shape_vec((self.config.n, self.config.d_s), v.into_raw_vec_and_offset().0)
            .expect("n * d_s outputs"))
    }

    pub fn register(&self, tape: &mut Tape) -> Result<ParamVars> {
        Ok(ParamVars {
            q: self.params.q.register(tape)?,
            g: self.params.g.register(tape)?,
            f: self.params.f.register(tape)?,
            kernel: self.params.kernel(self.config.kernel.trainable).register(tape)?,
        })
    }

    pub fn register_frozen(&self, tape: &mut Tape) -> Result<ParamVars> {
        Ok(ParamVars {
            q: self.params.q.register_frozen(tape)?,
            g: self.params.g.register_frozen(tape)?,
            f: self.params.f.register_frozen(tape)?,
            kernel: self.params.kernel(false).register(tape)?,
        })
    }

    /// Attention weights for every row of `queries`, a `P x (n * d_s)` tape
    /// value. `queries` must already be positionally encoded.
    fn attention_tape(&self, tape: &mut Tape, vars: &ParamVars, encoded: &Matrix) -> Result<Var> {
        let e = tape.constant(encoded.clone())?;
        let scores = if !self.config.use_kca {
            mlp_forward(tape, &vars.g, e)?
        } else {
            let lifted = mlp_forward(tape, &vars.q, e)?;
            match (&self.rule, &self.encoded_nodes) {
                (Some(rule), Some(nodes)) => {
                    let en = tape.constant(nodes.clone())?;
                    let lifted_nodes = mlp_forward(tape, &vars.q, en)?;
                    let g_nodes = mlp_forward(tape, &vars.g, en)?;
                    let kappa = coupling_kernel_tape(tape, lifted, Some(lifted_nodes), &rule.weights, &vars.kernel)?;
                    kca_transform_tape(tape, g_nodes, kappa, &rule.weights)?
                }
                _ => {
                    let p = encoded.nrows();
                    let weights = vec![self.config.domain.volume() / p as f64; p];
                    let g_nodes = mlp_forward(tape, &vars.g, e)?;
                    let kappa = coupling_kernel_tape(tape, lifted, None, &weights, &vars.kernel)?;
                    kca_transform_tape(tape, g_nodes, kappa, &weights)?
                }
            }
        };
        tape.softmax_groups(scores, self.config.d_s)
    }

    /// Records the forward pass for a batch.
    ///
    /// `features` has one encoder-feature row per sample and `queries[b]`
    /// holds the `P_b x d_y` query points of sample `b`. Samples with
    /// identical query sets share one set of attention weights. Returns the
    /// predictions of all samples stacked in batch order, `(Σ P_b) x d_s`.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        features: &Matrix,
        queries: &[ArrayView2<f64>],
    ) -> Result<Var> {
        if features.nrows() != queries.len() || features.ncols() != self.encoder_width() {
            return Err(LocaError::shape(
                "forward",
                format!(
                    "{}x{} features for {} query sets, encoder width {}",
                    features.nrows(),
                    features.ncols(),
                    queries.len(),
                    self.encoder_width()
                ),
            ));
        }
        if queries.is_empty() {
            return Err(LocaError::EmptyInput("forward on an empty batch".into()));
        }
        for q in queries {
            if q.ncols() != self.config.d_y || q.nrows() == 0 {
                return Err(LocaError::shape(
                    "forward",
                    format!("query set {:?} for d_y = {}", q.dim(), self.config.d_y),
                ));
            }
        }

        let fv = tape.constant(features.clone())?;
        let v = mlp_forward(tape, &vars.f, fv)?;

        // distinct query sets, keyed by their exact bit patterns
        let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut unique: Vec<usize> = Vec::new();
        let mut owner = Vec::with_capacity(queries.len());
        for (b, q) in queries.iter().enumerate() {
            let key: Vec<u64> = q.iter().map(|v| v.to_bits()).collect();
            let idx = *seen.entry(key).or_insert_with(|| {
                unique.push(b);
                unique.len() - 1
            });
            owner.push(idx);
        }

        let mut starts = Vec::with_capacity(unique.len());
        let mut offset = 0;
        for &b in &unique {
            starts.push(offset);
            offset += queries[b].nrows();
        }
        let phi = match (&self.config.quadrature, self.config.use_kca) {
            (QuadratureSpec::MonteCarlo, true) => {
                // every query set is its own integration node set
                let parts = unique
                    .iter()
                    .map(|&b| {
                        let enc = positional_encode_rows(&queries[b].to_owned(), &self.encoding)?;
                        self.attention_tape(tape, vars, &enc)
                    })
                    .collect::<Result<Vec<_>>>()?;
                tape.concat_rows(&parts)?
            }
            _ => {
                let views: Vec<ArrayView2<f64>> = unique.iter().map(|&b| queries[b]).collect();
                let stacked = ndarray::concatenate(ndarray::Axis(0), &views)
                    .map_err(|e| LocaError::shape("forward", e.to_string()))?;
                let enc = positional_encode_rows(&stacked, &self.encoding)?;
                self.attention_tape(tape, vars, &enc)?
            }
        };
        let blocks = owner
            .iter()
            .enumerate()
            .map(|(b, &u)| RowBlock {
                sample: b,
                start: starts[u],
                len: queries[b].nrows(),
            })
            .collect();
        tape.attend(phi, v, blocks, self.config.d_s)
    }

    /// Predictions for one input at arbitrary query points, `P x d_s`.
    pub fn predict(&self, features: &[f64], queries: ArrayView2<f64>) -> Result<Matrix> {
        let feats = Matrix::from_shape_vec((1, features.len()), features.to_vec())
            .expect("row vector");
        let mut tape = Tape::new();
        let vars = self.register_frozen(&mut tape)?;
        let out = self.forward_tape(&mut tape, &vars, &feats, &[queries])?;
        Ok(tape.value(out).clone())
    }

    /// Predictions from raw sensor values.
    pub fn forward(&self, u: ArrayView2<f64>, queries: ArrayView2<f64>) -> Result<Matrix> {
        let feats = self.encode(u)?;
        self.predict(&feats, queries)
    }

    /// Attention weights at the given query points.
    pub fn attention(&self, queries: &Matrix) -> Result<AttentionWeights> {
        let mut tape = Tape::new();
        let vars = self.register_frozen(&mut tape)?;
        let enc = positional_encode_rows(queries, &self.encoding)?;
        let phi = self.attention_tape(&mut tape, &vars, &enc)?;
        Ok(AttentionWeights {
            values: tape.value(phi).clone(),
            n: self.config.n,
            d_s: self.config.d_s,
        })
    }

    /// Writes parameters plus the config (as TOML inside the JSON header).
    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let config_toml = self.config.to_toml()?;
        let header = serde_json::json!({
            "kind": "loca-checkpoint",
            "config_hash": sha256_hex(config_toml.as_bytes()),
            "config": config_toml,
            "extra": extra,
        });
        let mut c = Container::new(header.to_string());
        for (name, t) in self.params.tensor_names().into_iter().zip(self.params.tensors()) {
            c.push(NamedArray::new(name, vec![t.nrows(), t.ncols()], t.iter().copied().collect())?)?;
        }
        c.write(path)
    }

    /// The JSON header of a checkpoint file, without building the model.
    pub fn read_header(path: &Path) -> Result<serde_json::Value> {
        let c = Container::read(path)?;
        let header: serde_json::Value = serde_json::from_str(&c.header).map_err(|e| LocaError::Format {
            path: path.to_path_buf(),
            detail: format!("checkpoint header: {e}"),
        })?;
        if header["kind"] != "loca-checkpoint" {
            return Err(LocaError::Format {
                path: path.to_path_buf(),
                detail: "not a checkpoint".into(),
            });
        }
        Ok(header)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path)?;
        let format_err = |detail: String| LocaError::Format {
            path: path.to_path_buf(),
            detail,
        };
        let header: serde_json::Value =
            serde_json::from_str(&c.header).map_err(|e| format_err(format!("checkpoint header: {e}")))?;
        if header["kind"] != "loca-checkpoint" {
            return Err(format_err("not a checkpoint".into()));
        }
        let text = header["config"]
            .as_str()
            .ok_or_else(|| format_err("checkpoint without config".into()))?;
        let config: LocaConfig =
            toml::from_str(text).map_err(|e| format_err(format!("checkpoint config: {e}")))?;
        let encoder = Encoder::build(&config)?;
        let pe = config.positional_encoding()?.width();
        let feats = config.n * config.d_s;
        let mut params = LocaParams {
            q: MlpParams::zeros(pe, config.q_net, config.lift),
            g: MlpParams::zeros(pe, config.g_net, feats),
            f: MlpParams::zeros(encoder.width(config.d_u), config.f_net, feats),
            log_gamma: Matrix::zeros((1, 1)),
            log_beta: Matrix::zeros((1, 1)),
        };
        let names = params.tensor_names();
        if c.arrays.len() != names.len() {
            return Err(LocaError::Config(format!(
                "checkpoint holds {} tensors, config implies {}",
                c.arrays.len(),
                names.len()
            )));
        }
        for (name, t) in names.iter().zip(params.tensors_mut()) {
            let arr = c.expect(name, &[t.nrows(), t.ncols()])?;
            t.as_slice_mut().expect("owned").copy_from_slice(&arr.data);
        }
        Self::assemble(config, params, encoder)
    }
}
