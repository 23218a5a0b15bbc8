//! Kernel-coupled attention: the lifted RBF kernel, its normalized coupling
//! form, quadrature rules for the integral transform and the resulting
//! attention weights.
//!
//! Every operation has a tape form used during training and a plain form
//! (built on a throwaway tape of constants) used for inference and tests, so
//! both share one implementation.

use serde::{Deserialize, Serialize};

use crate::encoding::{positional_encode_rows, PositionalEncodingConfig};
use crate::error::{LocaError, Result};
use crate::numerics::{mlp_forward, Matrix, MlpParams, Tape, Var};

/// Floor applied to the normalizing integrals before the square root.
pub const DENOMINATOR_FLOOR: f64 = 1e-12;

/// Amplitude and inverse width of `k(z, z') = γ exp(-β |z - z'|²)`, both kept
/// as logarithms so they stay positive under unconstrained updates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub log_gamma: f64,
    pub log_beta: f64,
    pub trainable: bool,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            log_gamma: 0.0,
            log_beta: 0.0,
            trainable: true,
        }
    }
}

impl KernelConfig {
    pub fn new(gamma: f64, beta: f64, trainable: bool) -> Result<Self> {
        if !(gamma > 0.0 && beta > 0.0 && gamma.is_finite() && beta.is_finite()) {
            return Err(LocaError::Config(format!(
                "kernel amplitude and width must be positive, got γ={gamma}, β={beta}"
            )));
        }
        Ok(Self {
            log_gamma: gamma.ln(),
            log_beta: beta.ln(),
            trainable,
        })
    }

    pub fn gamma(&self) -> f64 {
        self.log_gamma.exp()
    }

    pub fn beta(&self) -> f64 {
        self.log_beta.exp()
    }

    /// Records the two log-parameters as `1 x 1` tape values.
    pub fn register(&self, tape: &mut Tape) -> Result<KernelVars> {
        let lg = Matrix::from_elem((1, 1), self.log_gamma);
        let lb = Matrix::from_elem((1, 1), self.log_beta);
        let (log_gamma, log_beta) = if self.trainable {
            (tape.leaf(lg)?, tape.leaf(lb)?)
        } else {
            (tape.constant(lg)?, tape.constant(lb)?)
        };
        Ok(KernelVars {
            log_gamma,
            log_beta,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct KernelVars {
    pub log_gamma: Var,
    pub log_beta: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuadratureKind {
    GaussLegendre,
    MonteCarlo,
}

/// Axis-aligned box `[lower_i, upper_i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxDomain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxDomain {
    pub fn unit(dim: usize) -> Self {
        Self {
            lower: vec![0.0; dim],
            upper: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn volume(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(a, b)| b - a)
            .product()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = !self.lower.is_empty()
            && self.lower.len() == self.upper.len()
            && self
                .lower
                .iter()
                .zip(&self.upper)
                .all(|(a, b)| a.is_finite() && b.is_finite() && b > a);
        if ok {
            Ok(())
        } else {
            Err(LocaError::Config(format!(
                "degenerate integration box {:?} x {:?}",
                self.lower, self.upper
            )))
        }
    }
}

/// Integration nodes (one per row) with positive weights.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadratureRule {
    pub kind: QuadratureKind,
    pub nodes: Matrix,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn new(kind: QuadratureKind, nodes: Matrix, weights: Vec<f64>) -> Result<Self> {
        if nodes.nrows() == 0 {
            return Err(LocaError::Config("quadrature rule has no nodes".into()));
        }
        if nodes.nrows() != weights.len() {
            return Err(LocaError::shape(
                "quadrature rule",
                format!("{} nodes, {} weights", nodes.nrows(), weights.len()),
            ));
        }
        if !weights.iter().all(|w| *w > 0.0 && w.is_finite()) {
            return Err(LocaError::Config("quadrature weights must be positive".into()));
        }
        Ok(Self {
            kind,
            nodes,
            weights,
        })
    }

    /// Equal-weight rule `vol / P` on the given points.
    pub fn monte_carlo(points: Matrix, volume: f64) -> Result<Self> {
        let p = points.nrows();
        if p == 0 {
            return Err(LocaError::Config("Monte Carlo rule needs points".into()));
        }
        Self::new(QuadratureKind::MonteCarlo, points, vec![volume / p as f64; p])
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Same nodes, all weights multiplied by `c`.
    pub fn rescaled(&self, c: f64) -> Result<Self> {
        Self::new(
            self.kind,
            self.nodes.clone(),
            self.weights.iter().map(|w| w * c).collect(),
        )
    }

    fn weight_column(&self) -> Matrix {
        Matrix::from_shape_vec((self.len(), 1), self.weights.clone()).expect("column")
    }
}

/// Gauss–Legendre nodes (ascending) and weights on `[-1, 1]`.
pub fn gauss_legendre_1d(q: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if q == 0 {
        return Err(LocaError::Config("Gauss-Legendre needs at least one node".into()));
    }
    let mut nodes = vec![0.0; q];
    let mut weights = vec![0.0; q];
    let n = q as f64;
    for i in 0..q.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // three-term recurrence for P_q and its derivative
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=q {
                let k = k as f64;
                let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
                p0 = p1;
                p1 = p2;
            }
            dp = n * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        if q == 1 {
            x = 0.0;
            dp = 1.0;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[q - 1 - i] = x;
        weights[i] = w;
        weights[q - 1 - i] = w;
    }
    if q % 2 == 1 {
        nodes[q / 2] = 0.0;
    }
    Ok((nodes, weights))
}

/// Tensor-product Gauss–Legendre rule on a box, last axis varying fastest.
pub fn gauss_legendre_rule(q_per_dim: usize, domain: &BoxDomain) -> Result<QuadratureRule> {
    domain.validate()?;
    let (x, w) = gauss_legendre_1d(q_per_dim)?;
    let d = domain.dim();
    let total = q_per_dim.checked_pow(d as u32).ok_or_else(|| {
        LocaError::Config(format!("{q_per_dim}^{d} quadrature nodes overflow"))
    })?;
    let mut nodes = Matrix::zeros((total, d));
    let mut weights = vec![1.0; total];
    for idx in 0..total {
        let mut rem = idx;
        for axis in (0..d).rev() {
            let k = rem % q_per_dim;
            rem /= q_per_dim;
            let half = 0.5 * (domain.upper[axis] - domain.lower[axis]);
            let mid = 0.5 * (domain.upper[axis] + domain.lower[axis]);
            nodes[[idx, axis]] = mid + half * x[k];
            weights[idx] *= half * w[k];
        }
    }
    QuadratureRule::new(QuadratureKind::GaussLegendre, nodes, weights)
}

/// `γ exp(-β |z_a - z'_b|²)` on the tape.
pub fn rbf_kernel_tape(tape: &mut Tape, z: Var, z2: Var, kv: &KernelVars) -> Result<Var> {
    let d = tape.sq_dist(z, z2)?;
    let beta = tape.exp(kv.log_beta)?;
    let scaled = tape.mul_scalar(d, beta)?;
    let neg = tape.scale(scaled, -1.0)?;
    let e = tape.exp(neg)?;
    let gamma = tape.exp(kv.log_gamma)?;
    tape.mul_scalar(e, gamma)
}

pub fn rbf_kernel(z: &Matrix, z2: &Matrix, cfg: &KernelConfig) -> Result<Matrix> {
    let mut tape = Tape::new();
    let kv = KernelConfig {
        trainable: false,
        ..*cfg
    }
    .register(&mut tape)?;
    let (a, b) = (tape.constant(z.clone())?, tape.constant(z2.clone())?);
    let k = rbf_kernel_tape(&mut tape, a, b, &kv)?;
    Ok(tape.value(k).clone())
}

/// Normalized coupling kernel between lifted queries (`P x l`) and lifted
/// integration nodes (`Q x l`).
///
/// When `lifted_nodes` is `None` the queries are themselves the nodes and
/// the single `P x P` kernel matrix serves both the numerator and the
/// normalizing integrals.
pub fn coupling_kernel_tape(
    tape: &mut Tape,
    lifted_queries: Var,
    lifted_nodes: Option<Var>,
    weights: &[f64],
    kv: &KernelVars,
) -> Result<Var> {
    let q_count = match lifted_nodes {
        Some(n) => tape.shape(n).0,
        None => tape.shape(lifted_queries).0,
    };
    if weights.is_empty() {
        return Err(LocaError::Config("coupling kernel with an empty rule".into()));
    }
    if weights.len() != q_count {
        return Err(LocaError::shape(
            "coupling kernel",
            format!("{q_count} nodes, {} weights", weights.len()),
        ));
    }
    let w = tape.constant(Matrix::from_shape_vec((weights.len(), 1), weights.to_vec()).expect("column"))?;
    let nodes = lifted_nodes.unwrap_or(lifted_queries);
    let k_qn = rbf_kernel_tape(tape, lifted_queries, nodes, kv)?;
    let mass_q = tape.matmul(k_qn, w)?;
    let mass_n = match lifted_nodes {
        Some(n) => {
            let k_nn = rbf_kernel_tape(tape, n, n, kv)?;
            tape.matmul(k_nn, w)?
        }
        None => mass_q,
    };
    if tape.value(mass_q).iter().chain(tape.value(mass_n).iter()).any(|m| *m < 0.0) {
        return Err(LocaError::Contract(
            "negative kernel mass in coupling normalization".into(),
        ));
    }
    let inv_q = tape.rsqrt_floor(mass_q, DENOMINATOR_FLOOR)?;
    let inv_n = tape.rsqrt_floor(mass_n, DENOMINATOR_FLOOR)?;
    let rows = tape.scale_rows(k_qn, inv_q)?;
    tape.scale_cols(rows, inv_n)
}

/// Lifts positionally encoded points through `q`.
pub fn lift(
    points: &Matrix,
    q: &MlpParams,
    encoding: &PositionalEncodingConfig,
) -> Result<Matrix> {
    q.forward(&positional_encode_rows(points, encoding)?)
}

/// κ between `queries` and the nodes of `rule`.
pub fn coupling_kernel(
    queries: &Matrix,
    rule: &QuadratureRule,
    q: &MlpParams,
    encoding: &PositionalEncodingConfig,
    cfg: &KernelConfig,
) -> Result<Matrix> {
    let mut tape = Tape::new();
    let kv = KernelConfig {
        trainable: false,
        ..*cfg
    }
    .register(&mut tape)?;
    let q_vars = q.register_frozen(&mut tape)?;
    let eq = tape.constant(positional_encode_rows(queries, encoding)?)?;
    let lq = mlp_forward(&mut tape, &q_vars, eq)?;
    let en = tape.constant(positional_encode_rows(&rule.nodes, encoding)?)?;
    let ln = mlp_forward(&mut tape, &q_vars, en)?;
    let kappa = coupling_kernel_tape(&mut tape, lq, Some(ln), &rule.weights, &kv)?;
    Ok(tape.value(kappa).clone())
}

/// `g̃[p] = Σ_q w_q κ[p, q] g[q]` on the tape.
pub fn kca_transform_tape(tape: &mut Tape, g_nodes: Var, kappa: Var, weights: &[f64]) -> Result<Var> {
    let (p, q) = tape.shape(kappa);
    if q != weights.len() || tape.shape(g_nodes).0 != q {
        return Err(LocaError::shape(
            "kca transform",
            format!(
                "κ {p}x{q}, {} weights, scores with {} rows",
                weights.len(),
                tape.shape(g_nodes).0
            ),
        ));
    }
    let w = tape.constant(Matrix::from_shape_vec((q, 1), weights.to_vec()).expect("column"))?;
    let weighted = tape.scale_cols(kappa, w)?;
    tape.matmul(weighted, g_nodes)
}

/// Plain form of [`kca_transform_tape`]; `g_nodes` is `Q x (n * d_s)`.
pub fn kca_transform(g_nodes: &Matrix, kappa: &Matrix, rule: &QuadratureRule) -> Result<Matrix> {
    if kappa.ncols() != rule.len() || g_nodes.nrows() != rule.len() {
        return Err(LocaError::shape(
            "kca transform",
            format!(
                "κ {}x{}, rule of {} nodes, scores with {} rows",
                kappa.nrows(),
                kappa.ncols(),
                rule.len(),
                g_nodes.nrows()
            ),
        ));
    }
    let weighted = kappa * &rule.weight_column().t();
    Ok(weighted.dot(g_nodes))
}

/// Per-query attention weights, `P` rows of `n x d_s` blocks in row-major
/// order (entry `(i, k)` at column `i * d_s + k`).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub values: Matrix,
    pub n: usize,
    pub d_s: usize,
}

impl AttentionWeights {
    pub fn queries(&self) -> usize {
        self.values.nrows()
    }

    pub fn get(&self, query: usize, feature: usize, channel: usize) -> f64 {
        self.values[[query, feature * self.d_s + channel]]
    }

    /// Largest deviation from the simplex over all (query, channel) slices:
    /// the worst of `|Σ_i φ - 1|` and any negative entry.
    pub fn simplex_violation(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for p in 0..self.queries() {
            for k in 0..self.d_s {
                let mut total = 0.0;
                for i in 0..self.n {
                    let v = self.get(p, i, k);
                    worst = worst.max(-v);
                    total += v;
                }
                worst = worst.max((total - 1.0).abs());
            }
        }
        worst
    }
}

pub fn attention_weights(g_tilde: &Matrix, d_s: usize) -> Result<AttentionWeights> {
    if d_s == 0 || g_tilde.ncols() % d_s != 0 {
        return Err(LocaError::shape(
            "attention weights",
            format!("{} columns for {d_s} channels", g_tilde.ncols()),
        ));
    }
    let mut tape = Tape::new();
    let x = tape.constant(g_tilde.clone())?;
    let phi = tape.softmax_groups(x, d_s)?;
    Ok(AttentionWeights {
        values: tape.value(phi).clone(),
        n: g_tilde.ncols() / d_s,
        d_s,
    })
}
