//! Fully connected networks: Glorot-normal initialization and the
//! affine/GELU stack used for the lifting, score and feature networks.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{LocaError, Result};

use super::tape::{Matrix, Tape, Var};

/// Hidden-layer layout of an MLP: `depth` hidden layers of `width` units.
/// Depth zero is a single affine map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpShape {
    pub depth: usize,
    pub width: usize,
}

impl MlpShape {
    pub const fn new(depth: usize, width: usize) -> Self {
        Self { depth, width }
    }

    /// Layer widths from input to output.
    pub fn widths(&self, input: usize, output: usize) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.depth + 2);
        w.push(input);
        w.extend(std::iter::repeat_n(self.width, self.depth));
        w.push(output);
        w
    }
}

/// One affine layer, `x W + b` with `W: in x out` and `b: 1 x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Dense>,
}

/// Entries drawn i.i.d. from `N(0, 2 / (fan_in + fan_out))`.
pub fn glorot_normal_init<R: Rng + ?Sized>(
    rng: &mut R,
    fan_in: usize,
    fan_out: usize,
) -> Result<Matrix> {
    if fan_in == 0 || fan_out == 0 {
        return Err(LocaError::Config(format!(
            "glorot init needs positive fans, got {fan_in}x{fan_out}"
        )));
    }
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    Ok(Array2::from_shape_simple_fn((fan_in, fan_out), || {
        std * rng.sample::<f64, _>(StandardNormal)
    }))
}

impl MlpParams {
    /// Glorot-normal weights, zero biases.
    pub fn glorot<R: Rng + ?Sized>(
        rng: &mut R,
        input: usize,
        shape: MlpShape,
        output: usize,
    ) -> Result<Self> {
        let widths = shape.widths(input, output);
        let layers = widths
            .windows(2)
            .map(|w| {
                Ok(Dense {
                    weight: glorot_normal_init(rng, w[0], w[1])?,
                    bias: Array2::zeros((1, w[1])),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn zeros(input: usize, shape: MlpShape, output: usize) -> Self {
        let widths = shape.widths(input, output);
        let layers = widths
            .windows(2)
            .map(|w| Dense {
                weight: Array2::zeros((w[0], w[1])),
                bias: Array2::zeros((1, w[1])),
            })
            .collect();
        Self { layers }
    }

    pub fn input_width(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.nrows())
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.ncols())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Puts every weight and bias on the tape as a trainable leaf.
    pub fn register(&self, tape: &mut Tape) -> Result<MlpVars> {
        let layers = self
            .layers
            .iter()
            .map(|l| Ok((tape.leaf(l.weight.clone())?, tape.leaf(l.bias.clone())?)))
            .collect::<Result<_>>()?;
        Ok(MlpVars { layers })
    }

    /// Same as [`register`](Self::register) but as constants, for inference.
    pub fn register_frozen(&self, tape: &mut Tape) -> Result<MlpVars> {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                Ok((
                    tape.constant(l.weight.clone())?,
                    tape.constant(l.bias.clone())?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(MlpVars { layers })
    }

    /// Evaluates the network on the rows of `x` without recording gradients.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let vars = self.register_frozen(&mut tape)?;
        let xv = tape.constant(x.clone())?;
        let y = mlp_forward(&mut tape, &vars, xv)?;
        Ok(tape.value(y).clone())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Matrix> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }
}

/// Tape handles of an MLP's parameters, in layer order.
#[derive(Clone, Debug)]
pub struct MlpVars {
    pub layers: Vec<(Var, Var)>,
}

impl MlpVars {
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }
}

/// Affine layers with GELU in between; the last layer stays affine.
pub fn mlp_forward(tape: &mut Tape, vars: &MlpVars, x: Var) -> Result<Var> {
    let last = vars.layers.len().saturating_sub(1);
    let mut h = x;
    for (idx, &(w, b)) in vars.layers.iter().enumerate() {
        let (rows_in, cols) = (tape.shape(h).1, tape.shape(w).0);
        if rows_in != cols {
            return Err(LocaError::shape(
                format!("mlp layer {idx}"),
                format!("input width {rows_in}, layer expects {cols}"),
            ));
        }
        let z = tape.matmul(h, w)?;
        h = tape.add_row(z, b)?;
        if idx < last {
            h = tape.gelu(h)?;
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_affine_returns_input() {
        let mut p = MlpParams::zeros(3, MlpShape::new(0, 0), 3);
        p.layers[0].weight = Array2::eye(3);
        let x = ndarray::array![[1.0, -2.0, 3.0], [0.5, 0.0, -0.25]];
        assert_eq!(p.forward(&x).unwrap(), x);
    }

    #[test]
    fn zero_network_gives_zero_output_of_declared_width() {
        let p = MlpParams::zeros(4, MlpShape::new(2, 7), 5);
        let y = p.forward(&Array2::ones((3, 4))).unwrap();
        assert_eq!(y.dim(), (3, 5));
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn width_mismatch_reports_layer_index() {
        let p = MlpParams::zeros(4, MlpShape::new(1, 3), 2);
        let err = p.forward(&Array2::ones((1, 5))).unwrap_err();
        assert!(err.to_string().contains("mlp layer 0"), "{err}");
    }

    #[test]
    fn glorot_unit_fans_have_unit_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = glorot_normal_init(&mut rng, 1, 1).unwrap();
        assert_eq!(w.dim(), (1, 1));
        // std is sqrt(2 / 2) = 1; check via a larger draw
        let mut sum2 = 0.0;
        let n = 200_000;
        for _ in 0..n {
            let v = glorot_normal_init(&mut rng, 1, 1).unwrap()[[0, 0]];
            sum2 += v * v;
        }
        assert!((sum2 / n as f64 - 1.0).abs() < 0.02);
    }

    #[test]
    fn glorot_variance_matches_fans() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        let mut count = 0usize;
        while count < 1_000_000 {
            let w = glorot_normal_init(&mut rng, 100, 100).unwrap();
            for &v in w.iter() {
                sum += v;
                sum2 += v * v;
            }
            count += w.len();
        }
        let mean = sum / count as f64;
        let var = sum2 / count as f64 - mean * mean;
        assert!((var - 0.01).abs() <= 0.02 * 0.01, "variance {var}");
    }

    #[test]
    fn glorot_is_deterministic_and_rejects_zero_fans() {
        let a = glorot_normal_init(&mut ChaCha8Rng::seed_from_u64(5), 4, 6).unwrap();
        let b = glorot_normal_init(&mut ChaCha8Rng::seed_from_u64(5), 4, 6).unwrap();
        assert_eq!(a, b);
        assert!(glorot_normal_init(&mut ChaCha8Rng::seed_from_u64(5), 0, 6).is_err());
    }
}
