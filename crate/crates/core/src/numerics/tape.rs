//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Operations
//! append a node holding the computed value plus enough bookkeeping to
//! propagate adjoints later; [`Tape::backward`] then walks the nodes in
//! reverse insertion order, which is a valid reverse topological order
//! because a node can only reference nodes created before it.
//!
//! The op set is deliberately small: it covers the layers of an MLP and the
//! kernel/attention algebra of the model, with a few fused kernels
//! ([`Tape::sq_dist`], [`Tape::softmax_groups`], [`Tape::attend`]) where
//! composing primitives would waste memory bandwidth.

use ndarray::{Array2, Axis, Zip};

use crate::error::{LocaError, Result};

use super::activation::{gelu_derivative, gelu_scalar};

pub type Matrix = Array2<f64>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A run of consecutive rows of an attention-weight matrix that belongs to
/// one sample of a batch. Several samples may point at the same rows when
/// they share a query set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RowBlock {
    pub sample: usize,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Exp(Var),
    Gelu(Var),
    Sum(Var),
    SqDist(Var, Var),
    RsqrtFloor(Var, f64),
    ScaleRows(Var, Var),
    ScaleCols(Var, Var),
    SoftmaxGroups(Var, usize),
    ConcatRows(Vec<Var>),
    Attend {
        phi: Var,
        v: Var,
        blocks: Vec<RowBlock>,
        channels: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn dims(m: &Matrix) -> String {
    format!("{}x{}", m.nrows(), m.ncols())
}

fn check_finite(value: &Matrix, what: &str) -> Result<()> {
    if value.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(LocaError::NumericDomain(what.to_string()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Records a trainable leaf.
    pub fn leaf(&mut self, value: Matrix) -> Result<Var> {
        check_finite(&value, "leaf")?;
        Ok(self.push_raw(value, Op::Leaf, true))
    }

    /// Records a value that takes no gradient (data, fixed features).
    pub fn constant(&mut self, value: Matrix) -> Result<Var> {
        check_finite(&value, "constant")?;
        Ok(self.push_raw(value, Op::Leaf, false))
    }

    fn push_raw(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Matrix, op: Op, parents: &[Var], name: &str) -> Result<Var> {
        check_finite(&value, name)?;
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        Ok(self.push_raw(value, op, needs_grad))
    }

    fn same_shape(&self, a: Var, b: Var, name: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(LocaError::shape(
                name,
                format!("{} vs {}", dims(self.value(a)), dims(self.value(b))),
            ));
        }
        Ok(())
    }

    fn column_vector(&self, v: Var, len: usize, name: &str) -> Result<()> {
        if self.shape(v) != (len, 1) {
            return Err(LocaError::shape(
                name,
                format!("expected {len}x1 vector, got {}", dims(self.value(v))),
            ));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(LocaError::shape(
                "matmul",
                format!("{} times {}", dims(va), dims(vb)),
            ));
        }
        let out = va.dot(vb);
        self.push(out, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// `x + 1 bᵀ`: adds the single-row `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(b));
        if vb.nrows() != 1 || vb.ncols() != vx.ncols() {
            return Err(LocaError::shape(
                "add_row",
                format!("bias {} for input {}", dims(vb), dims(vx)),
            ));
        }
        let out = vx + vb;
        self.push(out, Op::AddRow(x, b), &[x, b], "add_row")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a, b), &[a, b], "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x) * c;
        self.push(out, Op::Scale(x, c), &[x], "scale")
    }

    /// `x * s` for a recorded 1x1 scalar `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return Err(LocaError::shape(
                "mul_scalar",
                format!("scalar operand is {}", dims(self.value(s))),
            ));
        }
        let out = self.value(x) * self.value(s)[[0, 0]];
        self.push(out, Op::MulScalar(x, s), &[x, s], "mul_scalar")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).mapv(f64::exp);
        self.push(out, Op::Exp(x), &[x], "exp")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).mapv(gelu_scalar);
        self.push(out, Op::Gelu(x), &[x], "gelu")
    }

    /// Sum of all entries, as a 1x1 value.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Array2::from_elem((1, 1), self.value(x).sum());
        self.push(out, Op::Sum(x), &[x], "sum")
    }

    /// Pairwise squared Euclidean distances between the rows of `a` and `b`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.ncols() {
            return Err(LocaError::shape(
                "sq_dist",
                format!("point widths {} vs {}", va.ncols(), vb.ncols()),
            ));
        }
        let out = pairwise_sq_dist(va, vb);
        self.push(out, Op::SqDist(a, b), &[a, b], "sq_dist")
    }

    /// `1 / sqrt(max(x, floor))`, elementwise.
    pub fn rsqrt_floor(&mut self, x: Var, floor: f64) -> Result<Var> {
        let out = self.value(x).mapv(|v| 1.0 / v.max(floor).sqrt());
        self.push(out, Op::RsqrtFloor(x, floor), &[x], "rsqrt_floor")
    }

    /// `diag(r) x` for a column vector `r`.
    pub fn scale_rows(&mut self, x: Var, r: Var) -> Result<Var> {
        let rows = self.shape(x).0;
        self.column_vector(r, rows, "scale_rows")?;
        let out = self.value(x) * self.value(r);
        self.push(out, Op::ScaleRows(x, r), &[x, r], "scale_rows")
    }

    /// `x diag(c)` for a column vector `c`.
    pub fn scale_cols(&mut self, x: Var, c: Var) -> Result<Var> {
        let cols = self.shape(x).1;
        self.column_vector(c, cols, "scale_cols")?;
        let out = self.value(x) * &self.value(c).t();
        self.push(out, Op::ScaleCols(x, c), &[x, c], "scale_cols")
    }

    /// Softmax over the feature index of every row viewed as an
    /// `n x channels` row-major block: entry `(i, k)` lives in column
    /// `i * channels + k`, and each channel `k` is normalized over `i`.
    pub fn softmax_groups(&mut self, x: Var, channels: usize) -> Result<Var> {
        let vx = self.value(x);
        if channels == 0 || vx.ncols() % channels != 0 {
            return Err(LocaError::shape(
                "softmax_groups",
                format!("{} columns do not split into {channels} channels", vx.ncols()),
            ));
        }
        if vx.ncols() == 0 {
            return Err(LocaError::EmptyInput(
                "softmax over zero features".to_string(),
            ));
        }
        let mut out = vx.clone();
        for mut row in out.rows_mut() {
            let row = row.as_slice_mut().expect("owned rows are contiguous");
            softmax_strided(row, channels);
        }
        self.push(out, Op::SoftmaxGroups(x, channels), &[x], "softmax_groups")
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(LocaError::EmptyInput("concat_rows of nothing".into()));
        };
        let cols = self.shape(*first).1;
        if let Some(bad) = parts.iter().find(|p| self.shape(**p).1 != cols) {
            return Err(LocaError::shape(
                "concat_rows",
                format!("{cols} columns vs {}", dims(self.value(*bad))),
            ));
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("column counts checked");
        self.push(out, Op::ConcatRows(parts.to_vec()), parts, "concat_rows")
    }

    /// Expectation of per-sample feature vectors under attention weights.
    ///
    /// `phi` holds weights for every distinct query (rows) laid out as
    /// `n x channels` blocks, `v` holds one `n x channels` feature block per
    /// sample. Output row `r` of block `b` is
    /// `out[k] = sum_i phi[b.start + r, (i,k)] * v[b.sample, (i,k)]`,
    /// with blocks emitted in the given order.
    pub fn attend(
        &mut self,
        phi: Var,
        v: Var,
        blocks: Vec<RowBlock>,
        channels: usize,
    ) -> Result<Var> {
        let (vphi, vv) = (self.value(phi), self.value(v));
        if vphi.ncols() != vv.ncols() || channels == 0 || vv.ncols() % channels != 0 {
            return Err(LocaError::shape(
                "attend",
                format!(
                    "weights {} vs features {} with {channels} channels",
                    dims(vphi),
                    dims(vv)
                ),
            ));
        }
        for b in &blocks {
            if b.sample >= vv.nrows() || b.start + b.len > vphi.nrows() {
                return Err(LocaError::shape(
                    "attend",
                    format!("block {b:?} outside weights {} / features {}", dims(vphi), dims(vv)),
                ));
            }
        }
        let total: usize = blocks.iter().map(|b| b.len).sum();
        let mut out = Array2::zeros((total, channels));
        let mut r = 0;
        for b in &blocks {
            let feats = vv.row(b.sample);
            for p in 0..b.len {
                let w = vphi.row(b.start + p);
                let mut o = out.row_mut(r);
                for (idx, (&wi, &fi)) in w.iter().zip(feats.iter()).enumerate() {
                    o[idx % channels] += wi * fi;
                }
                r += 1;
            }
        }
        self.push(
            out,
            Op::Attend {
                phi,
                v,
                blocks,
                channels,
            },
            &[phi, v],
            "attend",
        )
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Gradients are returned for every node that depends on a trainable
    /// leaf; intermediate adjoints are released as soon as they have been
    /// propagated, so only leaf gradients survive.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(LocaError::Contract(format!(
                "backward needs a scalar loss, got {}",
                dims(self.value(loss))
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |v: Var, delta: Matrix| match &mut grads[v.0] {
            Some(existing) => *existing += &delta,
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.dot(&self.value(*b).t()));
                }
                if self.wants(*b) {
                    acc(*b, self.value(*a).t().dot(g));
                }
            }
            Op::AddRow(x, b) => {
                if self.wants(*x) {
                    acc(*x, g.clone());
                }
                if self.wants(*b) {
                    acc(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*b) {
                    acc(*b, -g);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    acc(*a, g * self.value(*b));
                }
                if self.wants(*b) {
                    acc(*b, g * self.value(*a));
                }
            }
            Op::Scale(x, c) => {
                if self.wants(*x) {
                    acc(*x, g * *c);
                }
            }
            Op::MulScalar(x, s) => {
                let sv = self.value(*s)[[0, 0]];
                if self.wants(*x) {
                    acc(*x, g * sv);
                }
                if self.wants(*s) {
                    let d = (g * self.value(*x)).sum();
                    acc(*s, Array2::from_elem((1, 1), d));
                }
            }
            Op::Exp(x) => {
                if self.wants(*x) {
                    acc(*x, g * &node.value);
                }
            }
            Op::Gelu(x) => {
                if self.wants(*x) {
                    let mut d = self.value(*x).mapv(gelu_derivative);
                    d *= g;
                    acc(*x, d);
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    acc(*x, Array2::from_elem(self.shape(*x), g[[0, 0]]));
                }
            }
            Op::SqDist(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    // d/da_i = 2 (sum_j G_ij) a_i - 2 (G b)_i
                    let row_sums = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let mut d = va * &row_sums;
                    d -= &g.dot(vb);
                    d *= 2.0;
                    acc(*a, d);
                }
                if self.wants(*b) {
                    let col_sums = g.sum_axis(Axis(0)).insert_axis(Axis(1));
                    let mut d = vb * &col_sums;
                    d -= &g.t().dot(va);
                    d *= 2.0;
                    acc(*b, d);
                }
            }
            Op::RsqrtFloor(x, floor) => {
                if self.wants(*x) {
                    let mut d = Array2::zeros(g.dim());
                    Zip::from(&mut d)
                        .and(g)
                        .and(self.value(*x))
                        .and(&node.value)
                        .for_each(|d, &g, &x, &y| {
                            if x > *floor {
                                *d = -0.5 * g * y * y * y;
                            }
                        });
                    acc(*x, d);
                }
            }
            Op::ScaleRows(x, r) => {
                let (vx, vr) = (self.value(*x), self.value(*r));
                if self.wants(*x) {
                    acc(*x, g * vr);
                }
                if self.wants(*r) {
                    acc(*r, (g * vx).sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
            }
            Op::ScaleCols(x, c) => {
                let (vx, vc) = (self.value(*x), self.value(*c));
                if self.wants(*x) {
                    acc(*x, g * &vc.t());
                }
                if self.wants(*c) {
                    acc(*c, (g * vx).sum_axis(Axis(0)).insert_axis(Axis(1)));
                }
            }
            Op::SoftmaxGroups(x, channels) => {
                if self.wants(*x) {
                    let y = &node.value;
                    let mut d = g * y;
                    for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                        // d_i = y_i (g_i - sum_j g_j y_j) per channel group
                        let mut dots = vec![0.0; *channels];
                        for (idx, &gy) in drow.iter().enumerate() {
                            dots[idx % channels] += gy;
                        }
                        for (idx, (dv, &yv)) in drow.iter_mut().zip(yrow.iter()).enumerate() {
                            *dv -= yv * dots[idx % channels];
                        }
                    }
                    acc(*x, d);
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = self.shape(*p).0;
                    if self.wants(*p) {
                        acc(*p, g.slice(ndarray::s![start..start + rows, ..]).to_owned());
                    }
                    start += rows;
                }
            }
            Op::Attend {
                phi,
                v,
                blocks,
                channels,
            } => {
                let (vphi, vv) = (self.value(*phi), self.value(*v));
                let want_phi = self.wants(*phi);
                let want_v = self.wants(*v);
                let mut dphi = want_phi.then(|| Array2::zeros(vphi.dim()));
                let mut dv = want_v.then(|| Array2::zeros(vv.dim()));
                let mut r = 0;
                for b in blocks {
                    for p in 0..b.len {
                        let grow = g.row(r);
                        if let Some(dphi) = dphi.as_mut() {
                            let feats = vv.row(b.sample);
                            let mut out = dphi.row_mut(b.start + p);
                            for (idx, (o, &f)) in out.iter_mut().zip(feats.iter()).enumerate() {
                                *o += grow[idx % channels] * f;
                            }
                        }
                        if let Some(dv) = dv.as_mut() {
                            let w = vphi.row(b.start + p);
                            let mut out = dv.row_mut(b.sample);
                            for (idx, (o, &wi)) in out.iter_mut().zip(w.iter()).enumerate() {
                                *o += grow[idx % channels] * wi;
                            }
                        }
                        r += 1;
                    }
                }
                if let Some(d) = dphi {
                    acc(*phi, d);
                }
                if let Some(d) = dv {
                    acc(*v, d);
                }
            }
        }
    }
}

/// `D[i, j] = |a_i - b_j|^2`, clamped at zero against cancellation.
pub fn pairwise_sq_dist(a: &Matrix, b: &Matrix) -> Matrix {
    let na = a.map_axis(Axis(1), |r| r.dot(&r));
    let nb = b.map_axis(Axis(1), |r| r.dot(&r));
    let mut d = a.dot(&b.t());
    Zip::indexed(&mut d).for_each(|(i, j), v| {
        *v = (na[i] + nb[j] - 2.0 * *v).max(0.0);
    });
    d
}

/// In-place softmax of each strided channel of `row` (`row[i * channels + k]`).
pub(crate) fn softmax_strided(row: &mut [f64], channels: usize) {
    for k in 0..channels {
        let mut max = f64::NEG_INFINITY;
        for v in row.iter().skip(k).step_by(channels) {
            max = max.max(*v);
        }
        let mut total = 0.0;
        for v in row.iter_mut().skip(k).step_by(channels) {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut().skip(k).step_by(channels) {
            *v /= total;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central-difference gradient of `f` at `x`, one entry at a time.
    fn numeric_grad(x: &Matrix, f: &dyn Fn(&Matrix) -> f64) -> Matrix {
        let mut g = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let (i, j) = (idx / x.ncols(), idx % x.ncols());
            let h = 1e-6 * x[[i, j]].abs().max(1.0);
            let mut xp = x.clone();
            xp[[i, j]] += h;
            let mut xm = x.clone();
            xm[[i, j]] -= h;
            g[[i, j]] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &Matrix, b: &Matrix, tol: f64) {
        let scale = a.iter().chain(b.iter()).fold(1e-8_f64, |m, v| m.max(v.abs()));
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= tol * scale, "{x} vs {y}\n{a}\n{b}");
        }
    }

    /// Builds `loss = sum(w ⊙ op(x))` so that every output entry is weighted
    /// differently, then compares reverse mode against finite differences.
    fn check_unary(x: Matrix, op: impl Fn(&mut Tape, Var) -> Result<Var>) {
        let eval = |xv: &Matrix| -> (f64, Option<Matrix>) {
            let mut tape = Tape::new();
            let xv = tape.leaf(xv.clone()).unwrap();
            let y = op(&mut tape, xv).unwrap();
            let (r, c) = tape.shape(y);
            let w = Array2::from_shape_fn((r, c), |(i, j)| 0.3 + 0.7 * ((i * 7 + j * 3) % 5) as f64);
            let w = tape.constant(w).unwrap();
            let p = tape.mul(y, w).unwrap();
            let loss = tape.sum(p).unwrap();
            let l = tape.value(loss)[[0, 0]];
            let grads = tape.backward(loss).unwrap();
            (l, grads.get(xv).cloned())
        };
        let (_, g) = eval(&x);
        let numeric = numeric_grad(&x, &|xv| eval(xv).0);
        assert_close(&g.unwrap(), &numeric, 1e-6);
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![[1.0, -2.0], [3.5, 0.25]]).unwrap();
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &Array2::<f64>::ones((2, 2)));
    }

    #[test]
    fn inner_product_gradient_is_twice_input() {
        let xv = array![[1.0, -2.0, 0.5]];
        let mut tape = Tape::new();
        let x = tape.leaf(xv.clone()).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &(xv * 2.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Array2::ones((2, 1))).unwrap();
        assert!(matches!(tape.backward(x), Err(LocaError::Contract(_))));
    }

    #[test]
    fn non_finite_values_are_reported() {
        let mut tape = Tape::new();
        assert!(tape.leaf(array![[f64::NAN]]).is_err());
        let x = tape.leaf(array![[800.0]]).unwrap();
        assert!(matches!(tape.exp(x), Err(LocaError::NumericDomain(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(array![[2.0]]).unwrap();
        let x = tape.leaf(array![[3.0]]).unwrap();
        let p = tape.mul(c, x).unwrap();
        let g = tape.backward(p).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap()[[0, 0]], 2.0);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.leaf(Array2::ones((2, 3))).unwrap();
        let b = tape.leaf(Array2::ones((2, 3))).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
    }

    fn sample(r: usize, c: usize, seed: usize) -> Matrix {
        Array2::from_shape_fn((r, c), |(i, j)| {
            let t = (i * 31 + j * 17 + seed * 13) as f64;
            (t * 0.618).sin() * 1.3
        })
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let other = sample(3, 4, 9);
        check_unary(sample(3, 4, 1), |t, x| t.gelu(x));
        check_unary(sample(3, 4, 2), |t, x| t.exp(x));
        check_unary(sample(3, 4, 3), |t, x| t.scale(x, -1.7));
        check_unary(sample(3, 4, 4), |t, x| {
            let o = t.constant(other.clone())?;
            let m = t.mul(x, o)?;
            let a = t.add(m, x)?;
            t.sub(a, o)
        });
        check_unary(sample(3, 4, 5).mapv(|v| v * v + 0.2), |t, x| t.rsqrt_floor(x, 1e-12));
    }

    #[test]
    fn linear_ops_match_finite_differences() {
        let w = sample(4, 2, 7);
        check_unary(sample(3, 4, 1), |t, x| {
            let w = t.constant(w.clone())?;
            t.matmul(x, w)
        });
        let x0 = sample(3, 4, 8);
        check_unary(sample(4, 2, 1), |t, w| {
            let x = t.constant(x0.clone())?;
            t.matmul(x, w)
        });
        check_unary(sample(1, 4, 2), |t, b| {
            let x = t.constant(x0.clone())?;
            t.add_row(x, b)
        });
        check_unary(sample(1, 1, 3), |t, s| {
            let x = t.constant(x0.clone())?;
            t.mul_scalar(x, s)
        });
        check_unary(sample(2, 4, 4), |t, x| {
            let c = t.constant(x0.clone())?;
            let sq = t.mul(x, x)?;
            t.concat_rows(&[x, c, sq])
        });
    }

    #[test]
    fn kernel_ops_match_finite_differences() {
        let b0 = sample(5, 3, 4);
        check_unary(sample(4, 3, 1), |t, a| {
            let b = t.constant(b0.clone())?;
            t.sq_dist(a, b)
        });
        let a0 = sample(4, 3, 6);
        check_unary(sample(5, 3, 2), |t, b| {
            let a = t.constant(a0.clone())?;
            t.sq_dist(a, b)
        });
        // shared argument on both sides
        check_unary(sample(4, 3, 3), |t, a| t.sq_dist(a, a));
        let k0 = sample(4, 5, 5);
        check_unary(sample(4, 1, 1), |t, r| {
            let k = t.constant(k0.clone())?;
            t.scale_rows(k, r)
        });
        check_unary(sample(5, 1, 2), |t, c| {
            let k = t.constant(k0.clone())?;
            t.scale_cols(k, c)
        });
        check_unary(k0.clone(), |t, k| {
            let c = t.constant(sample(5, 1, 3))?;
            t.scale_cols(k, c)
        });
    }

    #[test]
    fn softmax_and_attend_match_finite_differences() {
        check_unary(sample(3, 6, 1), |t, x| t.softmax_groups(x, 2));
        check_unary(sample(3, 6, 2), |t, x| t.softmax_groups(x, 1));
        let blocks = vec![
            RowBlock { sample: 0, start: 0, len: 2 },
            RowBlock { sample: 1, start: 2, len: 2 },
            RowBlock { sample: 2, start: 0, len: 2 },
        ];
        let v0 = sample(3, 6, 3);
        let b1 = blocks.clone();
        check_unary(sample(4, 6, 4), move |t, phi| {
            let v = t.constant(v0.clone())?;
            t.attend(phi, v, b1.clone(), 2)
        });
        let phi0 = sample(4, 6, 5);
        check_unary(sample(3, 6, 6), move |t, v| {
            let phi = t.constant(phi0.clone())?;
            t.attend(phi, v, blocks.clone(), 2)
        });
    }

    #[test]
    fn sq_dist_diagonal_is_zero_and_symmetric() {
        let a = sample(6, 4, 1);
        let d = pairwise_sq_dist(&a, &a);
        for i in 0..6 {
            assert!(d[[i, i]].abs() < 1e-12);
            for j in 0..6 {
                assert_eq!(d[[i, j]], d[[j, i]]);
            }
        }
    }
}
