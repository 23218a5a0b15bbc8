use std::time::Instant;

use loca::datagen::{derive_rng, generate};
use loca::experiment::{ExperimentConfig, ExperimentKind};
use loca::kca::{coupling_kernel, gauss_legendre_rule, kca_transform, BoxDomain, QuadratureRule};
use loca::model::{LocaModel, QuadratureSpec};
use loca::numerics::{Matrix, MlpShape};
use loca::scattering::{scatter, ScatteringConfig};
use loca::trainer::gradient_check;
use loca::Result;
use nalgebra::DMatrix;
use rand::Rng;

use crate::exit;

struct Check {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn tiny_model(seed: u64) -> Result<(ExperimentConfig, LocaModel)> {
    let mut cfg = ExperimentConfig::preset(ExperimentKind::Antiderivative);
    cfg.model.n = 6;
    cfg.model.lift = 6;
    cfg.model.q_net = MlpShape::new(1, 8);
    cfg.model.g_net = MlpShape::new(1, 8);
    cfg.model.f_net = MlpShape::new(1, 8);
    cfg.model.quadrature = QuadratureSpec::GaussLegendre { q_per_dim: 8 };
    cfg.train_data.samples = 5;
    cfg.seed = seed;
    let model = LocaModel::new(cfg.model.clone(), &mut derive_rng(seed, 0, "selftest-model"))?;
    Ok((cfg, model))
}

fn random_points(rng: &mut impl Rng, p: usize) -> Matrix {
    Matrix::from_shape_fn((p, 1), |_| rng.random::<f64>())
}

fn simplex(seed: u64) -> Result<Check> {
    let mut worst: f64 = 0.0;
    for draw in 0..10 {
        let (_, model) = tiny_model(seed.wrapping_add(draw))?;
        let queries = random_points(&mut derive_rng(seed, draw as usize, "simplex"), 100);
        worst = worst.max(model.attention(&queries)?.simplex_violation());
    }
    Ok(Check {
        name: "attention weights lie on the simplex",
        passed: worst <= 1e-12,
        detail: format!("worst violation {worst:.2e}"),
    })
}

fn kernel_psd(seed: u64) -> Result<Check> {
    let (_, model) = tiny_model(seed)?;
    let queries = random_points(&mut derive_rng(seed, 0, "kernel"), 60);
    let rule = QuadratureRule::monte_carlo(queries.clone(), 1.0)?;
    let kappa = coupling_kernel(
        &queries,
        &rule,
        &model.params.q,
        &model.config.positional_encoding()?,
        &model.params.kernel(false),
    )?;
    let asym = (&kappa - &kappa.t()).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let eig = DMatrix::from_fn(kappa.nrows(), kappa.ncols(), |i, j| kappa[[i, j]]).symmetric_eigenvalues();
    let (min, max) = (eig.min(), eig.max());
    Ok(Check {
        name: "coupling kernel is symmetric and PSD",
        passed: asym <= 1e-12 && min >= -1e-8 * max,
        detail: format!("asymmetry {asym:.2e}, eigenvalues [{min:.2e}, {max:.2e}]"),
    })
}

fn quadrature() -> Result<Check> {
    let mut worst: f64 = 0.0;
    for q in 1..=10 {
        let rule = gauss_legendre_rule(q, &BoxDomain::unit(1))?;
        for degree in 0..2 * q {
            let approx: f64 = rule
                .weights
                .iter()
                .zip(rule.nodes.column(0))
                .map(|(w, x)| w * x.powi(degree as i32))
                .sum();
            let exact = 1.0 / (degree + 1) as f64;
            worst = worst.max((approx - exact).abs() / exact);
        }
    }
    Ok(Check {
        name: "Gauss-Legendre rules are exact to degree 2Q-1",
        passed: worst <= 1e-13,
        detail: format!("worst relative error {worst:.2e}"),
    })
}

fn gradients(seed: u64) -> Result<Check> {
    let (cfg, model) = tiny_model(seed)?;
    let data = generate(&cfg.train_data, 1)?;
    let batch: Vec<usize> = (0..data.len()).collect();
    let checks = gradient_check(&model, &data, &batch, 1e-6)?;
    let worst = checks
        .iter()
        .max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
        .expect("model has parameters");
    Ok(Check {
        name: "reverse-mode gradients match finite differences",
        passed: worst.relative_error < 1e-5,
        detail: format!("worst {:.2e} in {}", worst.relative_error, worst.name),
    })
}

fn kca_invariance(seed: u64) -> Result<Check> {
    let (_, model) = tiny_model(seed)?;
    let mut rng = derive_rng(seed, 0, "kca");
    let (p, q) = (40, 30);
    let queries = random_points(&mut rng, p);
    let nodes = random_points(&mut rng, q);
    let scores = Matrix::from_shape_fn((q, 6), |_| rng.random::<f64>() - 0.5);
    let enc = model.config.positional_encoding()?;
    let kernel = model.params.kernel(false);
    let transform = |rule: &QuadratureRule, g: &Matrix| -> Result<Matrix> {
        let kappa = coupling_kernel(&queries, rule, &model.params.q, &enc, &kernel)?;
        kca_transform(g, &kappa, rule)
    };
    let rel = |a: &Matrix, b: &Matrix| (a - b).mapv(|v| v * v).sum().sqrt() / b.mapv(|v| v * v).sum().sqrt();

    let rule = QuadratureRule::monte_carlo(nodes.clone(), 1.0)?;
    let base = transform(&rule, &scores)?;
    let scaled = transform(&rule.rescaled(7.5)?, &scores)?;
    let volume_error = rel(&scaled, &base);

    let perm: Vec<usize> = (0..q).rev().collect();
    let permuted = QuadratureRule::monte_carlo(nodes.select(ndarray::Axis(0), &perm), 1.0)?;
    let shuffled = transform(&permuted, &scores.select(ndarray::Axis(0), &perm))?;
    let perm_error = rel(&shuffled, &base);
    Ok(Check {
        name: "KCA ignores the domain volume and node order",
        passed: volume_error <= 1e-10 && perm_error <= 1e-12,
        detail: format!("volume {volume_error:.2e}, permutation {perm_error:.2e}"),
    })
}

fn scattering(seed: u64) -> Result<Check> {
    let configs = [
        ScatteringConfig {
            j: 4,
            l: 8,
            m0: 2,
            input_shape: vec![128],
        },
        ScatteringConfig {
            j: 1,
            l: 2,
            m0: 2,
            input_shape: vec![32, 32],
        },
    ];
    let mut worst_ratio: f64 = 0.0;
    let mut worst_constant: f64 = 0.0;
    for (c, cfg) in configs.iter().enumerate() {
        let len: usize = cfg.input_shape.iter().product();
        let mut rng = derive_rng(seed, c, "scattering");
        for _ in 0..10 {
            let u: Vec<f64> = (0..len).map(|_| rng.random::<f64>() - 0.5).collect();
            let v: Vec<f64> = (0..len).map(|_| rng.random::<f64>() - 0.5).collect();
            let (su, sv) = (scatter(&u, cfg)?, scatter(&v, cfg)?);
            let num: f64 = su.iter().zip(&sv).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let den: f64 = u.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            worst_ratio = worst_ratio.max(num / den);
        }
        let s = scatter(&vec![1.3; len], cfg)?;
        let per = cfg.samples_per_path();
        let first = cfg.paths().iter().filter(|p| p.lambdas.len() == 1).count();
        worst_constant = s[per..per * (1 + first)].iter().fold(worst_constant, |m, v| m.max(v.abs()));
    }
    Ok(Check {
        name: "scattering is nonexpansive and blind to constants",
        passed: worst_ratio <= 1.05 && worst_constant <= 1e-8,
        detail: format!("worst ratio {worst_ratio:.4}, constant response {worst_constant:.2e}"),
    })
}

pub fn run(seed: u64) -> Result<u8> {
    let start = Instant::now();
    let checks = [
        simplex(seed)?,
        kernel_psd(seed)?,
        quadrature()?,
        gradients(seed)?,
        kca_invariance(seed)?,
        scattering(seed)?,
    ];
    let mut failed = 0;
    for c in &checks {
        println!("{} {} ({})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        failed += usize::from(!c.passed);
    }
    println!("{} checks, {failed} failed, {:.1}s", checks.len(), start.elapsed().as_secs_f64());
    Ok(if failed == 0 { 0 } else { exit::FAILURE })
}
