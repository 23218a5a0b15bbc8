use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::Duration;

use log::{error, info, warn};
use loca::datagen::Dataset;
use loca::experiment::{
    aggregate_sweep, dataset_path, generate_datasets, noisy_inputs, write_evaluation, write_json, ExperimentConfig,
    ExperimentKind, ExperimentOutcome,
};
use loca::model::LocaModel;
use loca::numerics::container::write_atomic;
use loca::trainer::evaluate as evaluate_model;
use loca::{LocaError, Result};

use crate::{exit, Common};

/// Loads `spec` as a file if it exists, else as a preset name.
pub fn resolve_config(spec: &str, seed: Option<u64>) -> Result<ExperimentConfig> {
    let path = Path::new(spec);
    let mut cfg = if path.is_file() {
        ExperimentConfig::load(path)?
    } else if let Some(kind) = ExperimentKind::from_name(spec) {
        ExperimentConfig::preset(kind)
    } else {
        let names: Vec<_> = ExperimentKind::ALL.iter().map(|k| k.name()).collect();
        return Err(LocaError::Config(format!(
            "{spec} is neither a file nor a preset (presets: {})",
            names.join(", ")
        )));
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output_dir(common: &Common, cfg: &ExperimentConfig) -> PathBuf {
    if let Some(out) = &common.out {
        return out.clone();
    }
    if let Some(out) = &cfg.output_dir {
        return out.clone();
    }
    let root = std::env::var_os("LOCA_OUTPUT_ROOT").map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    root.join(format!("{}-s{}", cfg.experiment.name(), cfg.seed))
}

pub fn generate(common: &Common) -> Result<u8> {
    let cfg = resolve_config(&common.config, common.seed)?;
    let data_dir = output_dir(common, &cfg).join("data");
    generate_datasets(&cfg, &data_dir, common.threads)?;
    for d in [&cfg.train_data, &cfg.test_data] {
        println!("{}", dataset_path(&data_dir, d)?.display());
    }
    Ok(0)
}

pub fn train(common: &Common, data_dir: Option<PathBuf>) -> Result<u8> {
    let cfg = resolve_config(&common.config, common.seed)?;
    let out = output_dir(common, &cfg);
    let data_dir = data_dir.unwrap_or_else(|| out.join("data"));
    match loca::experiment::run_experiment(&cfg, &out, &data_dir, common.threads)? {
        ExperimentOutcome::Single(s) => {
            println!(
                "{}: median {:.4e}, mean {:.4e} over {} samples",
                out.display(),
                s.test.median,
                s.test.mean,
                s.test.count
            );
            if let Some(p) = s.noise_increase_percent {
                println!("input noise raises the mean error by {p:.1}%");
            }
        }
        ExperimentOutcome::Ablation {
            with_kca,
            without_kca,
            report,
        } => {
            println!("with KCA:    mean {:.4e}", with_kca.test.mean);
            println!("without KCA: mean {:.4e}", without_kca.test.mean);
            println!("ratio {:.3}", report.ratio);
        }
    }
    Ok(0)
}

pub fn evaluate(
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    squared: bool,
    input_noise: Option<f64>,
    seed: u64,
    threads: usize,
) -> Result<u8> {
    let header = LocaModel::read_header(checkpoint)?;
    let model = LocaModel::load(checkpoint)?;
    let mut dataset = Dataset::read(data)?;
    if let Some(sigma) = input_noise {
        dataset = noisy_inputs(&dataset, sigma, seed)?;
    }
    let eval = evaluate_model(&model, &dataset, squared, threads)?;
    let experiment_hash = header["extra"]["experiment_hash"].as_str().unwrap_or("unknown");
    let train_seed = header["extra"]["seed"].as_u64();
    let provenance = match train_seed {
        Some(s) => format!("config_hash={experiment_hash} seed={s}"),
        None => format!("config_hash={experiment_hash}"),
    };
    fs::create_dir_all(out).map_err(|e| LocaError::io(out, e))?;
    write_evaluation(out, "", &eval, &provenance)?;
    let summary = serde_json::json!({
        "checkpoint": checkpoint.display().to_string(),
        "data": data.display().to_string(),
        "data_config_hash": dataset.config.hash()?,
        "config_hash": experiment_hash,
        "seed": train_seed,
        "squared_metric": squared,
        "input_noise": input_noise,
        "noise_seed": input_noise.map(|_| seed),
        "test": eval.stats,
    });
    write_json(&out.join("summary.json"), &summary)?;
    println!(
        "median {:.4e}, mean {:.4e} over {} samples",
        eval.stats.median, eval.stats.mean, eval.stats.count
    );
    Ok(0)
}

pub fn sweep(common: &Common, jobs: usize) -> Result<u8> {
    if jobs == 0 {
        return Err(LocaError::Config("--jobs must be at least 1".into()));
    }
    let cfg = resolve_config(&common.config, common.seed)?;
    let out = output_dir(common, &cfg);
    let variants = cfg.sweep_variants()?;
    let data_dir = out.join("data");
    for v in &variants {
        generate_datasets(&v.config, &data_dir, common.threads)?;
    }
    fs::create_dir_all(&out).map_err(|e| LocaError::io(&out, e))?;
    write_atomic(&out.join("sweep.toml"), cfg.to_toml()?.as_bytes())?;

    let exe = std::env::current_exe().map_err(|e| LocaError::io(Path::new("current_exe"), e))?;
    let mut pending = variants.iter().rev().collect::<Vec<_>>();
    let mut running: Vec<(String, Child)> = Vec::new();
    let mut failed = Vec::new();
    while !pending.is_empty() || !running.is_empty() {
        while running.len() < jobs {
            let Some(v) = pending.pop() else { break };
            let dir = out.join(&v.dir_name);
            fs::create_dir_all(&dir).map_err(|e| LocaError::io(&dir, e))?;
            let config_path = dir.join("config.toml");
            write_atomic(&config_path, v.config.to_toml()?.as_bytes())?;
            let log_path = dir.join("log.txt");
            let log = fs::File::create(&log_path).map_err(|e| LocaError::io(&log_path, e))?;
            let child = Command::new(&exe)
                .arg("train")
                .arg("--config")
                .arg(&config_path)
                .arg("--out")
                .arg(&dir)
                .arg("--data-dir")
                .arg(&data_dir)
                .stdout(Stdio::null())
                .stderr(log)
                .spawn()
                .map_err(|e| LocaError::io(&exe, e))?;
            info!("started {}", v.dir_name);
            running.push((v.dir_name.clone(), child));
        }
        let mut still = Vec::new();
        for (name, mut child) in running {
            match child.try_wait() {
                Ok(Some(status)) if status.success() => info!("{name} finished"),
                Ok(Some(status)) => {
                    error!("{name} failed ({status}); see {name}/log.txt");
                    failed.push(name);
                }
                Ok(None) => still.push((name, child)),
                Err(e) => {
                    error!("{name}: {e}");
                    failed.push(name);
                }
            }
        }
        running = still;
        if !running.is_empty() {
            thread::sleep(Duration::from_millis(100));
        }
    }

    let rows = aggregate_sweep(&cfg, &out)?;
    println!("{:>10} {:>5} {:>11} {:>11} {:>11}", "value", "runs", "median", "mean", "std");
    for r in &rows {
        println!(
            "{:>10.4} {:>5} {:>11.4e} {:>11.4e} {:>11.4e}",
            r.value, r.runs, r.median, r.mean, r.std
        );
    }
    if failed.is_empty() {
        Ok(0)
    } else {
        warn!("{} of {} variants failed: {}", failed.len(), variants.len(), failed.join(", "));
        Ok(exit::PARTIAL)
    }
}

pub fn preset(name: &str) -> Result<u8> {
    let kind = ExperimentKind::from_name(name).ok_or_else(|| LocaError::Config(format!("unknown preset {name}")))?;
    print!("{}", ExperimentConfig::preset(kind).to_toml()?);
    Ok(0)
}
