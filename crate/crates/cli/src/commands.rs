//! The subcommand implementations. Each returns `Ok(true)` for a clean run,
//! `Ok(false)` for a completed run whose checks failed, and `Err` for input
//! or numeric problems; the caller maps those onto exit codes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use multicenter::checkpoint::{self, Checkpoint};
use multicenter::data::{self, MixtureSpec};
use multicenter::trainer::{self, evaluate, TrainJob};
use multicenter::{Error, Result};

use crate::config::{load_run_config, RunConfig};
use crate::gradcheck::{self, CheckBounds, Sabotage, TOLERANCE};

pub struct TrainArtifacts {
    pub final_test_acc: f64,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// Execute one training run described by a resolved config: artifacts are
/// `resolved-config.json`, `metrics.jsonl`, and `final.ckpt` in its
/// output directory.
pub fn run_training(cfg: &RunConfig) -> Result<TrainArtifacts> {
    let (train_data, test_data) = cfg.data.load()?;
    fs::create_dir_all(&cfg.output_dir)?;
    let snapshot = serde_json::to_string_pretty(cfg)
        .map_err(|e| Error::InvalidConfig(format!("serializing resolved config: {e}")))?;
    fs::write(
        cfg.output_dir.join("resolved-config.json"),
        snapshot + "\n",
    )?;

    let metrics_path = cfg.output_dir.join("metrics.jsonl");
    let mut metrics_file = std::io::BufWriter::new(fs::File::create(&metrics_path)?);
    let job = TrainJob {
        head_cfg: cfg.head.clone(),
        backbone: cfg.backbone.clone(),
        train_data: &train_data,
        test_data: &test_data,
        config: cfg.train.clone(),
        variants: cfg.active_variants(),
        abort_dir: Some(cfg.output_dir.clone()),
    };
    let out = trainer::train(&job, |record| {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::InvalidConfig(format!("serializing metrics: {e}")))?;
        writeln!(metrics_file, "{line}")?;
        Ok(())
    })?;
    metrics_file.flush()?;

    let checkpoint_path = cfg.output_dir.join("final.ckpt");
    let ckpt = Checkpoint::from_training_state(&out.head, &cfg.head, out.backbone.as_ref());
    checkpoint::save(&checkpoint_path, &ckpt)?;

    let final_test_acc = out
        .metrics
        .last()
        .map(|r| r.test_acc)
        .expect("at least one epoch");
    Ok(TrainArtifacts {
        final_test_acc,
        checkpoint: checkpoint_path,
        metrics: metrics_path,
    })
}

pub fn cmd_train(config_path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = load_run_config(config_path)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(dir) = out {
        cfg.output_dir = dir;
    }
    let artifacts = run_training(&cfg)?;
    println!("final test top1 {}", artifacts.final_test_acc);
    println!("wrote {}", artifacts.metrics.display());
    println!("wrote {}", artifacts.checkpoint.display());
    println!(
        "wrote {}",
        cfg.output_dir.join("resolved-config.json").display()
    );
    Ok(())
}

pub fn cmd_eval(checkpoint_path: &Path, config_path: &Path, split: &str) -> Result<()> {
    let ckpt = checkpoint::load(checkpoint_path)?;
    let cfg = load_run_config(config_path)?;
    let (train_data, test_data) = cfg.data.load()?;
    let dataset = match split {
        "train" => &train_data,
        "test" => &test_data,
        other => {
            return Err(Error::InvalidConfig(format!(
                "--split must be train or test, got {other:?}"
            )))
        }
    };
    let acc = evaluate(&ckpt.w, ckpt.backbone.as_ref(), dataset)?;
    println!("top1 {acc}");
    Ok(())
}

fn parse_dims(dims: &str) -> Result<CheckBounds> {
    let parts: Vec<usize> = dims
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| {
            Error::InvalidConfig(format!(
                "--dims must be four comma-separated integers d,C,K,n, got {dims:?}"
            ))
        })?;
    if parts.len() != 4 {
        return Err(Error::InvalidConfig(format!(
            "--dims must be four comma-separated integers d,C,K,n, got {dims:?}"
        )));
    }
    let bounds = CheckBounds {
        max_dim: parts[0],
        max_classes: parts[1],
        max_sub_centers: parts[2],
        max_batch: parts[3],
    };
    if bounds.max_dim == 0 || bounds.max_classes < 2 || bounds.max_batch == 0 {
        return Err(Error::InvalidConfig(format!(
            "--dims needs d >= 1, C >= 2, n >= 1, got {dims:?}"
        )));
    }
    Ok(bounds)
}

pub fn cmd_gradcheck(dims: &str, trials: usize, seed: u64) -> Result<bool> {
    if trials == 0 {
        return Err(Error::InvalidConfig("--trials must be at least 1".into()));
    }
    let bounds = parse_dims(dims)?;
    let sabotage = Sabotage::from_env()?;
    let start = Instant::now();
    let outcome = gradcheck::run(&bounds, trials, seed, sabotage)?;
    for r in &outcome.reports {
        println!(
            "{:<12} max rel err {:.3e}  over {} entries",
            r.name, r.max_rel, r.entries
        );
    }
    if outcome.all_ok() {
        println!(
            "gradcheck ok: {} trials, every tensor below {TOLERANCE:e} in {:.2}s",
            outcome.trials,
            start.elapsed().as_secs_f64()
        );
        Ok(true)
    } else {
        let w = outcome.worst().expect("reports are never empty");
        println!(
            "gradcheck FAILED: {} flat index {}: analytic {:e} vs finite difference {:e}, rel err {:.3e}",
            w.name, w.flat_index, w.analytic, w.numeric, w.max_rel
        );
        Ok(false)
    }
}

fn parse_k_list(text: &str) -> Result<Vec<usize>> {
    let ks: Vec<usize> = text
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| {
            Error::InvalidConfig(format!(
                "--k-list must be comma-separated sub-center counts, got {text:?}"
            ))
        })?;
    if ks.is_empty() {
        return Err(Error::InvalidConfig("--k-list is empty".into()));
    }
    Ok(ks)
}

pub fn cmd_sweep_k(config_path: &Path, k_list: &str, seeds: usize) -> Result<bool> {
    if seeds == 0 {
        return Err(Error::InvalidConfig("--seeds must be at least 1".into()));
    }
    let base = load_run_config(config_path)?;
    let ks = parse_k_list(k_list)?;
    fs::create_dir_all(&base.output_dir)?;

    let mut rows: Vec<(usize, u64, f64)> = Vec::new();
    let mut failed = 0usize;
    for &k in &ks {
        for i in 0..seeds {
            let seed = base.train.seed + i as u64;
            let mut cfg = base.clone();
            cfg.head.sub_centers = k;
            if k == 0 {
                cfg.head.main_label_mass = 1.0;
            }
            cfg.train.seed = seed;
            cfg.output_dir = base.output_dir.join(format!("k{k}_seed{seed}"));
            match run_training(&cfg) {
                Ok(artifacts) => rows.push((k, seed, artifacts.final_test_acc)),
                Err(e) => {
                    eprintln!("run k={k} seed={seed} failed: {e}");
                    failed += 1;
                }
            }
        }
    }

    let csv_path = base.output_dir.join("sweep.csv");
    let mut csv = std::io::BufWriter::new(fs::File::create(&csv_path)?);
    writeln!(csv, "k,seed,top1")?;
    for (k, seed, acc) in &rows {
        writeln!(csv, "{k},{seed},{acc}")?;
    }
    csv.flush()?;

    println!("k,mean_top1,std_top1");
    for &k in &ks {
        let accs: Vec<f64> = rows
            .iter()
            .filter(|(rk, _, _)| *rk == k)
            .map(|&(_, _, a)| a)
            .collect();
        if accs.is_empty() {
            println!("{k},failed,failed");
            continue;
        }
        let n = accs.len() as f64;
        let mean = accs.iter().sum::<f64>() / n;
        let std = if accs.len() > 1 {
            (accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        println!("{k},{mean},{std}");
    }
    println!("wrote {}", csv_path.display());
    Ok(failed == 0)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_gen_data(spec: &MixtureSpec, out_dir: &Path) -> Result<()> {
    spec.validate()?;
    fs::create_dir_all(out_dir)?;
    let (train, test) = data::gen_mixture(spec)?;
    data::write_csv(&out_dir.join("train.csv"), &train)?;
    data::write_csv(&out_dir.join("test.csv"), &test)?;
    println!(
        "wrote {} train rows and {} test rows to {}",
        train.len(),
        test.len(),
        out_dir.display()
    );
    Ok(())
}
