//! Subcommand implementations. Each writes into its own run directory.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use tta_core::data::{channel_moments, generate_dataset, DatasetSplit};
use tta_core::experiment::{evaluate, run_sweep, write_sweep, Target};
use tta_core::train::{accuracy, train_baseline, EpochLog};
use tta_core::verify;
use tta_core::{AdaptConfig, AdaptMode, Architecture, Method, Model, SweepRow};

use crate::config::{create_run_dir, ExperimentConfig};
use crate::error::CliError;

pub struct Context {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub jobs: usize,
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Runtime(format!("cannot start worker pool: {e}")))
}

fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Loads every configured domain from `run.data`, or renders it in memory.
pub fn load_data(cfg: &ExperimentConfig) -> Result<Vec<DatasetSplit>, CliError> {
    let Some(dir) = &cfg.run.data else {
        return Ok(generate_dataset(&cfg.dataset, cfg.seed)?);
    };
    cfg.dataset
        .domains
        .iter()
        .map(|d| {
            let path = dir.join(format!("{}.ttc", d.name));
            if !path.is_file() {
                return Err(CliError::Runtime(format!("missing dataset file {}", path.display())));
            }
            let split = DatasetSplit::load(&path)?;
            if split.domain != d.name || split.classes != cfg.dataset.classes {
                return Err(CliError::Runtime(format!(
                    "{} holds domain {} with {} classes, expected {} with {}",
                    path.display(),
                    split.domain,
                    split.classes,
                    d.name,
                    cfg.dataset.classes
                )));
            }
            Ok(split)
        })
        .collect()
}

fn find<'a>(data: &'a [DatasetSplit], domain: &str) -> &'a DatasetSplit {
    data.iter().find(|s| s.domain == domain).expect("configured domain is loaded")
}

fn checkpoint_dir(cfg: &ExperimentConfig, cmd: &str) -> Result<PathBuf, CliError> {
    cfg.run
        .checkpoints
        .clone()
        .ok_or_else(|| CliError::Config(format!("{cmd} needs run.checkpoints (the checkpoints directory written by train)")))
}

fn load_checkpoint(dir: &Path, domain: &str, classes: usize) -> Result<Model<f32>, CliError> {
    let path = dir.join(format!("{domain}.ttc"));
    if !path.is_file() {
        return Err(CliError::Runtime(format!("missing checkpoint {}", path.display())));
    }
    let model = Model::<f32>::load(&path)?;
    if model.arch().classes() != classes {
        return Err(CliError::Runtime(format!(
            "checkpoint {} predicts {} classes, dataset has {classes}",
            path.display(),
            model.arch().classes()
        )));
    }
    Ok(model)
}

#[derive(Serialize)]
struct DomainRow {
    domain: String,
    samples: usize,
    mean_r: f64,
    std_r: f64,
    mean_g: f64,
    std_g: f64,
    mean_b: f64,
    std_b: f64,
}

pub fn generate(ctx: &Context) -> Result<PathBuf, CliError> {
    let dir = create_run_dir(&ctx.out, "generate", &ctx.cfg)?;
    let data = generate_dataset(&ctx.cfg.dataset, ctx.cfg.seed)?;
    let data_dir = dir.join("data");
    fs::create_dir_all(&data_dir)?;
    let mut rows = Vec::new();
    for split in &data {
        split.save(&data_dir.join(format!("{}.ttc", split.domain)))?;
        let m = channel_moments(&split.images)?;
        rows.push(DomainRow {
            domain: split.domain.clone(),
            samples: split.len(),
            mean_r: m[0].0,
            std_r: m[0].1,
            mean_g: m[1].0,
            std_g: m[1].1,
            mean_b: m[2].0,
            std_b: m[2].1,
        });
        eprintln!("generated {} ({} images)", split.domain, split.len());
    }
    write_csv(&dir.join("domains.csv"), &rows)?;
    Ok(dir)
}

#[derive(Serialize)]
struct TrainRow {
    domain: String,
    sources: String,
    epochs: usize,
    train_acc: f64,
    val_acc: f64,
    heldout_acc: f64,
}

pub fn train(ctx: &Context) -> Result<PathBuf, CliError> {
    let cfg = &ctx.cfg;
    let data = load_data(cfg)?;
    let dir = create_run_dir(&ctx.out, "train", cfg)?;
    let ckpt_dir = dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let arch = Architecture::small_convnet(cfg.dataset.classes);
    let holdouts = cfg.domains();
    let trained: Vec<Result<(Model<f32>, Vec<EpochLog>), CliError>> = pool(ctx.jobs)?.install(|| {
        holdouts
            .par_iter()
            .map(|h| {
                let sources: Vec<DatasetSplit> = data.iter().filter(|s| &s.domain != h).cloned().collect();
                let (model, logs) = train_baseline::<f32>(&sources, &arch, &cfg.train, |log| {
                    eprintln!(
                        "[{h}] epoch {} lr {:.4} loss {:.4} train {:.4} val {}",
                        log.epoch,
                        log.lr,
                        log.train_loss,
                        log.train_acc,
                        log.val_acc.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
                    )
                })?;
                Ok((model, logs))
            })
            .collect()
    });
    let mut summary = Vec::new();
    for (h, res) in holdouts.iter().zip(trained) {
        let (mut model, logs) = res?;
        model.save(&ckpt_dir.join(format!("{h}.ttc")))?;
        write_csv(&dir.join(format!("train_{h}.csv")), &logs)?;
        let heldout_acc = accuracy(&mut model, find(&data, h), 256)?;
        let last = logs.last().expect("at least one epoch");
        let sources: Vec<&str> = data.iter().map(|s| s.domain.as_str()).filter(|d| d != h).collect();
        summary.push(TrainRow {
            domain: h.clone(),
            sources: sources.join(";"),
            epochs: logs.len(),
            train_acc: last.train_acc,
            val_acc: last.val_acc.unwrap_or(f64::NAN),
            heldout_acc,
        });
        eprintln!("held out {h}: val {:.4}, source-only on {h} {:.4}", last.val_acc.unwrap_or(f64::NAN), heldout_acc);
    }
    write_csv(&dir.join("train_summary.csv"), &summary)?;
    Ok(dir)
}

#[derive(Serialize)]
struct AdaptRow {
    domain: String,
    method: String,
    mode: String,
    seed: u64,
    batch_size: usize,
    samples: usize,
    accuracy: f64,
}

/// Adaptation settings for one method, following the `run` section.
pub fn method_config(cfg: &ExperimentConfig, method: Method, seed: u64) -> AdaptConfig {
    let mode = if cfg.run.online.contains(&method) {
        AdaptMode::Online
    } else {
        cfg.adapt.mode
    };
    let alpha = match (method, cfg.adapt.alpha) {
        (Method::MixbnFixed, None) => Some(cfg.run.fixed_alpha),
        (_, a) => a,
    };
    AdaptConfig {
        method,
        mode,
        alpha,
        seed,
        ..cfg.adapt.clone()
    }
}

pub fn adapt(ctx: &Context) -> Result<PathBuf, CliError> {
    let cfg = &ctx.cfg;
    let ckpt_dir = checkpoint_dir(cfg, "adapt")?;
    let data = load_data(cfg)?;
    let domains = cfg.domains();
    let models = domains
        .iter()
        .map(|d| load_checkpoint(&ckpt_dir, d, cfg.dataset.classes))
        .collect::<Result<Vec<_>, _>>()?;
    let dir = create_run_dir(&ctx.out, "adapt", cfg)?;
    // Content-derived so reruns of one config produce identical files.
    let run_id = format!("adapt-{}", cfg.hash8());
    let mut work = Vec::new();
    for (di, _) in domains.iter().enumerate() {
        for m in cfg.methods() {
            for &seed in &cfg.run.seeds {
                work.push((di, method_config(cfg, m, seed)));
            }
        }
    }
    let results: Vec<_> = pool(ctx.jobs)?.install(|| {
        work.par_iter()
            .map(|(di, acfg)| {
                let res = evaluate(&models[*di], find(&data, &domains[*di]), acfg, cfg.run.batch_size, None, &run_id)?;
                eprintln!(
                    "{} {} seed {}: {:.4}",
                    domains[*di],
                    acfg.method.name(),
                    acfg.seed,
                    res.report.accuracy().unwrap_or(f64::NAN)
                );
                Ok::<_, CliError>(res)
            })
            .collect()
    });
    let mut summary = Vec::new();
    for ((di, acfg), res) in work.iter().zip(results) {
        let res = res?;
        let domain = &domains[*di];
        let file = fs::File::create(dir.join(format!("adapt_{domain}_{}_{}.csv", acfg.method.name(), acfg.seed)))?;
        res.report.write_csv(file)?;
        summary.push(AdaptRow {
            domain: domain.clone(),
            method: acfg.method.name().into(),
            mode: match acfg.mode {
                AdaptMode::Episodic => "episodic".into(),
                AdaptMode::Online => "online".into(),
            },
            seed: acfg.seed,
            batch_size: cfg.run.batch_size,
            samples: res.report.records.iter().map(|r| r.batch_size).sum(),
            accuracy: res.report.accuracy().unwrap_or(f64::NAN),
        });
    }
    write_csv(&dir.join("adapt_summary.csv"), &summary)?;
    Ok(dir)
}

pub fn sweep(ctx: &Context) -> Result<PathBuf, CliError> {
    let cfg = &ctx.cfg;
    let ckpt_dir = checkpoint_dir(cfg, "sweep")?;
    let scfg = cfg.sweep.to_config(&cfg.adapt);
    scfg.validate()?;
    let data = load_data(cfg)?;
    let domains = cfg.domains();
    let models = domains
        .iter()
        .map(|d| load_checkpoint(&ckpt_dir, d, cfg.dataset.classes))
        .collect::<Result<Vec<_>, _>>()?;
    let dir = create_run_dir(&ctx.out, "sweep", cfg)?;
    let targets: Vec<Target<'_, f32>> = domains
        .iter()
        .zip(&models)
        .map(|(d, model)| Target { model, split: find(&data, d) })
        .collect();
    let progress = |r: &SweepRow| {
        eprintln!("{} {} {} seed {}: {:.4}", r.sweep, r.domain, r.point, r.seed, r.accuracy);
    };
    let rows = run_sweep(&targets, &scfg, ctx.jobs, &progress)?;
    write_sweep(&dir, scfg.kind, &rows)?;
    Ok(dir)
}

#[derive(Serialize)]
struct VerifyRow {
    suite: String,
    passed: bool,
    checks: usize,
    detail: String,
}

pub fn verify(ctx: &Context) -> Result<PathBuf, CliError> {
    let dir = create_run_dir(&ctx.out, "verify", &ctx.cfg)?;
    let mut rows = Vec::new();
    for (name, suite) in verify::SUITES {
        let r = verify::run_suite(name, suite);
        eprintln!(
            "{} {:<22} {:>8} checks {:>7.2}s {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.checks,
            r.seconds,
            r.detail
        );
        rows.push(VerifyRow {
            suite: r.name.into(),
            passed: r.passed,
            checks: r.checks,
            detail: r.detail,
        });
    }
    write_csv(&dir.join("verify.csv"), &rows)?;
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.suite.as_str()).collect();
    if failed.is_empty() {
        Ok(dir)
    } else {
        Err(CliError::Verification(format!("failed suites: {} (see {})", failed.join(", "), dir.display())))
    }
}
