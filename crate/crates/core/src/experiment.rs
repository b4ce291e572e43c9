//! Leave-one-domain-out evaluation and parameter sweeps.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::{run_stream, AdaptConfig, AdaptMode, AdaptReport, Batch, Method, StreamResult};
use crate::data::DatasetSplit;
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::Real;

/// Test order for a split of `n` samples; depends only on `seed`.
pub fn stream_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x0bde_2a11));
    order
}

pub fn make_batches<T: Real>(split: &DatasetSplit, indices: &[usize], batch_size: usize) -> Vec<Batch<T>> {
    indices
        .chunks(batch_size.max(1))
        .map(|c| Batch {
            images: split.images.select(c).cast(),
            labels: Some(c.iter().map(|&i| split.labels[i]).collect()),
        })
        .collect()
}

/// Streams `split` through the adaptation engine on a private copy of `model`.
///
/// The order is shuffled by `cfg.seed`, so every method sees the same batches
/// for a given seed. With `subset`, the stream is cut into consecutive chunks
/// of that many samples and the model is reset before each chunk.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    split: &DatasetSplit,
    cfg: &AdaptConfig,
    batch_size: usize,
    subset: Option<usize>,
    run_id: &str,
) -> Result<StreamResult> {
    if batch_size == 0 || subset == Some(0) {
        return Err(Error::Config("batch size and subset size must be positive".into()));
    }
    let order = stream_order(split.len(), cfg.seed);
    let chunk = subset.unwrap_or(order.len().max(1));
    let mut report = AdaptReport::new(run_id, cfg.method, &split.domain, cfg.seed, model.arch().bn_names().len());
    let mut predictions = Vec::new();
    for part in order.chunks(chunk) {
        let mut local = model.clone();
        let batches = make_batches(split, part, batch_size);
        let offset = report.records.len();
        let res = run_stream(&mut local, &batches, cfg, run_id, &split.domain)?;
        predictions.extend(res.predictions);
        report.records.extend(res.report.records.into_iter().map(|mut r| {
            r.batch_index += offset;
            r
        }));
    }
    Ok(StreamResult { predictions, report })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepKind {
    Alpha,
    BatchSize,
    Confidence,
    Subset,
    Degradation,
}

impl SweepKind {
    pub fn name(self) -> &'static str {
        match self {
            SweepKind::Alpha => "alpha",
            SweepKind::BatchSize => "batch_size",
            SweepKind::Confidence => "confidence",
            SweepKind::Subset => "subset",
            SweepKind::Degradation => "degradation",
        }
    }

    pub fn default_grid(self) -> Vec<f64> {
        match self {
            SweepKind::Alpha => vec![0.5, 0.6, 0.7, 0.8, 0.9, 0.99],
            SweepKind::BatchSize => vec![4.0, 8.0, 16.0, 32.0, 64.0],
            SweepKind::Confidence => vec![0.0, 0.5, 0.7, 0.9, 0.95, 0.99],
            SweepKind::Subset => vec![64.0, 256.0, 1024.0],
            SweepKind::Degradation => vec![0.5, 0.7, 0.9],
        }
    }

    pub fn default_methods(self) -> Vec<Method> {
        match self {
            SweepKind::Alpha => Vec::new(),
            SweepKind::BatchSize => vec![Method::Adabn, Method::AdamixbnNoFinetune],
            SweepKind::Confidence => vec![Method::DomainadaptorT],
            SweepKind::Subset => vec![Method::DomainadaptorT, Method::Tent],
            SweepKind::Degradation => vec![Method::DomainadaptorAug],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub kind: SweepKind,
    /// Grid values; empty selects the kind's default grid.
    pub grid: Vec<f64>,
    /// Methods compared at every grid point; empty selects the kind's defaults.
    pub methods: Vec<Method>,
    /// Methods run in online mode (the rest are episodic).
    pub online: Vec<Method>,
    pub seeds: Vec<u64>,
    pub batch_size: usize,
    /// Base adaptation settings shared by every point.
    pub adapt: AdaptConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            kind: SweepKind::Alpha,
            grid: Vec::new(),
            methods: Vec::new(),
            online: vec![Method::Tent],
            seeds: (0..5).collect(),
            batch_size: 64,
            adapt: AdaptConfig::default(),
        }
    }
}

/// One configuration evaluated for every seed and domain.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub label: String,
    pub value: f64,
    pub cfg: AdaptConfig,
    pub batch_size: usize,
    pub subset: Option<usize>,
}

impl SweepConfig {
    pub fn grid(&self) -> Vec<f64> {
        if self.grid.is_empty() {
            self.kind.default_grid()
        } else {
            self.grid.clone()
        }
    }

    pub fn methods(&self) -> Vec<Method> {
        if self.methods.is_empty() {
            self.kind.default_methods()
        } else {
            self.methods.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("sweep needs at least one seed".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("sweep batch_size must be positive".into()));
        }
        let grid = self.grid();
        let bad = |msg: &str| Err(Error::Config(format!("{} sweep: {msg}", self.kind.name())));
        match self.kind {
            SweepKind::Alpha | SweepKind::Degradation if grid.iter().any(|a| !(0.0..=1.0).contains(a)) => {
                return bad("alpha values must lie in [0, 1]")
            }
            SweepKind::Confidence if grid.iter().any(|a| !(0.0..=1.0).contains(a)) => {
                return bad("thresholds must lie in [0, 1]")
            }
            SweepKind::BatchSize | SweepKind::Subset if grid.iter().any(|v| !(*v >= 1.0) || v.fract() != 0.0) => {
                return bad("grid values must be positive integers")
            }
            _ => {}
        }
        self.adapt.validate()
    }

    fn method_cfg(&self, method: Method) -> AdaptConfig {
        AdaptConfig {
            method,
            mode: if self.online.contains(&method) {
                AdaptMode::Online
            } else {
                AdaptMode::Episodic
            },
            ..self.adapt.clone()
        }
    }

    /// Expands the grid into concrete evaluation points.
    pub fn points(&self) -> Result<Vec<SweepPoint>> {
        self.validate()?;
        let mut out = Vec::new();
        let point = |label: String, value: f64, cfg: AdaptConfig, batch_size: usize, subset: Option<usize>| SweepPoint {
            label,
            value,
            cfg,
            batch_size,
            subset,
        };
        for v in self.grid() {
            match self.kind {
                SweepKind::Alpha => {
                    let cfg = AdaptConfig {
                        alpha: Some(v),
                        ..self.method_cfg(Method::MixbnFixed)
                    };
                    out.push(point(format!("alpha={v}"), v, cfg, self.batch_size, None));
                }
                SweepKind::BatchSize => {
                    for m in self.methods() {
                        out.push(point(m.name().into(), v, self.method_cfg(m), v as usize, None));
                    }
                }
                SweepKind::Confidence => {
                    for m in self.methods() {
                        let cfg = AdaptConfig {
                            confidence_threshold: v,
                            ..self.method_cfg(m)
                        };
                        out.push(point(m.name().into(), v, cfg, self.batch_size, None));
                    }
                }
                SweepKind::Subset => {
                    for m in self.methods() {
                        let cfg = self.method_cfg(m);
                        let label = match cfg.mode {
                            AdaptMode::Online => format!("{}-online", m.name()),
                            AdaptMode::Episodic => m.name().to_string(),
                        };
                        out.push(point(label, v, cfg, self.batch_size, Some(v as usize)));
                    }
                }
                SweepKind::Degradation => {
                    let base = AdaptConfig {
                        alpha: Some(v),
                        ..self.method_cfg(Method::MixbnFixed)
                    };
                    out.push(point("no-finetune".into(), v, base, self.batch_size, None));
                    for m in self.methods() {
                        for transform in [false, true] {
                            let cfg = AdaptConfig {
                                alpha: Some(v),
                                transform,
                                ..self.method_cfg(m)
                            };
                            let label = format!("{}-{}", m.name(), if transform { "transform" } else { "no-transform" });
                            out.push(point(label, v, cfg, self.batch_size, None));
                        }
                    }
                }
            }
        }
        // Methods listed for an alpha sweep run once per seed as references.
        if self.kind == SweepKind::Alpha {
            for &m in &self.methods {
                out.push(point(m.name().into(), f64::NAN, self.method_cfg(m), self.batch_size, None));
            }
        }
        Ok(out)
    }
}

/// A held-out domain with its checkpoint.
pub struct Target<'a, T: Real> {
    pub model: &'a Model<T>,
    pub split: &'a DatasetSplit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sweep: String,
    pub domain: String,
    pub seed: u64,
    pub point: String,
    pub value: f64,
    pub method: String,
    pub batch_size: usize,
    pub accuracy: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub sweep: String,
    pub domain: String,
    pub point: String,
    pub value: f64,
    pub method: String,
    pub batch_size: usize,
    pub mean: f64,
    pub std: f64,
    pub seeds: usize,
}

/// Runs every (domain, point, seed) combination, `jobs` at a time.
pub fn run_sweep<T: Real>(
    targets: &[Target<'_, T>],
    cfg: &SweepConfig,
    jobs: usize,
    progress: &(dyn Fn(&SweepRow) + Sync),
) -> Result<Vec<SweepRow>> {
    let points = cfg.points()?;
    let mut work = Vec::new();
    for (ti, _) in targets.iter().enumerate() {
        for (pi, _) in points.iter().enumerate() {
            for &seed in &cfg.seeds {
                work.push((ti, pi, seed));
            }
        }
    }
    let run = |&(ti, pi, seed): &(usize, usize, u64)| -> Result<SweepRow> {
        let t = &targets[ti];
        let p = &points[pi];
        let acfg = AdaptConfig { seed, ..p.cfg.clone() };
        let res = evaluate(t.model, t.split, &acfg, p.batch_size, p.subset, cfg.kind.name())?;
        let row = SweepRow {
            sweep: cfg.kind.name().into(),
            domain: t.split.domain.clone(),
            seed,
            point: p.label.clone(),
            value: p.value,
            method: acfg.method.name().into(),
            batch_size: p.batch_size,
            accuracy: res.report.accuracy().unwrap_or(f64::NAN),
            samples: res.report.records.iter().map(|r| r.batch_size).sum(),
        };
        progress(&row);
        Ok(row)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| work.par_iter().map(run).collect())
}

/// Mean and sample standard deviation over seeds per (domain, point, value).
pub fn summarize(rows: &[SweepRow]) -> Vec<SummaryRow> {
    let mut out: Vec<SummaryRow> = Vec::new();
    let mut groups: Vec<(&SweepRow, Vec<f64>)> = Vec::new();
    for r in rows {
        let same = |g: &SweepRow| {
            g.domain == r.domain
                && g.point == r.point
                && g.method == r.method
                && g.batch_size == r.batch_size
                && (g.value == r.value || (g.value.is_nan() && r.value.is_nan()))
        };
        match groups.iter_mut().find(|(g, _)| same(g)) {
            Some((_, accs)) => accs.push(r.accuracy),
            None => groups.push((r, vec![r.accuracy])),
        }
    }
    for (g, accs) in groups {
        let n = accs.len() as f64;
        let mean = accs.iter().sum::<f64>() / n;
        let std = if accs.len() > 1 {
            (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        out.push(SummaryRow {
            sweep: g.sweep.clone(),
            domain: g.domain.clone(),
            point: g.point.clone(),
            value: g.value,
            method: g.method.clone(),
            batch_size: g.batch_size,
            mean,
            std,
            seeds: accs.len(),
        });
    }
    out
}

fn write_rows<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `<sweep>_<domain>_<seed>.csv` per (domain, seed) and `<sweep>_summary.csv`.
pub fn write_sweep(dir: &Path, kind: SweepKind, rows: &[SweepRow]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let mut keys: Vec<(String, u64)> = rows.iter().map(|r| (r.domain.clone(), r.seed)).collect();
    keys.sort();
    keys.dedup();
    for (domain, seed) in keys {
        let path = dir.join(format!("{}_{}_{}.csv", kind.name(), domain, seed));
        let part: Vec<&SweepRow> = rows.iter().filter(|r| r.domain == domain && r.seed == seed).collect();
        write_rows(&path, &part)?;
        files.push(path);
    }
    let path = dir.join(format!("{}_summary.csv", kind.name()));
    write_rows(&path, &summarize(rows))?;
    files.push(path);
    Ok(files)
}
