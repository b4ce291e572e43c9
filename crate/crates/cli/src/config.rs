//! Experiment configuration: JSON sections, `--set` overrides and run directories.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use tta_core::data::DatasetConfig;
use tta_core::train::TrainConfig;
use tta_core::{AdaptConfig, Method, SweepConfig, SweepKind};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Root seed for dataset rendering and training. Each component mixes in
    /// its own salt, so one value fixes every stream.
    pub seed: u64,
    pub dataset: DatasetConfig,
    /// `train.seed` always equals the root seed.
    pub train: TrainConfig,
    /// Base adaptation settings; `adapt.seed` is taken from `run.seeds`.
    pub adapt: AdaptConfig,
    pub sweep: SweepSection,
    pub run: RunSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            adapt: AdaptConfig::default(),
            sweep: SweepSection::default(),
            run: RunSection::default(),
        }
    }
}

/// Inputs and selections shared by `train`, `adapt` and `sweep`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Directory of `<domain>.ttc` splits written by `generate`. Unset renders
    /// the dataset in memory.
    pub data: Option<PathBuf>,
    /// Directory of `<domain>.ttc` checkpoints written by `train`, one per
    /// held-out domain.
    pub checkpoints: Option<PathBuf>,
    /// Held-out domains; empty selects every configured domain.
    pub domains: Vec<String>,
    /// Methods run by `adapt`; empty selects all of them.
    pub methods: Vec<Method>,
    /// Methods `adapt` runs in online mode.
    pub online: Vec<Method>,
    /// Coefficient for `mixbn-fixed` when `adapt.alpha` is unset.
    pub fixed_alpha: f64,
    pub batch_size: usize,
    /// Evaluation seeds for `adapt`; each fixes a test order.
    pub seeds: Vec<u64>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            data: None,
            checkpoints: None,
            domains: Vec::new(),
            methods: Vec::new(),
            online: vec![Method::Tent],
            fixed_alpha: 0.9,
            batch_size: 64,
            seeds: vec![0],
        }
    }
}

/// Sweep settings; the base adaptation config comes from the `adapt` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub kind: SweepKind,
    /// Empty selects the kind's default grid.
    pub grid: Vec<f64>,
    /// Empty selects the kind's default methods.
    pub methods: Vec<Method>,
    pub online: Vec<Method>,
    pub seeds: Vec<u64>,
    pub batch_size: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        let d = SweepConfig::default();
        SweepSection {
            kind: d.kind,
            grid: d.grid,
            methods: d.methods,
            online: d.online,
            seeds: d.seeds,
            batch_size: d.batch_size,
        }
    }
}

impl SweepSection {
    pub fn to_config(&self, adapt: &AdaptConfig) -> SweepConfig {
        SweepConfig {
            kind: self.kind,
            grid: self.grid.clone(),
            methods: self.methods.clone(),
            online: self.online.clone(),
            seeds: self.seeds.clone(),
            batch_size: self.batch_size,
            adapt: adapt.clone(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.dataset.validate()?;
        self.train.validate()?;
        self.adapt.validate()?;
        self.sweep.to_config(&self.adapt).validate()?;
        if self.train.seed != self.seed {
            return Err(CliError::Config(format!(
                "train.seed ({}) must equal the root seed ({}); set `seed` instead",
                self.train.seed, self.seed
            )));
        }
        if self.adapt.seed != 0 {
            return Err(CliError::Config("adapt.seed is taken from run.seeds; leave it unset".into()));
        }
        let r = &self.run;
        if r.batch_size == 0 {
            return Err(CliError::Config("run.batch_size must be positive".into()));
        }
        if r.seeds.is_empty() {
            return Err(CliError::Config("run.seeds needs at least one seed".into()));
        }
        if !(0.0..=1.0).contains(&r.fixed_alpha) {
            return Err(CliError::Config(format!("run.fixed_alpha must lie in [0, 1], got {}", r.fixed_alpha)));
        }
        for d in &r.domains {
            self.dataset.domain(d)?;
        }
        Ok(())
    }

    /// Held-out domains in configuration order.
    pub fn domains(&self) -> Vec<String> {
        self.dataset
            .domains
            .iter()
            .map(|d| d.name.clone())
            .filter(|n| self.run.domains.is_empty() || self.run.domains.contains(n))
            .collect()
    }

    pub fn methods(&self) -> Vec<Method> {
        if self.run.methods.is_empty() {
            Method::ALL.to_vec()
        } else {
            self.run.methods.clone()
        }
    }

    /// First 8 hex digits of the SHA-256 of the resolved config.
    pub fn hash8(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().take(4).map(|b| format!("{b:02x}")).collect()
    }
}

/// Applies one `section.key=value` override. The value is parsed as JSON and
/// falls back to a plain string; numeric segments index into arrays.
pub fn apply_set(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let bad = |msg: String| CliError::Config(format!("--set {assignment}: {msg}"));
    let (key, raw) = assignment.split_once('=').ok_or_else(|| bad("expected section.key=value".into()))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(bad("empty key segment".into()));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        let prefix = parts[..=i].join(".");
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = part.parse().map_err(|_| bad(format!("`{prefix}` needs a numeric index")))?;
                let len = items.len();
                let slot = items.get_mut(idx).ok_or_else(|| bad(format!("index {idx} out of range ({len} items)")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(bad(format!("`{}` is not a section", parts[..i].join(".")))),
        };
    }
    unreachable!("loop returns on the last segment")
}

/// Objects merge key by key; anything else in `patch` replaces `base`.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn parse_error(source: &str, e: serde_path_to_error::Error<serde_json::Error>) -> CliError {
    let path = e.path().to_string();
    let inner = e.into_inner();
    if path.is_empty() || path == "." {
        CliError::Config(format!("{source}: {inner}"))
    } else {
        CliError::Config(format!("{source}: key `{path}`: {inner}"))
    }
}

/// Reads `config` (if any), applies overrides and the seed shortcut, then
/// deserializes with unknown keys rejected.
pub fn load(config: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let root = match config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
            let source = path.display().to_string();
            // Typed pass over the original text so errors carry line numbers.
            let mut de = serde_json::Deserializer::from_str(&text);
            serde_path_to_error::deserialize::<_, ExperimentConfig>(&mut de).map_err(|e| parse_error(&source, e))?;
            serde_json::from_str::<Value>(&text).map_err(|e| CliError::Config(format!("{source}: {e}")))?
        }
        None => Value::Object(Default::default()),
    };
    if !root.is_object() {
        return Err(CliError::Config("config must be a JSON object".into()));
    }
    let explicit_train_seed = root.get("train").and_then(|t| t.get("seed")).is_some()
        || sets.iter().any(|s| s.split_once('=').map(|(k, _)| k.trim()) == Some("train.seed"));
    // Overrides address the full tree, defaults included.
    let mut merged = serde_json::to_value(ExperimentConfig::default())?;
    merge(&mut merged, root);
    for s in sets {
        apply_set(&mut merged, s)?;
    }
    if let Some(seed) = seed {
        merged["seed"] = Value::from(seed);
    }
    if seed.is_some() || !explicit_train_seed {
        if let Some(train) = merged.get_mut("train").and_then(Value::as_object_mut) {
            train.remove("seed");
        }
    }
    let mut cfg: ExperimentConfig =
        serde_path_to_error::deserialize(merged.clone()).map_err(|e| parse_error("config with overrides", e))?;
    if merged.get("train").and_then(|t| t.get("seed")).is_none() {
        cfg.train.seed = cfg.seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Creates `<out>/<cmd>-<hash8>-<unix millis>` and writes the resolved config into it.
pub fn create_run_dir(out: &Path, cmd: &str, cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let hash = cfg.hash8();
    let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
    let mut dir = out.join(format!("{cmd}-{hash}-{ts}"));
    let mut k = 1;
    while dir.exists() {
        dir = out.join(format!("{cmd}-{hash}-{ts}-{k}"));
        k += 1;
    }
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
    Ok(dir)
}
