//! Test-time adaptation protocols over a trained [`Model`].
//!
//! Every method runs one batch at a time. In episodic mode the model is
//! restored to its pre-batch parameters afterwards; online mode keeps the
//! updates.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::augment::{augment_views, AugmentConfig};
use crate::bn::{self, BnMode};
use crate::error::{Error, Result};
use crate::gem::{self, GemVariant};
use crate::nn::{ForwardMode, Model};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    SourceOnly,
    Adabn,
    MixbnFixed,
    AdamixbnNoFinetune,
    Tent,
    DomainadaptorT,
    DomainadaptorSkd,
    DomainadaptorAug,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::SourceOnly,
        Method::Adabn,
        Method::MixbnFixed,
        Method::AdamixbnNoFinetune,
        Method::Tent,
        Method::DomainadaptorT,
        Method::DomainadaptorSkd,
        Method::DomainadaptorAug,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::SourceOnly => "source-only",
            Method::Adabn => "adabn",
            Method::MixbnFixed => "mixbn-fixed",
            Method::AdamixbnNoFinetune => "adamixbn-no-finetune",
            Method::Tent => "tent",
            Method::DomainadaptorT => "domainadaptor-t",
            Method::DomainadaptorSkd => "domainadaptor-skd",
            Method::DomainadaptorAug => "domainadaptor-aug",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn finetunes(self) -> bool {
        matches!(
            self,
            Method::Tent | Method::DomainadaptorT | Method::DomainadaptorSkd | Method::DomainadaptorAug
        )
    }

    fn variant(self) -> Option<GemVariant> {
        match self {
            Method::DomainadaptorT => Some(GemVariant::GemT),
            Method::DomainadaptorSkd => Some(GemVariant::GemSkd),
            Method::DomainadaptorAug => Some(GemVariant::GemAug),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptMode {
    Episodic,
    Online,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub method: Method,
    /// Fixed mixing coefficient. Required by `mixbn-fixed`; for the AdaMixBN
    /// based methods it replaces the dynamic coefficient in every layer.
    pub alpha: Option<f64>,
    /// Fold the source statistics into the affine parameters before finetuning.
    pub transform: bool,
    pub lr: f64,
    pub steps: usize,
    pub mode: AdaptMode,
    pub confidence_threshold: f64,
    /// Scaling strength of the dynamic temperature.
    pub s: f64,
    /// Augmented views for the GEM-Aug teacher.
    pub m: usize,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            method: Method::DomainadaptorT,
            alpha: None,
            transform: true,
            lr: 1e-3,
            steps: 1,
            mode: AdaptMode::Episodic,
            confidence_threshold: 0.0,
            s: 1.0,
            m: 8,
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn for_method(method: Method) -> Self {
        AdaptConfig {
            method,
            ..AdaptConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(a) = self.alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!("alpha must lie in [0, 1], got {a}")));
            }
        }
        if self.method == Method::MixbnFixed && self.alpha.is_none() {
            return Err(Error::Config("mixbn-fixed needs an alpha".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and non-negative, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(Error::Config(format!(
                "confidence threshold must lie in [0, 1], got {}",
                self.confidence_threshold
            )));
        }
        if !(self.s > 0.0) {
            return Err(Error::Config(format!("temperature scaling s must be positive, got {}", self.s)));
        }
        if self.m == 0 {
            return Err(Error::Config("augmented view count m must be positive".into()));
        }
        self.augment.validate()
    }

    fn normalization(&self) -> BnMode {
        match self.method {
            Method::SourceOnly => BnMode::Source,
            Method::Adabn | Method::Tent => BnMode::AdaBn,
            _ => match self.alpha {
                Some(a) => BnMode::MixFixed(a),
                None => BnMode::AdaMix,
            },
        }
    }
}

/// One row of an adaptation report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchRecord {
    pub batch_index: usize,
    pub batch_size: usize,
    /// Dynamic coefficient per BN layer; empty when the method computes none.
    pub alphas: Vec<f64>,
    pub loss: Option<f64>,
    pub grad_norm: Option<f64>,
    /// Samples contributing to the loss.
    pub participating: usize,
    pub acc_pre: Option<f64>,
    pub acc_post: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdaptReport {
    pub run_id: String,
    pub method: String,
    pub domain: String,
    pub seed: u64,
    pub bn_layers: usize,
    pub records: Vec<BatchRecord>,
}

impl AdaptReport {
    pub fn new(run_id: &str, method: Method, domain: &str, seed: u64, bn_layers: usize) -> Self {
        AdaptReport {
            run_id: run_id.to_string(),
            method: method.name().to_string(),
            domain: domain.to_string(),
            seed,
            bn_layers,
            records: Vec::new(),
        }
    }

    /// Sample-weighted post-adaptation accuracy over all labelled batches.
    pub fn accuracy(&self) -> Option<f64> {
        let mut correct = 0.0;
        let mut total = 0usize;
        for r in &self.records {
            if let Some(a) = r.acc_post {
                correct += a * r.batch_size as f64;
                total += r.batch_size;
            }
        }
        (total > 0).then(|| correct / total as f64)
    }

    pub fn header(bn_layers: usize) -> Vec<String> {
        let mut h: Vec<String> = ["run_id", "method", "domain", "seed", "batch_index", "batch_size"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        h.extend((0..bn_layers).map(|i| format!("alpha_{i}")));
        h.extend(["loss", "grad_norm", "acc_pre", "acc_post"].iter().map(|s| s.to_string()));
        h
    }

    pub fn rows(&self) -> Vec<Vec<String>> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        self.records
            .iter()
            .map(|r| {
                let mut row = vec![
                    self.run_id.clone(),
                    self.method.clone(),
                    self.domain.clone(),
                    self.seed.to_string(),
                    r.batch_index.to_string(),
                    r.batch_size.to_string(),
                ];
                row.extend((0..self.bn_layers).map(|i| r.alphas.get(i).map(|a| a.to_string()).unwrap_or_default()));
                row.extend([opt(r.loss), opt(r.grad_norm), opt(r.acc_pre), opt(r.acc_post)]);
                row
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::header(self.bn_layers))?;
        for row in self.rows() {
            w.write_record(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_trained<T: Real>(model: &Model<T>) -> Result<()> {
    for name in model.arch().bn_names() {
        let rv = model.param(&format!("{name}.running_var"))?;
        if rv.data().iter().all(|v| *v == T::zero()) {
            return Err(Error::Precondition(format!(
                "BN layer {name} has all-zero running variance; the model looks untrained"
            )));
        }
    }
    Ok(())
}

fn accuracy(pred: &[usize], labels: Option<&[usize]>) -> Result<Option<f64>> {
    let Some(labels) = labels else { return Ok(None) };
    if labels.len() != pred.len() {
        return Err(Error::Shape(format!("{} labels for {} samples", labels.len(), pred.len())));
    }
    if pred.is_empty() {
        return Ok(None);
    }
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(Some(hits as f64 / pred.len() as f64))
}

/// Seed for the augmentation stream of one batch, derived from its contents so
/// that episodic results do not depend on where the batch sits in a stream.
fn batch_seed<T: Real>(seed: u64, batch: &Tensor<T>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    let mut bytes = Vec::with_capacity(batch.numel() * 8);
    T::write_le(batch.data(), &mut bytes);
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn grad_norm<T: Real>(grads: &crate::nn::Gradients<T>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Maximum softmax probability per row is at least `threshold`.
pub fn confidence_mask<T: Real>(logits: &Tensor<T>, threshold: f64) -> Result<Vec<bool>> {
    let (_, c) = logits.dims2()?;
    Ok(logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            let p = gem::softmax_t(row, T::one());
            p.iter().copied().fold(T::zero(), T::max).as_f64() >= threshold
        })
        .collect())
}

/// Adapts to one batch and predicts it.
pub fn adapt_batch<T: Real>(
    model: &mut Model<T>,
    batch: &Tensor<T>,
    labels: Option<&[usize]>,
    cfg: &AdaptConfig,
    batch_index: usize,
) -> Result<(Vec<usize>, BatchRecord)> {
    cfg.validate()?;
    check_trained(model)?;
    if batch.batch() == 0 {
        return Err(Error::Precondition("empty batch".into()));
    }
    let snapshot = (cfg.mode == AdaptMode::Episodic).then(|| model.snapshot());
    let result = run_method(model, batch, labels, cfg, batch_index);
    if let Some(snap) = snapshot {
        model.restore(&snap)?;
    }
    result
}

fn run_method<T: Real>(
    model: &mut Model<T>,
    batch: &Tensor<T>,
    labels: Option<&[usize]>,
    cfg: &AdaptConfig,
    batch_index: usize,
) -> Result<(Vec<usize>, BatchRecord)> {
    let norm = if model.is_folded() { BnMode::AdaBn } else { cfg.normalization() };
    let logits0 = model.forward(batch, ForwardMode::Eval(norm))?;
    let pred_pre = logits0.argmax_rows()?;
    let alphas: Vec<f64> = model
        .bn_trace()
        .iter()
        .filter_map(|t| t.record.as_ref().map(|r| r.alpha))
        .collect();
    let mut record = BatchRecord {
        batch_index,
        batch_size: batch.batch(),
        alphas,
        loss: None,
        grad_norm: None,
        participating: 0,
        acc_pre: accuracy(&pred_pre, labels)?,
        acc_post: None,
    };
    if !cfg.method.finetunes() {
        record.acc_post = record.acc_pre;
        return Ok((pred_pre, record));
    }

    // Finetuning normalization: the transformed affine pair with test statistics,
    // or the untouched mixed statistics.
    let ft_mode = if cfg.method == Method::Tent || cfg.transform || model.is_folded() {
        if cfg.method != Method::Tent && !model.is_folded() {
            let traces: Vec<_> = model.bn_trace().to_vec();
            let names: Vec<String> = model.arch().bn_names().into_iter().map(String::from).collect();
            for (name, trace) in names.iter().zip(&traces) {
                let state = model.bn_state(name, norm)?;
                let (g, b) = bn::transform_affine(&state, &trace.test, trace.alpha);
                model.param_mut(&format!("{name}.gamma"))?.data_mut().copy_from_slice(&g);
                model.param_mut(&format!("{name}.beta"))?.data_mut().copy_from_slice(&b);
            }
            model.set_folded(true);
        }
        BnMode::AdaBn
    } else {
        norm
    };

    let mask = confidence_mask(&logits0, cfg.confidence_threshold)?;
    record.participating = mask.iter().filter(|m| **m).count();
    let variant = cfg.method.variant();
    let aug_logits = if variant == Some(GemVariant::GemAug) {
        let views = augment_views(batch, cfg.m, batch_seed(cfg.seed, batch), &cfg.augment)?;
        let mut out = Vec::with_capacity(views.len());
        for v in &views {
            out.push(model.forward(v, ForwardMode::Eval(ft_mode))?);
        }
        Some(out)
    } else {
        None
    };
    let loss_cfg = match variant {
        Some(v) => Some(gem::make_variant(v, &logits0, cfg.s, aug_logits.as_deref())?),
        None => None,
    };

    let trainable: BTreeSet<String> = model.bn_affine_names();
    let lr = T::lit(cfg.lr);
    let updates = cfg.steps > 0 && cfg.lr > 0.0 && record.participating > 0;
    for step in 0..cfg.steps {
        let logits = model.forward(batch, ForwardMode::Eval(ft_mode))?;
        let loss = match &loss_cfg {
            Some((gcfg, teacher)) => gem::gem_loss_masked(&logits, gcfg, teacher.as_ref(), Some(&mask))?,
            None => gem::gem_objective(&logits, T::one(), T::one(), false, None, Some(&mask))?,
        };
        if !loss.value.is_finite() {
            return Err(Error::Numeric(format!("non-finite adaptation loss at step {step}")));
        }
        let grads = model.backward(&loss.logit_grad, &trainable)?;
        if step == 0 {
            record.loss = Some(loss.value.as_f64());
            record.grad_norm = Some(grad_norm(&grads));
        }
        if updates {
            model.sgd_step(&grads, lr)?;
        }
    }
    let pred_post = if updates {
        model.forward(batch, ForwardMode::Eval(ft_mode))?.argmax_rows()?
    } else {
        pred_pre.clone()
    };
    record.acc_post = accuracy(&pred_post, labels)?;
    Ok((pred_post, record))
}

/// Tent: entropy minimization of the original BN affine parameters under
/// test-batch normalization.
pub fn tent_adapt<T: Real>(model: &mut Model<T>, batch: &Tensor<T>, cfg: &AdaptConfig) -> Result<Vec<usize>> {
    let cfg = AdaptConfig {
        method: Method::Tent,
        ..cfg.clone()
    };
    Ok(adapt_batch(model, batch, None, &cfg, 0)?.0)
}

/// A batch of inputs with optional labels (used for reporting only).
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub labels: Option<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct StreamResult {
    pub predictions: Vec<Vec<usize>>,
    pub report: AdaptReport,
}

/// Applies [`adapt_batch`] to every batch in order.
pub fn run_stream<T: Real>(
    model: &mut Model<T>,
    batches: &[Batch<T>],
    cfg: &AdaptConfig,
    run_id: &str,
    domain: &str,
) -> Result<StreamResult> {
    let mut report = AdaptReport::new(run_id, cfg.method, domain, cfg.seed, model.arch().bn_names().len());
    let mut predictions = Vec::with_capacity(batches.len());
    for (i, b) in batches.iter().enumerate() {
        let (pred, rec) = adapt_batch(model, &b.images, b.labels.as_deref(), cfg, i)?;
        predictions.push(pred);
        report.records.push(rec);
    }
    Ok(StreamResult { predictions, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Architecture;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn trained_model(seed: u64) -> Model<f64> {
        let arch = Architecture::conv_stack(3, &[(4, 3, 1), (6, 3, 2)], 3);
        let mut m = Model::new(arch, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for name in m.arch().bn_names().into_iter().map(String::from).collect::<Vec<_>>() {
            for suffix in ["running_mean", "running_var", "gamma", "beta"] {
                let p = m.param_mut(&format!("{name}.{suffix}")).unwrap();
                for v in p.data_mut() {
                    *v = match suffix {
                        "running_mean" => rng.gen_range(-0.3..0.3),
                        "running_var" => rng.gen_range(0.2..1.5),
                        "gamma" => rng.gen_range(0.5..1.5),
                        _ => rng.gen_range(-0.2..0.2),
                    };
                }
            }
        }
        m
    }

    fn batch(n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[n, 3, 8, 8], (0..n * 192).map(|_| rng.gen_range(-1.0..1.5)).collect()).unwrap()
    }

    #[test]
    fn source_only_is_plain_inference() {
        let mut m = trained_model(1);
        let x = batch(5, 2);
        let want = m.forward(&x, ForwardMode::Eval(BnMode::Source)).unwrap().argmax_rows().unwrap();
        let (pred, rec) = adapt_batch(&mut m, &x, None, &AdaptConfig::for_method(Method::SourceOnly), 0).unwrap();
        assert_eq!(pred, want);
        assert!(rec.alphas.is_empty());
    }

    #[test]
    fn zero_alpha_override_matches_adabn() {
        let mut m = trained_model(2);
        let x = batch(6, 3);
        let ada = adapt_batch(&mut m, &x, None, &AdaptConfig::for_method(Method::Adabn), 0).unwrap().0;
        let cfg = AdaptConfig {
            alpha: Some(0.0),
            ..AdaptConfig::for_method(Method::AdamixbnNoFinetune)
        };
        assert_eq!(adapt_batch(&mut m, &x, None, &cfg, 0).unwrap().0, ada);
    }

    #[test]
    fn episodic_runs_restore_parameters_and_repeat() {
        for method in Method::ALL {
            let mut m = trained_model(3);
            let before = m.param_bytes();
            let x = batch(4, 4);
            let cfg = AdaptConfig {
                alpha: Some(0.6),
                lr: 0.05,
                steps: 2,
                m: 2,
                ..AdaptConfig::for_method(method)
            };
            let a = adapt_batch(&mut m, &x, None, &cfg, 0).unwrap().0;
            assert_eq!(m.param_bytes(), before, "{}", method.name());
            let b = adapt_batch(&mut m, &x, None, &cfg, 0).unwrap().0;
            assert_eq!(a, b);
        }
    }

    #[test]
    fn online_transform_folds_once() {
        let mut m = trained_model(6);
        let cfg = AdaptConfig {
            mode: AdaptMode::Online,
            lr: 0.0,
            ..AdaptConfig::for_method(Method::DomainadaptorT)
        };
        let x = batch(5, 7);
        adapt_batch(&mut m, &x, None, &cfg, 0).unwrap();
        assert!(m.is_folded());
        let folded = m.param_bytes();
        // A folded model normalizes with test statistics and is not re-folded.
        let y = batch(5, 8);
        let want = m.forward(&y, ForwardMode::Eval(BnMode::AdaBn)).unwrap().argmax_rows().unwrap();
        let (pred, _) = adapt_batch(&mut m, &y, None, &cfg, 1).unwrap();
        assert_eq!(pred, want);
        assert_eq!(m.param_bytes(), folded);
        let episodic = AdaptConfig {
            mode: AdaptMode::Episodic,
            ..cfg
        };
        let mut fresh = trained_model(6);
        adapt_batch(&mut fresh, &x, None, &episodic, 0).unwrap();
        assert!(!fresh.is_folded());
    }

    #[test]
    fn online_mode_keeps_updates() {
        let mut m = trained_model(5);
        let before = m.param_bytes();
        let cfg = AdaptConfig {
            mode: AdaptMode::Online,
            lr: 0.01,
            ..AdaptConfig::for_method(Method::Tent)
        };
        adapt_batch(&mut m, &batch(4, 6), None, &cfg, 0).unwrap();
        assert_ne!(m.param_bytes(), before);
    }

    #[test]
    fn untrained_statistics_are_rejected() {
        let mut m = trained_model(6);
        for v in m.param_mut("bn1.running_var").unwrap().data_mut() {
            *v = 0.0;
        }
        let err = adapt_batch(&mut m, &batch(2, 1), None, &AdaptConfig::default(), 0).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn zero_learning_rate_matches_normalization_only() {
        let mut m = trained_model(7);
        let x = batch(5, 8);
        let plain = adapt_batch(&mut m, &x, None, &AdaptConfig::for_method(Method::AdamixbnNoFinetune), 0)
            .unwrap()
            .0;
        for method in [Method::DomainadaptorT, Method::DomainadaptorSkd, Method::DomainadaptorAug] {
            let cfg = AdaptConfig {
                lr: 0.0,
                m: 2,
                ..AdaptConfig::for_method(method)
            };
            assert_eq!(adapt_batch(&mut m, &x, None, &cfg, 0).unwrap().0, plain);
        }
        let ada = adapt_batch(&mut m, &x, None, &AdaptConfig::for_method(Method::Adabn), 0).unwrap().0;
        let tent = AdaptConfig {
            lr: 0.0,
            ..AdaptConfig::for_method(Method::Tent)
        };
        assert_eq!(tent_adapt(&mut m, &x, &tent).unwrap(), ada);
    }

    #[test]
    fn higher_threshold_never_adds_participants() {
        let mut m = trained_model(8);
        let x = batch(8, 9);
        let mut last = usize::MAX;
        for t in [0.0, 0.3, 0.4, 0.5, 0.7, 0.9, 1.0] {
            let cfg = AdaptConfig {
                confidence_threshold: t,
                ..AdaptConfig::default()
            };
            let rec = adapt_batch(&mut m, &x, None, &cfg, 0).unwrap().1;
            assert!(rec.participating <= last);
            last = rec.participating;
        }
    }

    #[test]
    fn report_csv_has_one_alpha_column_per_layer() {
        let mut m = trained_model(9);
        let batches: Vec<Batch<f64>> = (0..3)
            .map(|i| Batch {
                images: batch(3, 20 + i),
                labels: Some(vec![0, 1, 2]),
            })
            .collect();
        let cfg = AdaptConfig::for_method(Method::AdamixbnNoFinetune);
        let res = run_stream(&mut m, &batches, &cfg, "r1", "sketch").unwrap();
        let mut buf = Vec::new();
        res.report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "run_id,method,domain,seed,batch_index,batch_size,alpha_0,alpha_1,loss,grad_norm,acc_pre,acc_post"
        );
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("r1,adamixbn-no-finetune,sketch,0,0,3,"));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(AdaptConfig::for_method(Method::MixbnFixed).validate().is_err());
        let cfg = AdaptConfig {
            alpha: Some(1.5),
            ..AdaptConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = AdaptConfig {
            confidence_threshold: -0.1,
            ..AdaptConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
