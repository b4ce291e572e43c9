//! Supervised training on aggregated source domains.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{jitter_batch, JitterConfig};
use crate::bn::BnMode;
use crate::data::{DatasetSplit, Role};
use crate::error::{Error, Result};
use crate::gem::cross_entropy;
use crate::nn::{Architecture, ForwardMode, Model};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Cosine decay of the learning rate to zero over all epochs.
    pub cosine: bool,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub val_fraction: f64,
    /// Training-time augmentation; `None` trains on the raw images.
    pub jitter: Option<JitterConfig>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 25,
            lr: 0.05,
            cosine: true,
            batch_size: 64,
            momentum: 0.9,
            weight_decay: 5e-4,
            val_fraction: 0.1,
            jitter: Some(JitterConfig::default()),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr must be > 0, momentum in [0, 1) and weight_decay >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction)));
        }
        match &self.jitter {
            Some(j) => j.validate(),
            None => Ok(()),
        }
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        if self.cosine {
            0.5 * self.lr * (1.0 + (std::f64::consts::PI * epoch as f64 / self.epochs as f64).cos())
        } else {
            self.lr
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

/// Top-1 accuracy of plain inference (source statistics).
pub fn accuracy<T: Real>(model: &mut Model<T>, split: &DatasetSplit, batch_size: usize) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::Precondition("cannot score an empty split".into()));
    }
    let mut hits = 0usize;
    let idx: Vec<usize> = (0..split.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let x: Tensor<T> = split.images.select(chunk).cast();
        let pred = model.forward(&x, ForwardMode::Eval(BnMode::Source))?.argmax_rows()?;
        hits += pred.iter().zip(chunk).filter(|(p, &i)| **p == split.labels[i]).count();
    }
    Ok(hits as f64 / split.len() as f64)
}

/// Trains `arch` with cross-entropy over the union of `sources`.
///
/// A stratified `val_fraction` of every source domain is held back for
/// validation. `progress` sees each epoch's log as it completes.
pub fn train_baseline<T: Real>(
    sources: &[DatasetSplit],
    arch: &Architecture,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&EpochLog),
) -> Result<(Model<T>, Vec<EpochLog>)> {
    cfg.validate()?;
    if sources.len() < 2 {
        return Err(Error::Precondition(format!("need at least two source domains, got {}", sources.len())));
    }
    let (train_parts, val_parts): (Vec<_>, Vec<_>) = sources.iter().map(|s| s.split_val(cfg.val_fraction)).unzip();
    let train = DatasetSplit::concat(&train_parts, "sources", Role::Train)?;
    let val = DatasetSplit::concat(&val_parts, "sources", Role::Val)?;
    if train.classes != arch.classes() {
        return Err(Error::Config(format!(
            "dataset has {} classes, architecture predicts {}",
            train.classes,
            arch.classes()
        )));
    }

    let mut model: Model<T> = Model::new(arch.clone(), cfg.seed)?;
    let trainable = model.trainable_names();
    let mut velocity: BTreeMap<String, Vec<T>> = trainable
        .iter()
        .map(|n| (n.clone(), vec![T::zero(); model.param(n).map(|p| p.numel()).unwrap_or(0)]))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_7a1e);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mom = T::lit(cfg.momentum);
    let wd = T::lit(cfg.weight_decay);

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let lr_t = T::lit(lr);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            // A lone sample gives degenerate batch statistics.
            if chunk.len() < 2 {
                continue;
            }
            let mut x: Tensor<T> = train.images.select(chunk).cast();
            if let Some(j) = &cfg.jitter {
                jitter_batch(&mut x, &mut rng, j)?;
            }
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let logits = model.forward(&x, ForwardMode::Train)?;
            let loss = cross_entropy(&logits, &labels)?;
            if !loss.value.is_finite() {
                return Err(Error::Numeric(format!("training diverged at epoch {epoch}: loss {}", loss.value)));
            }
            loss_sum += loss.value.as_f64() * chunk.len() as f64;
            hits += logits.argmax_rows()?.iter().zip(&labels).filter(|(p, y)| p == y).count();
            let grads = model.backward(&loss.logit_grad, &trainable)?;
            for (name, g) in &grads {
                let v = velocity.get_mut(name).expect("velocity for every trainable");
                let decay = !name.ends_with(".gamma") && !name.ends_with(".beta") && !name.ends_with(".bias");
                let p = model.param_mut(name)?;
                for ((w, d), vel) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                    let step = if decay { *d + wd * *w } else { *d };
                    *vel = mom * *vel + step;
                    *w -= lr_t * *vel;
                }
            }
        }
        let val_acc = if val.is_empty() { None } else { Some(accuracy(&mut model, &val, 256)?) };
        let log = EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            train_acc: hits as f64 / train.len() as f64,
            val_acc,
        };
        progress(&log);
        logs.push(log);
    }
    Ok((model, logs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_domain, DatasetConfig, DomainSpec};

    fn tiny_arch(classes: usize) -> Architecture {
        Architecture::conv_stack(3, &[(4, 3, 2)], classes)
    }

    fn single_class(n: usize, domain: &str, value: f32) -> DatasetSplit {
        DatasetSplit {
            domain: domain.into(),
            role: Role::Test,
            classes: 2,
            images: Tensor::from_vec(&[n, 3, 8, 8], (0..n * 192).map(|i| value + (i % 7) as f32 * 0.01).collect())
                .unwrap(),
            labels: vec![0; n],
        }
    }

    #[test]
    fn single_class_task_is_learned_quickly() {
        let sources = [single_class(40, "a", 0.2), single_class(40, "b", 0.7)];
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            lr: 0.05,
            ..TrainConfig::default()
        };
        let (_, logs) = train_baseline::<f32>(&sources, &tiny_arch(2), &cfg, |_| {}).unwrap();
        assert_eq!(logs.len(), 2);
        assert_eq!(logs[1].train_acc, 1.0);
    }

    #[test]
    fn training_is_deterministic() {
        let dcfg = DatasetConfig {
            image_size: 8,
            per_domain: 30,
            ..DatasetConfig::default()
        };
        let sources: Vec<_> = dcfg.domains[..2].iter().map(|d| generate_domain(&dcfg, d, 1).unwrap()).collect();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let arch = tiny_arch(5);
        let (a, _) = train_baseline::<f32>(&sources, &arch, &cfg, |_| {}).unwrap();
        let (b, _) = train_baseline::<f32>(&sources, &arch, &cfg, |_| {}).unwrap();
        assert_eq!(a.to_container().unwrap().to_bytes(), b.to_container().unwrap().to_bytes());
        assert!(a.param("bn1.running_var").unwrap().data().iter().all(|v| *v != 1.0));
    }

    #[test]
    fn needs_two_sources() {
        let dcfg = DatasetConfig {
            image_size: 8,
            per_domain: 10,
            ..DatasetConfig::default()
        };
        let one = generate_domain(&dcfg, &DomainSpec::default(), 0).unwrap();
        let err = train_baseline::<f32>(&[one], &tiny_arch(5), &TrainConfig::default(), |_| {}).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn divergence_is_reported() {
        let sources = [single_class(16, "a", 0.2), single_class(16, "b", 0.7)];
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            lr: 1e30,
            cosine: false,
            momentum: 0.0,
            ..TrainConfig::default()
        };
        let mut sources = sources;
        sources[0].labels = (0..16).map(|i| i % 2).collect();
        let err = train_baseline::<f32>(&sources, &tiny_arch(2), &cfg, |_| {}).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err}");
    }
}
