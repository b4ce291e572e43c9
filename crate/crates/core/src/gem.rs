//! Entropy-minimization losses with tempered distributions.
//!
//! The generalized loss is `-tau_q^2 * sum_i p_i log q_i` where `p` is a
//! softmax at temperature `tau_p` (optionally of teacher logits, optionally
//! treated as a constant) and `q` a softmax of the model logits at `tau_q`.
//! All values are batch means; gradients are returned w.r.t. the logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GemVariant {
    /// Plain entropy minimization (`tau_p = tau_q = 1`).
    Em,
    /// Both temperatures bound to the dynamic temperature.
    GemT,
    /// `tau_p = 1` with `p` treated as a constant teacher; `tau_q` dynamic.
    GemSkd,
    /// As `GemSkd`, with the teacher built from averaged augmented-view logits.
    GemAug,
}

impl GemVariant {
    pub fn name(self) -> &'static str {
        match self {
            GemVariant::Em => "em",
            GemVariant::GemT => "gem-t",
            GemVariant::GemSkd => "gem-skd",
            GemVariant::GemAug => "gem-aug",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GemConfig {
    pub variant: GemVariant,
    pub tau_p: f64,
    pub tau_q: f64,
    /// Scaling strength of the dynamic temperature.
    pub s: f64,
    pub detach_p: bool,
    /// Augmented views per sample (GEM-Aug only).
    pub m: usize,
}

impl GemConfig {
    pub fn em() -> Self {
        GemConfig {
            variant: GemVariant::Em,
            tau_p: 1.0,
            tau_q: 1.0,
            s: 1.0,
            detach_p: false,
            m: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_p >= 1.0 && self.tau_q >= self.tau_p) || !self.tau_q.is_finite() {
            return Err(Error::Config(format!(
                "temperatures must satisfy tau_q >= tau_p >= 1 (tau_p = {}, tau_q = {})",
                self.tau_p, self.tau_q
            )));
        }
        if !(self.s > 0.0) {
            return Err(Error::Config(format!("scaling strength s must be positive, got {}", self.s)));
        }
        if self.m == 0 {
            return Err(Error::Config("augmented view count m must be positive".into()));
        }
        let bound = match self.variant {
            GemVariant::Em => self.tau_p == 1.0 && self.tau_q == 1.0 && !self.detach_p,
            GemVariant::GemT => self.tau_p == self.tau_q && !self.detach_p,
            GemVariant::GemSkd | GemVariant::GemAug => self.tau_p == 1.0 && self.detach_p,
        };
        if !bound {
            return Err(Error::Config(format!(
                "{} requires its own temperature/detach binding, got tau_p = {}, tau_q = {}, detach_p = {}",
                self.variant.name(),
                self.tau_p,
                self.tau_q,
                self.detach_p
            )));
        }
        Ok(())
    }
}

/// Scalar batch-mean loss and its gradient w.r.t. the logits.
#[derive(Debug, Clone)]
pub struct LossResult<T> {
    pub value: T,
    pub logit_grad: Tensor<T>,
}

/// Tempered softmax with max-subtraction.
pub fn softmax_t<T: Real>(z: &[T], tau: T) -> Vec<T> {
    let scaled: Vec<T> = z.iter().map(|v| *v / tau).collect();
    let max = scaled.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = scaled.iter().map(|v| (*v - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Tempered log-softmax via log-sum-exp.
pub fn log_softmax_t<T: Real>(z: &[T], tau: T) -> Vec<T> {
    let scaled: Vec<T> = z.iter().map(|v| *v / tau).collect();
    let max = scaled.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = scaled.iter().map(|v| (*v - max).exp()).sum::<T>().ln() + max;
    scaled.into_iter().map(|v| v - lse).collect()
}

fn rows<T: Real>(logits: &Tensor<T>) -> Result<(usize, usize)> {
    let (n, c) = logits.dims2()?;
    if c < 2 {
        return Err(Error::Shape(format!("need at least two classes, got {c}")));
    }
    Ok((n, c))
}

fn included(mask: Option<&[bool]>, i: usize) -> bool {
    mask.map_or(true, |m| m[i])
}

/// Mean entropy `-sum p log p` of `softmax(z)` over the batch.
pub fn em_loss<T: Real>(logits: &Tensor<T>) -> Result<LossResult<T>> {
    let (n, c) = rows(logits)?;
    let mut grad = Tensor::zeros(&[n, c]);
    let mut total = T::zero();
    for i in 0..n {
        let z = &logits.data()[i * c..(i + 1) * c];
        let p = softmax_t(z, T::one());
        let log_p = log_softmax_t(z, T::one());
        let cross: T = p.iter().zip(&log_p).map(|(a, b)| *a * *b).sum();
        total += -cross;
        let row = &mut grad.data_mut()[i * c..(i + 1) * c];
        for k in 0..c {
            row[k] = -(p[k] * (log_p[k] - cross));
        }
    }
    finish(total, grad, n)
}

fn finish<T: Real>(total: T, mut grad: Tensor<T>, count: usize) -> Result<LossResult<T>> {
    if count == 0 {
        return Ok(LossResult {
            value: T::zero(),
            logit_grad: grad,
        });
    }
    let inv = T::one() / T::lit(count as f64);
    for g in grad.data_mut() {
        *g *= inv;
    }
    Ok(LossResult {
        value: total * inv,
        logit_grad: grad,
    })
}

/// The generalized loss for explicit temperatures, without variant checks.
///
/// `teacher` replaces the logits that form `p` (and implies a detached `p`);
/// rows with `mask[i] == false` are excluded from both value and gradient.
pub fn gem_objective<T: Real>(
    logits: &Tensor<T>,
    tau_p: T,
    tau_q: T,
    detach_p: bool,
    teacher: Option<&Tensor<T>>,
    mask: Option<&[bool]>,
) -> Result<LossResult<T>> {
    let (n, c) = rows(logits)?;
    if let Some(t) = teacher {
        if t.shape() != logits.shape() {
            return Err(Error::Shape(format!(
                "teacher logits {:?} vs logits {:?}",
                t.shape(),
                logits.shape()
            )));
        }
    }
    if let Some(m) = mask {
        if m.len() != n {
            return Err(Error::Shape(format!("mask has {} entries for {n} samples", m.len())));
        }
    }
    if !(tau_p > T::zero() && tau_q > T::zero()) {
        return Err(Error::Config("temperatures must be positive".into()));
    }
    let detached = detach_p || teacher.is_some();
    let tq2 = tau_q * tau_q;
    let inv_tq = T::one() / tau_q;
    let mut grad = Tensor::zeros(&[n, c]);
    let mut total = T::zero();
    let mut count = 0;
    for i in 0..n {
        if !included(mask, i) {
            continue;
        }
        count += 1;
        let z = &logits.data()[i * c..(i + 1) * c];
        let zp = teacher.map_or(z, |t| &t.data()[i * c..(i + 1) * c]);
        let p = softmax_t(zp, tau_p);
        let q = softmax_t(z, tau_q);
        let log_q = log_softmax_t(z, tau_q);
        let cross: T = p.iter().zip(&log_q).map(|(a, b)| *a * *b).sum();
        total += -(tq2 * cross);
        let row = &mut grad.data_mut()[i * c..(i + 1) * c];
        for k in 0..c {
            let distill = inv_tq * (p[k] - q[k]);
            row[k] = if detached {
                -(tq2 * distill)
            } else {
                -(tq2 * (distill + p[k] / tau_p * (log_q[k] - cross)))
            };
        }
    }
    finish(total, grad, count)
}

/// Loss for a validated configuration; `teacher_logits` is required exactly for GEM-Aug.
pub fn gem_loss<T: Real>(
    logits: &Tensor<T>,
    cfg: &GemConfig,
    teacher_logits: Option<&Tensor<T>>,
) -> Result<LossResult<T>> {
    gem_loss_masked(logits, cfg, teacher_logits, None)
}

pub fn gem_loss_masked<T: Real>(
    logits: &Tensor<T>,
    cfg: &GemConfig,
    teacher_logits: Option<&Tensor<T>>,
    mask: Option<&[bool]>,
) -> Result<LossResult<T>> {
    cfg.validate()?;
    match (cfg.variant, teacher_logits) {
        (GemVariant::GemAug, None) => return Err(Error::Config("gem-aug needs teacher logits".into())),
        (v, Some(_)) if v != GemVariant::GemAug => {
            return Err(Error::Config(format!("{} does not take teacher logits", v.name())))
        }
        _ => {}
    }
    gem_objective(
        logits,
        T::lit(cfg.tau_p),
        T::lit(cfg.tau_q),
        cfg.detach_p,
        teacher_logits,
        mask,
    )
}

/// `max(1, s * mean_i std(z_i))` with the population std across classes.
pub fn dynamic_temperature<T: Real>(logits: &Tensor<T>, s: f64) -> Result<f64> {
    let (n, c) = rows(logits)?;
    if n == 0 {
        return Ok(1.0);
    }
    let mut acc = 0.0f64;
    for row in logits.data().chunks_exact(c) {
        let m = row.iter().map(|v| v.as_f64()).sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>() / c as f64;
        acc += var.sqrt();
    }
    Ok((s * acc / n as f64).max(1.0))
}

/// Element-wise mean of several equally shaped logit tensors.
pub fn average_logits<T: Real>(views: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = views
        .first()
        .ok_or_else(|| Error::Config("at least one augmented view is required".into()))?;
    let mut out = Tensor::zeros(first.shape());
    for v in views {
        if v.shape() != first.shape() {
            return Err(Error::Shape("augmented views have different shapes".into()));
        }
        for (o, x) in out.data_mut().iter_mut().zip(v.data()) {
            *o += *x;
        }
    }
    let inv = T::one() / T::lit(views.len() as f64);
    for o in out.data_mut() {
        *o *= inv;
    }
    Ok(out)
}

/// Binds the temperatures of `variant` for the given batch and builds the
/// GEM-Aug teacher from `aug_logits`.
pub fn make_variant<T: Real>(
    variant: GemVariant,
    logits: &Tensor<T>,
    s: f64,
    aug_logits: Option<&[Tensor<T>]>,
) -> Result<(GemConfig, Option<Tensor<T>>)> {
    let tau_a = dynamic_temperature(logits, s)?;
    let base = GemConfig { s, ..GemConfig::em() };
    let (cfg, teacher) = match (variant, aug_logits) {
        (GemVariant::GemAug, None) => {
            return Err(Error::Config("gem-aug needs augmented logits".into()));
        }
        (GemVariant::GemAug, Some(views)) => {
            let teacher = average_logits(views)?;
            let cfg = GemConfig {
                variant,
                tau_p: 1.0,
                tau_q: tau_a,
                detach_p: true,
                m: views.len(),
                ..base
            };
            (cfg, Some(teacher))
        }
        (v, Some(_)) => {
            return Err(Error::Config(format!("{} does not use augmented logits", v.name())));
        }
        (GemVariant::Em, None) => (base, None),
        (GemVariant::GemT, None) => (
            GemConfig {
                variant,
                tau_p: tau_a,
                tau_q: tau_a,
                ..base
            },
            None,
        ),
        (GemVariant::GemSkd, None) => (
            GemConfig {
                variant,
                tau_p: 1.0,
                tau_q: tau_a,
                detach_p: true,
                ..base
            },
            None,
        ),
    };
    cfg.validate()?;
    Ok((cfg, teacher))
}

/// Mean cross-entropy against integer labels (supervised training).
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<LossResult<T>> {
    let (n, c) = rows(logits)?;
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} samples", labels.len())));
    }
    let mut grad = Tensor::zeros(&[n, c]);
    let mut total = T::zero();
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Shape(format!("label {y} out of range for {c} classes")));
        }
        let z = &logits.data()[i * c..(i + 1) * c];
        let p = softmax_t(z, T::one());
        let log_p = log_softmax_t(z, T::one());
        total += -log_p[y];
        let row = &mut grad.data_mut()[i * c..(i + 1) * c];
        for k in 0..c {
            row[k] = p[k] - if k == y { T::one() } else { T::zero() };
        }
    }
    finish(total, grad, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn logits(n: usize, c: usize, scale: f64, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[n, c], (0..n * c).map(|_| rng.gen_range(-1.0..1.0) * scale).collect()).unwrap()
    }

    fn fd_check(z: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64, analytic: &Tensor<f64>) {
        let h = 1e-4;
        for i in 0..z.numel() {
            let mut zp = z.clone();
            zp.data_mut()[i] += h;
            let mut zm = z.clone();
            zm.data_mut()[i] -= h;
            let num = (f(&zp) - f(&zm)) / (2.0 * h);
            let a = analytic.data()[i];
            if a.abs() < 1e-8 {
                assert!((a - num).abs() <= 1e-6, "elem {i}: {a} vs {num}");
            } else {
                assert!((a - num).abs() / a.abs().max(num.abs()) <= 1e-4, "elem {i}: {a} vs {num}");
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let u = softmax_t(&[0.3f64; 4], 2.5);
        assert!(u.iter().all(|p| (p - 0.25).abs() < 1e-15));
        let hot = softmax_t(&[5.0f64, -3.0, 1.0], 1e6);
        assert!(hot.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-5));
        let p = softmax_t(&[2.0f64, 0.0], 1.0);
        let e2 = 2.0f64.exp();
        assert!((p[0] - e2 / (e2 + 1.0)).abs() < 1e-15);
        assert!((p[0] - 0.8808).abs() < 5e-5 && (p[1] - 0.1192).abs() < 5e-5);
    }

    #[test]
    fn em_uniform_logits_is_ln_c_with_zero_gradient() {
        let z = Tensor::<f64>::full(&[3, 7], 0.4);
        let r = em_loss(&z).unwrap();
        assert!((r.value - 7.0f64.ln()).abs() < 1e-12);
        assert!((r.value - 1.9459).abs() < 1e-4);
        assert!(r.logit_grad.data().iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn em_near_one_hot_is_tiny() {
        let mut z = Tensor::<f64>::zeros(&[1, 5]);
        z.data_mut()[0] = 50.0;
        assert!(em_loss(&z).unwrap().value <= 1e-10);
    }

    #[test]
    fn em_matches_finite_differences() {
        let z = logits(4, 5, 3.0, 1);
        let r = em_loss(&z).unwrap();
        fd_check(&z, |z| em_loss(z).unwrap().value, &r.logit_grad);
    }

    #[test]
    fn gem_with_unit_temperatures_is_em_bitwise() {
        let z = logits(6, 5, 4.0, 2);
        let em = em_loss(&z).unwrap();
        let gem = gem_loss(&z, &GemConfig::em(), None).unwrap();
        assert_eq!(em.value.to_bits(), gem.value.to_bits());
        assert!(em.logit_grad.data().iter().zip(gem.logit_grad.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn uniform_logits_have_zero_gradient_for_any_temperatures() {
        let z = Tensor::<f64>::full(&[2, 4], -1.2);
        for (tp, tq) in [(1.0, 1.0), (1.0, 3.0), (2.0, 7.0), (7.0, 1.5)] {
            for detach in [false, true] {
                let r = gem_objective(&z, tp, tq, detach, None, None).unwrap();
                assert!(r.logit_grad.data().iter().all(|g| g.abs() < 1e-14));
            }
        }
    }

    #[test]
    fn detached_two_class_example() {
        let z = Tensor::<f64>::from_vec(&[1, 2], vec![2.0, 0.0]).unwrap();
        let r = gem_objective(&z, 1.0, 2.0, true, None, None).unwrap();
        // Independent evaluation: p = softmax(z), q = softmax(z / 2), grad = -tau_q (p - q).
        let e2 = 2.0f64.exp();
        let p0 = e2 / (e2 + 1.0);
        let e1 = 1.0f64.exp();
        let q0 = e1 / (e1 + 1.0);
        assert!((q0 - 0.7311).abs() < 5e-5);
        let want0 = -2.0 * (p0 - q0);
        assert!((r.logit_grad.data()[0] - want0).abs() < 1e-12);
        assert!((r.logit_grad.data()[1] + want0).abs() < 1e-12);
        assert!((r.logit_grad.data()[0] + 0.2994).abs() < 1e-4);
        // Exact value is -0.299476; the 4-decimal figure -0.2994 comes from rounded p and q.
        // Finite differences on the loss with p frozen at its current value.
        let p = softmax_t(&[2.0, 0.0], 1.0);
        let frozen = |z: &Tensor<f64>| {
            let lq = log_softmax_t(z.data(), 2.0);
            -4.0 * (p[0] * lq[0] + p[1] * lq[1])
        };
        fd_check(&z, frozen, &r.logit_grad);
    }

    #[test]
    fn gradient_matches_finite_differences_over_temperature_grid() {
        let taus = [1.0, 1.5, 3.0, 7.0];
        let mut seed = 10;
        for &tp in &taus {
            for &tq in &taus {
                for detach in [false, true] {
                    seed += 1;
                    let z = logits(3, 5, 4.0, seed);
                    let r = gem_objective(&z, tp, tq, detach, None, None).unwrap();
                    if detach {
                        let p: Vec<Vec<f64>> = z.data().chunks(5).map(|row| softmax_t(row, tp)).collect();
                        let frozen = |zz: &Tensor<f64>| {
                            let mut acc = 0.0;
                            for (i, row) in zz.data().chunks(5).enumerate() {
                                let lq = log_softmax_t(row, tq);
                                acc -= tq * tq * p[i].iter().zip(&lq).map(|(a, b)| a * b).sum::<f64>();
                            }
                            acc / 3.0
                        };
                        fd_check(&z, frozen, &r.logit_grad);
                    } else {
                        fd_check(&z, |zz| gem_objective(zz, tp, tq, false, None, None).unwrap().value, &r.logit_grad);
                    }
                }
            }
        }
    }

    #[test]
    fn equal_temperatures_leave_only_the_entropy_term() {
        let z = logits(4, 6, 3.0, 5);
        let tau = 2.7;
        let r = gem_objective(&z, tau, tau, false, None, None).unwrap();
        for (i, row) in z.data().chunks(6).enumerate() {
            let p = softmax_t(row, tau);
            let lq = log_softmax_t(row, tau);
            let s: f64 = p.iter().zip(&lq).map(|(a, b)| a * b).sum();
            for k in 0..6 {
                let second = -(tau * tau) * p[k] / tau * (lq[k] - s) / 4.0;
                assert!((r.logit_grad.data()[i * 6 + k] - second).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn detached_gradient_is_scaled_distillation() {
        let z = logits(5, 4, 2.0, 8);
        let (tp, tq) = (1.0, 3.5);
        let r = gem_objective(&z, tp, tq, true, None, None).unwrap();
        for (i, row) in z.data().chunks(4).enumerate() {
            let p = softmax_t(row, tp);
            let q = softmax_t(row, tq);
            for k in 0..4 {
                let want = -tq * (p[k] - q[k]) / 5.0;
                assert!((r.logit_grad.data()[i * 4 + k] - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn dynamic_temperature_examples() {
        assert_eq!(dynamic_temperature(&Tensor::<f64>::full(&[3, 4], 2.0), 1.0).unwrap(), 1.0);
        let z = Tensor::<f64>::from_vec(&[1, 2], vec![2.0, 0.0]).unwrap();
        assert_eq!(dynamic_temperature(&z, 1.0).unwrap(), 1.0);
        let z = logits(6, 5, 8.0, 3);
        let mut acc = 0.0;
        for row in z.data().chunks(5) {
            let m = row.iter().sum::<f64>() / 5.0;
            acc += (row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 5.0).sqrt();
        }
        let want = (1.3 * acc / 6.0).max(1.0);
        assert!((dynamic_temperature(&z, 1.3).unwrap() - want).abs() <= 1e-12);
    }

    #[test]
    fn variant_bindings() {
        let flat = Tensor::<f64>::full(&[2, 5], 1.0);
        let (cfg, t) = make_variant(GemVariant::GemT, &flat, 1.0, None).unwrap();
        assert_eq!((cfg.tau_p, cfg.tau_q, cfg.detach_p), (1.0, 1.0, false));
        assert!(t.is_none());
        let em = em_loss(&flat).unwrap();
        let gt = gem_loss(&flat, &cfg, None).unwrap();
        assert_eq!(em.value, gt.value);

        let z = logits(4, 5, 6.0, 4);
        let views = vec![z.clone()];
        let (acfg, teacher) = make_variant(GemVariant::GemAug, &z, 1.0, Some(&views)).unwrap();
        let (scfg, _) = make_variant(GemVariant::GemSkd, &z, 1.0, None).unwrap();
        assert_eq!(teacher.as_ref().unwrap(), &z);
        let a = gem_loss(&z, &acfg, teacher.as_ref()).unwrap();
        let s = gem_loss(&z, &scfg, None).unwrap();
        assert_eq!(a.value, s.value);
        assert_eq!(a.logit_grad, s.logit_grad);

        assert!(make_variant(GemVariant::GemAug, &z, 1.0, None).is_err());
        assert!(make_variant(GemVariant::GemSkd, &z, 1.0, Some(&views)).is_err());
    }

    #[test]
    fn inconsistent_configs_are_rejected() {
        let z = logits(2, 3, 1.0, 1);
        let mut cfg = GemConfig::em();
        cfg.tau_q = 2.0;
        assert!(gem_loss(&z, &cfg, None).is_err());
        let cfg = GemConfig {
            variant: GemVariant::GemSkd,
            tau_p: 1.0,
            tau_q: 0.5,
            detach_p: true,
            ..GemConfig::em()
        };
        assert!(gem_loss(&z, &cfg, None).is_err());
        let cfg = GemConfig {
            variant: GemVariant::GemT,
            tau_p: 2.0,
            tau_q: 3.0,
            ..GemConfig::em()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn gem_t_beats_em_gradient_on_confident_logits() {
        // Sweep c: past the crossover the tempered gradient dominates.
        for c in [10.0, 15.0, 20.0, 30.0] {
            let mut z = Tensor::<f64>::zeros(&[1, 5]);
            z.data_mut()[0] = c;
            let (cfg, _) = make_variant(GemVariant::GemT, &z, 1.0, None).unwrap();
            let norm = |t: &Tensor<f64>| t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            let gt = norm(&gem_loss(&z, &cfg, None).unwrap().logit_grad);
            let em = norm(&em_loss(&z).unwrap().logit_grad);
            assert!(gt > em, "c = {c}: {gt} vs {em}");
        }
    }

    #[test]
    fn mask_excludes_rows() {
        let z = logits(4, 3, 2.0, 6);
        let mask = [true, false, true, false];
        let r = gem_objective(&z, 1.0, 1.0, false, None, Some(&mask)).unwrap();
        assert!(r.logit_grad.data()[3..6].iter().all(|g| *g == 0.0));
        let sub = z.select(&[0, 2]);
        let full = em_loss(&sub).unwrap();
        assert!((full.value - r.value).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_matches_finite_differences() {
        let z = logits(3, 4, 2.0, 12);
        let y = [0, 3, 1];
        let r = cross_entropy(&z, &y).unwrap();
        fd_check(&z, |zz| cross_entropy(zz, &y).unwrap().value, &r.logit_grad);
    }

    proptest! {
        #[test]
        fn softmax_keeps_argmax(z in proptest::collection::vec(-20.0f64..20.0, 2..10), log_tau in -3.0f64..3.0) {
            let tau = 10f64.powf(log_tau);
            let p = softmax_t(&z, tau);
            let am = |v: &[f64]| v.iter().enumerate().fold(0, |b, (i, x)| if *x > v[b] { i } else { b });
            let total: f64 = p.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            // Ties after tempering may merge, but the original maximum stays maximal.
            let top = am(&z);
            prop_assert!(p.iter().all(|x| *x <= p[top]));
        }

        #[test]
        fn gradient_rows_sum_to_zero(z in proptest::collection::vec(-10.0f64..10.0, 12),
                                     tp in 1.0f64..7.0, extra in 0.0f64..5.0, detach in any::<bool>()) {
            let t = Tensor::from_vec(&[3, 4], z).unwrap();
            let r = gem_objective(&t, tp, tp + extra, detach, None, None).unwrap();
            for row in r.logit_grad.data().chunks(4) {
                prop_assert!(row.iter().sum::<f64>().abs() <= 1e-9);
            }
        }
    }
}
