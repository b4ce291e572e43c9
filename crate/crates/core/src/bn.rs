//! Batch-normalization statistics machinery.
//!
//! Covers per-channel batch and per-image statistics, normalization with a
//! convex mix of source (running) and test (batch) statistics, the dynamic
//! mixing coefficient computed from statistic distances, and the
//! re-parameterization that folds the source statistics into the affine pair
//! so the layer can normalize with test statistics alone.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Per-channel mean and (population) variance.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> ChannelStats<T> {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// `(mean, sqrt(var + eps))` view used by the distance metric.
    pub fn mean_std(&self, eps: T) -> MeanStd<T> {
        MeanStd {
            mean: self.mean.clone(),
            std: self.var.iter().map(|v| (*v + eps).sqrt()).collect(),
        }
    }
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanStd<T> {
    pub mean: Vec<T>,
    pub std: Vec<T>,
}

/// Which statistics a BN layer normalizes with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BnMode {
    /// Running (source) statistics, i.e. ordinary inference.
    Source,
    /// Current-batch (test) statistics only.
    AdaBn,
    /// `alpha * source + (1 - alpha) * test` with a fixed alpha.
    MixFixed(f64),
    /// Mixed statistics with alpha computed per batch from statistic distances.
    AdaMix,
}

impl BnMode {
    pub fn validate(self) -> Result<()> {
        match self {
            BnMode::MixFixed(a) if !(0.0..=1.0).contains(&a) => {
                Err(Error::Config(format!("fixed alpha {a} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

/// Everything one BN layer needs for a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BnLayerState<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    /// Source statistics accumulated during training.
    pub running: ChannelStats<T>,
    pub eps: T,
    pub mode: BnMode,
    /// Re-parameterized affine pair; when present the layer uses test statistics only.
    pub transformed: Option<(Vec<T>, Vec<T>)>,
}

impl<T: Real> BnLayerState<T> {
    pub fn new(gamma: Vec<T>, beta: Vec<T>, running: ChannelStats<T>, eps: T, mode: BnMode) -> Result<Self> {
        let state = BnLayerState {
            gamma,
            beta,
            running,
            eps,
            mode,
            transformed: None,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > T::zero()) {
            return Err(Error::Config("BN eps must be positive".into()));
        }
        self.mode.validate()?;
        let c = self.gamma.len();
        let lens = [self.beta.len(), self.running.mean.len(), self.running.var.len()];
        if lens.iter().any(|&l| l != c) {
            return Err(Error::Shape(format!("BN parameter lengths disagree: gamma {c}, others {lens:?}")));
        }
        if let Some((g, b)) = &self.transformed {
            if g.len() != c || b.len() != c {
                return Err(Error::Shape("transformed affine length mismatch".into()));
            }
        }
        Ok(())
    }
}

/// Per-layer record of the dynamic coefficient and the distances behind it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaRecord {
    pub layer_index: usize,
    pub alpha: f64,
    pub d_st: f64,
    pub mean_d_s: f64,
    pub mean_d_t: f64,
}

/// Per-channel mean and biased variance over N, H, W.
pub fn batch_stats<T: Real>(x: &Tensor<T>) -> Result<ChannelStats<T>> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let count = n * hw;
    if count == 0 {
        return Err(Error::Shape("batch statistics need N*H*W >= 1".into()));
    }
    let data = x.data();
    let mut mean = Vec::with_capacity(c);
    let mut var = Vec::with_capacity(c);
    for ch in 0..c {
        let mut sum = 0.0f64;
        for s in 0..n {
            let base = (s * c + ch) * hw;
            sum += data[base..base + hw].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let m = sum / count as f64;
        let mut sq = 0.0f64;
        for s in 0..n {
            let base = (s * c + ch) * hw;
            sq += data[base..base + hw]
                .iter()
                .map(|v| {
                    let d = v.as_f64() - m;
                    d * d
                })
                .sum::<f64>();
        }
        mean.push(T::lit(m));
        var.push(T::lit(sq / count as f64));
    }
    Ok(ChannelStats { mean, var })
}

/// Spatial mean and `sqrt(var + eps)` per channel for sample `index`.
///
/// Pass `eps = 0` for the plain population standard deviation.
pub fn image_stats<T: Real>(x: &Tensor<T>, index: usize, eps: T) -> Result<MeanStd<T>> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    if index >= n {
        return Err(Error::Shape(format!("sample {index} out of range for batch {n}")));
    }
    if hw == 0 {
        return Err(Error::Shape("image statistics need H*W >= 1".into()));
    }
    let sample = x.sample(index);
    let mut mean = Vec::with_capacity(c);
    let mut std = Vec::with_capacity(c);
    for ch in 0..c {
        let plane = &sample[ch * hw..(ch + 1) * hw];
        let m = plane.iter().map(|v| v.as_f64()).sum::<f64>() / hw as f64;
        let v = plane
            .iter()
            .map(|v| {
                let d = v.as_f64() - m;
                d * d
            })
            .sum::<f64>()
            / hw as f64;
        mean.push(T::lit(m));
        std.push((T::lit(v) + eps).sqrt());
    }
    Ok(MeanStd { mean, std })
}

/// `||mean_a - mean_b||_2 + ||std_a - std_b||_2`.
pub fn stats_distance<T: Real>(a: &MeanStd<T>, b: &MeanStd<T>) -> T {
    debug_assert_eq!(a.mean.len(), b.mean.len());
    let l2 = |u: &[T], v: &[T]| {
        u.iter()
            .zip(v)
            .map(|(x, y)| {
                let d = *x - *y;
                d * d
            })
            .sum::<T>()
            .sqrt()
    };
    l2(&a.mean, &b.mean) + l2(&a.std, &b.std)
}

/// Dynamic mixing coefficient `1 - mean_i(d_st / (d_t^i + d_s^i))`.
///
/// Samples whose two distances are both zero contribute a ratio of 0.
pub fn compute_alpha<T: Real>(
    layer_index: usize,
    source: &MeanStd<T>,
    test: &MeanStd<T>,
    per_image: &[MeanStd<T>],
) -> Result<AlphaRecord> {
    if per_image.is_empty() {
        return Err(Error::Precondition("alpha needs at least one image".into()));
    }
    let c = source.mean.len();
    if test.mean.len() != c || per_image.iter().any(|s| s.mean.len() != c) {
        return Err(Error::Shape("alpha statistics have different channel counts".into()));
    }
    let d_st = stats_distance(source, test);
    let mut ratio_sum = T::zero();
    let mut sum_s = T::zero();
    let mut sum_t = T::zero();
    for img in per_image {
        let d_s = stats_distance(img, source);
        let d_t = stats_distance(img, test);
        let denom = d_t + d_s;
        if denom > T::zero() {
            ratio_sum += d_st / denom;
        }
        sum_s += d_s;
        sum_t += d_t;
    }
    let n = T::lit(per_image.len() as f64);
    let alpha = (T::one() - ratio_sum / n).max(T::zero()).min(T::one());
    Ok(AlphaRecord {
        layer_index,
        alpha: alpha.as_f64(),
        d_st: d_st.as_f64(),
        mean_d_s: (sum_s / n).as_f64(),
        mean_d_t: (sum_t / n).as_f64(),
    })
}

/// `alpha * source + (1 - alpha) * test`, channel-wise.
pub fn mix_stats<T: Real>(source: &ChannelStats<T>, test: &ChannelStats<T>, alpha: T) -> ChannelStats<T> {
    let beta = T::one() - alpha;
    ChannelStats {
        mean: source.mean.iter().zip(&test.mean).map(|(s, t)| alpha * *s + beta * *t).collect(),
        var: source.var.iter().zip(&test.var).map(|(s, t)| alpha * *s + beta * *t).collect(),
    }
}

/// `(x - mean) / sqrt(var + eps) * gamma + beta` per channel.
pub fn normalize<T: Real>(x: &Tensor<T>, stats: &ChannelStats<T>, gamma: &[T], beta: &[T], eps: T) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if stats.channels() != c || gamma.len() != c || beta.len() != c {
        return Err(Error::Shape(format!("BN expects {} channels, input has {c}", gamma.len())));
    }
    let hw = h * w;
    let mut out = Tensor::zeros(x.shape());
    let src = x.data();
    let dst = out.data_mut();
    for s in 0..n {
        for ch in 0..c {
            let inv = T::one() / (stats.var[ch] + eps).sqrt();
            let (m, g, b) = (stats.mean[ch], gamma[ch], beta[ch]);
            let base = (s * c + ch) * hw;
            for (o, v) in dst[base..base + hw].iter_mut().zip(&src[base..base + hw]) {
                *o = (*v - m) * inv * g + b;
            }
        }
    }
    Ok(out)
}

/// Normalization with mixed source/test statistics at a given alpha.
pub fn mixbn_forward<T: Real>(
    x: &Tensor<T>,
    state: &BnLayerState<T>,
    test: &ChannelStats<T>,
    alpha: T,
) -> Result<Tensor<T>> {
    let mixed = mix_stats(&state.running, test, alpha);
    normalize(x, &mixed, &state.gamma, &state.beta, state.eps)
}

/// Folds the source statistics into a new affine pair `(gamma', beta')`.
///
/// Normalizing with test statistics and the returned pair reproduces
/// [`mixbn_forward`] at the same alpha.
pub fn transform_affine<T: Real>(state: &BnLayerState<T>, test: &ChannelStats<T>, alpha: T) -> (Vec<T>, Vec<T>) {
    let mixed = mix_stats(&state.running, test, alpha);
    let eps = state.eps;
    let mut gamma_t = Vec::with_capacity(state.channels());
    let mut beta_t = Vec::with_capacity(state.channels());
    for ch in 0..state.channels() {
        let sigma_t = (test.var[ch] + eps).sqrt();
        let sigma_mix = (mixed.var[ch] + eps).sqrt();
        let g = sigma_t / sigma_mix * state.gamma[ch];
        let b = alpha * (test.mean[ch] - state.running.mean[ch]) / sigma_t * g + state.beta[ch];
        gamma_t.push(g);
        beta_t.push(b);
    }
    (gamma_t, beta_t)
}

/// Statistics a BN forward pass actually used.
#[derive(Debug, Clone)]
pub struct BnTrace<T> {
    pub test: ChannelStats<T>,
    /// Weight on the source statistics (0 for test-only, 1 for source-only).
    pub alpha: T,
    pub record: Option<AlphaRecord>,
}

/// Values cached by [`bn_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    input: Tensor<T>,
    mean: Vec<T>,
    inv_std: Vec<T>,
    test_mean: Vec<T>,
    test_weight: T,
    gamma: Vec<T>,
}

/// Gradients of one BN layer.
#[derive(Debug, Clone)]
pub struct BnGrads<T> {
    /// Gradient of the active scale (gamma, or gamma' when transformed).
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub input: Tensor<T>,
}

/// Forward pass of one BN layer under `state.mode`.
///
/// Batch statistics are always recomputed from `x`. In `AdaMix` mode alpha
/// is derived from `x` first; `layer_index` labels the resulting record.
pub fn bn_forward<T: Real>(
    x: &Tensor<T>,
    state: &BnLayerState<T>,
    layer_index: usize,
) -> Result<(Tensor<T>, BnCache<T>, BnTrace<T>)> {
    state.validate()?;
    let (n, c, _, _) = x.dims4()?;
    if c != state.channels() {
        return Err(Error::Shape(format!("BN layer {layer_index} expects {} channels, got {c}", state.channels())));
    }
    let test = batch_stats(x)?;
    let (alpha, record) = if state.transformed.is_some() {
        (T::zero(), None)
    } else {
        match state.mode {
            BnMode::Source => (T::one(), None),
            BnMode::AdaBn => (T::zero(), None),
            BnMode::MixFixed(a) => (T::lit(a), None),
            BnMode::AdaMix => {
                let source = state.running.mean_std(state.eps);
                let batch = test.mean_std(state.eps);
                let per_image = (0..n)
                    .map(|i| image_stats(x, i, state.eps))
                    .collect::<Result<Vec<_>>>()?;
                let rec = compute_alpha(layer_index, &source, &batch, &per_image)?;
                (T::lit(rec.alpha), Some(rec))
            }
        }
    };
    let (gamma, beta) = match &state.transformed {
        Some((g, b)) => (g.as_slice(), b.as_slice()),
        None => (state.gamma.as_slice(), state.beta.as_slice()),
    };
    let used = mix_stats(&state.running, &test, alpha);
    let out = normalize(x, &used, gamma, beta, state.eps)?;
    let cache = BnCache {
        input: x.clone(),
        inv_std: used.var.iter().map(|v| T::one() / (*v + state.eps).sqrt()).collect(),
        mean: used.mean,
        test_mean: test.mean.clone(),
        test_weight: T::one() - alpha,
        gamma: gamma.to_vec(),
    };
    Ok((out, cache, BnTrace { test, alpha, record }))
}

/// Backward pass treating the batch statistics as functions of the input.
///
/// Alpha is held constant (no gradient flows through the distance terms).
pub fn bn_backward<T: Real>(cache: &BnCache<T>, grad_out: &Tensor<T>) -> Result<BnGrads<T>> {
    let x = &cache.input;
    if grad_out.shape() != x.shape() {
        return Err(Error::Shape(format!(
            "BN backward: gradient shape {:?} vs cached input {:?}",
            grad_out.shape(),
            x.shape()
        )));
    }
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let count = T::lit((n * hw) as f64);
    let wt = cache.test_weight;
    let xs = x.data();
    let gs = grad_out.data();
    let mut d_gamma = vec![T::zero(); c];
    let mut d_beta = vec![T::zero(); c];
    let mut d_input = Tensor::zeros(x.shape());
    let dx = d_input.data_mut();
    for ch in 0..c {
        let (m, inv, g) = (cache.mean[ch], cache.inv_std[ch], cache.gamma[ch]);
        let mut sum_g = T::zero();
        let mut sum_g_xhat = T::zero();
        for s in 0..n {
            let base = (s * c + ch) * hw;
            for i in base..base + hw {
                let xhat = (xs[i] - m) * inv;
                sum_g += gs[i];
                sum_g_xhat += gs[i] * xhat;
            }
        }
        d_beta[ch] = sum_g;
        d_gamma[ch] = sum_g_xhat;
        // Gradients w.r.t. the normalized value are gamma * g.
        let mean_gx = g * sum_g / count;
        let proj = g * sum_g_xhat / count;
        let mu_t = cache.test_mean[ch];
        for s in 0..n {
            let base = (s * c + ch) * hw;
            for i in base..base + hw {
                let gx = g * gs[i];
                dx[i] = inv * (gx - wt * mean_gx - wt * (xs[i] - mu_t) * inv * proj);
            }
        }
    }
    Ok(BnGrads {
        gamma: d_gamma,
        beta: d_beta,
        input: d_input,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64, shift: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale + shift).collect()).unwrap()
    }

    fn random_state(c: usize, rng: &mut ChaCha8Rng, mode: BnMode) -> BnLayerState<f64> {
        BnLayerState::new(
            (0..c).map(|_| rng.gen_range(0.5..1.5)).collect(),
            (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            ChannelStats {
                mean: (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                var: (0..c).map(|_| rng.gen_range(0.2..2.0)).collect(),
            },
            1e-12,
            mode,
        )
        .unwrap()
    }

    #[test]
    fn constant_tensor_stats() {
        let x = Tensor::<f64>::full(&[2, 3, 2, 2], 3.0);
        let st = batch_stats(&x).unwrap();
        assert_eq!(st.mean, vec![3.0; 3]);
        assert_eq!(st.var, vec![0.0; 3]);
        let im = image_stats(&x, 1, 0.0).unwrap();
        assert_eq!(im.std, vec![0.0; 3]);
    }

    #[test]
    fn two_point_channel_stats() {
        let x = Tensor::<f64>::from_vec(&[2, 1, 1, 2], vec![0.0, 2.0, 2.0, 0.0]).unwrap();
        let st = batch_stats(&x).unwrap();
        assert_eq!(st.mean, vec![1.0]);
        assert_eq!(st.var, vec![1.0]);
    }

    #[test]
    fn batch_stats_matches_two_pass_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_tensor(&[2, 3, 4, 4], &mut rng, 2.0, 0.3);
        let st = batch_stats(&x).unwrap();
        for c in 0..3 {
            let mut vals = Vec::new();
            for n in 0..2 {
                for i in 0..16 {
                    vals.push(x.data()[(n * 3 + c) * 16 + i]);
                }
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!((st.mean[c] - m).abs() <= 1e-12);
            assert!((st.var[c] - v).abs() <= 1e-12);
        }
    }

    #[test]
    fn single_sample_image_stats_equal_batch_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&[1, 4, 3, 5], &mut rng, 1.0, 0.0);
        let b = batch_stats(&x).unwrap();
        let im = image_stats(&x, 0, 0.0).unwrap();
        for c in 0..4 {
            assert!((im.mean[c] - b.mean[c]).abs() <= 1e-15);
            assert!((im.std[c] - b.var[c].sqrt()).abs() <= 1e-15);
        }
    }

    #[test]
    fn image_stats_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_tensor(&[3, 2, 4, 4], &mut rng, 1.5, 1.0);
        let im = image_stats(&x, 2, 0.0).unwrap();
        for c in 0..2 {
            let plane = &x.sample(2)[c * 16..(c + 1) * 16];
            let m = plane.iter().sum::<f64>() / 16.0;
            let sd = (plane.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 16.0).sqrt();
            assert!((im.mean[c] - m).abs() <= 1e-12);
            assert!((im.std[c] - sd).abs() <= 1e-12);
        }
    }

    #[test]
    fn distance_three_four_five() {
        let a = MeanStd { mean: vec![0.0, 0.0], std: vec![1.0, 1.0] };
        let b = MeanStd { mean: vec![3.0, 4.0], std: vec![1.0, 1.0] };
        assert_eq!(stats_distance(&a, &a), 0.0);
        assert_eq!(stats_distance(&a, &b), 5.0);
        assert_eq!(stats_distance(&b, &a), 5.0);
    }

    #[test]
    fn alpha_is_one_when_source_equals_test() {
        let s = MeanStd { mean: vec![0.5, -0.2], std: vec![1.0, 2.0] };
        let imgs = vec![
            MeanStd { mean: vec![0.1, 0.0], std: vec![0.9, 2.1] },
            MeanStd { mean: vec![0.9, -0.4], std: vec![1.1, 1.9] },
        ];
        let rec = compute_alpha(0, &s, &s.clone(), &imgs).unwrap();
        assert_eq!(rec.alpha, 1.0);
        assert_eq!(rec.d_st, 0.0);
    }

    #[test]
    fn alpha_is_zero_for_single_image_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(&[1, 3, 4, 4], &mut rng, 1.0, 0.5);
        let eps = 1e-12;
        let test = batch_stats(&x).unwrap().mean_std(eps);
        let src = MeanStd { mean: vec![0.0; 3], std: vec![1.0; 3] };
        let img = image_stats(&x, 0, eps).unwrap();
        let rec = compute_alpha(0, &src, &test, &[img]).unwrap();
        assert!(rec.alpha.abs() <= 1e-12, "alpha = {}", rec.alpha);
    }

    #[test]
    fn degenerate_distances_count_as_zero_ratio() {
        let s = MeanStd { mean: vec![1.0], std: vec![1.0] };
        let rec = compute_alpha(0, &s, &s.clone(), &[s.clone(), s.clone()]).unwrap();
        assert_eq!(rec.alpha, 1.0);
    }

    #[test]
    fn alpha_matches_reference_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let c = 6;
        let draw = |rng: &mut ChaCha8Rng| MeanStd {
            mean: (0..c).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<f64>>(),
            std: (0..c).map(|_| rng.gen_range(0.1..3.0)).collect::<Vec<f64>>(),
        };
        let src = draw(&mut rng);
        let test = draw(&mut rng);
        let imgs: Vec<_> = (0..8).map(|_| draw(&mut rng)).collect();
        let dist = |a: &MeanStd<f64>, b: &MeanStd<f64>| {
            let mut dm = 0.0;
            let mut ds = 0.0;
            for k in 0..c {
                dm += (a.mean[k] - b.mean[k]).powi(2);
                ds += (a.std[k] - b.std[k]).powi(2);
            }
            dm.sqrt() + ds.sqrt()
        };
        let d_st = dist(&src, &test);
        let mut acc = 0.0;
        for im in &imgs {
            acc += d_st / (dist(im, &test) + dist(im, &src));
        }
        let want = 1.0 - acc / 8.0;
        let rec = compute_alpha(2, &src, &test, &imgs).unwrap();
        assert!((rec.alpha - want).abs() <= 1e-12);
        assert_eq!(rec.layer_index, 2);
    }

    #[test]
    fn mixbn_alpha_one_maps_source_mean_to_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let state = random_state(3, &mut rng, BnMode::Source);
        let mut x = Tensor::zeros(&[2, 3, 2, 2]);
        for s in 0..2 {
            for c in 0..3 {
                for i in 0..4 {
                    x.data_mut()[(s * 3 + c) * 4 + i] = state.running.mean[c];
                }
            }
        }
        let test = batch_stats(&x).unwrap();
        let y = mixbn_forward(&x, &state, &test, 1.0).unwrap();
        for s in 0..2 {
            for c in 0..3 {
                for i in 0..4 {
                    assert_eq!(y.data()[(s * 3 + c) * 4 + i], state.beta[c]);
                }
            }
        }
    }

    #[test]
    fn mixbn_endpoints_are_bitwise_adabn_and_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(&[4, 3, 3, 3], &mut rng, 2.0, 0.5);
        let mut state = random_state(3, &mut rng, BnMode::AdaBn);
        let test = batch_stats(&x).unwrap();
        let mix0 = mixbn_forward(&x, &state, &test, 0.0).unwrap();
        let (ada, _, _) = bn_forward(&x, &state, 0).unwrap();
        assert_eq!(mix0, ada);
        state.mode = BnMode::Source;
        let mix1 = mixbn_forward(&x, &state, &test, 1.0).unwrap();
        let (src, _, _) = bn_forward(&x, &state, 0).unwrap();
        assert_eq!(mix1, src);
    }

    #[test]
    fn mixbn_matches_reference_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_tensor(&[3, 2, 3, 3], &mut rng, 1.0, 0.2);
        let state = random_state(2, &mut rng, BnMode::MixFixed(0.3));
        let test = batch_stats(&x).unwrap();
        let a = 0.3;
        let y = mixbn_forward(&x, &state, &test, a).unwrap();
        for s in 0..3 {
            for c in 0..2 {
                let mu = a * state.running.mean[c] + (1.0 - a) * test.mean[c];
                let var = a * state.running.var[c] + (1.0 - a) * test.var[c];
                for i in 0..9 {
                    let idx = (s * 2 + c) * 9 + i;
                    let want = (x.data()[idx] - mu) / (var + state.eps).sqrt() * state.gamma[c] + state.beta[c];
                    assert!((y.data()[idx] - want).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn transform_is_identity_at_alpha_zero_and_without_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let state = random_state(4, &mut rng, BnMode::AdaMix);
        let test = ChannelStats {
            mean: (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            var: (0..4).map(|_| rng.gen_range(0.1..2.0)).collect(),
        };
        let (g, b) = transform_affine(&state, &test, 0.0);
        assert_eq!(g, state.gamma);
        assert_eq!(b, state.beta);
        let (g, b) = transform_affine(&state, &state.running.clone(), 0.63);
        for c in 0..4 {
            assert!((g[c] - state.gamma[c]).abs() <= 1e-15);
            assert!((b[c] - state.beta[c]).abs() <= 1e-15);
        }
    }

    #[test]
    fn transformed_path_reproduces_mixed_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let x = random_tensor(&[4, 3, 3, 3], &mut rng, 3.0, 1.0);
            let mut state = random_state(3, &mut rng, BnMode::AdaBn);
            let alpha: f64 = rng.gen_range(0.0..1.0);
            let test = batch_stats(&x).unwrap();
            let mixed = mixbn_forward(&x, &state, &test, alpha).unwrap();
            state.transformed = Some(transform_affine(&state, &test, alpha));
            let (y, _, _) = bn_forward(&x, &state, 0).unwrap();
            assert!(mixed.max_abs_diff(&y) <= 1e-12);
        }
    }

    #[test]
    fn transformed_equals_adabn_for_unchanged_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_tensor(&[2, 2, 3, 3], &mut rng, 1.0, 0.0);
        let mut state = random_state(2, &mut rng, BnMode::AdaBn);
        let (a, _, _) = bn_forward(&x, &state, 0).unwrap();
        state.mode = BnMode::MixFixed(0.7);
        state.transformed = Some((state.gamma.clone(), state.beta.clone()));
        let (b, _, _) = bn_forward(&x, &state, 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn beta_gradient_counts_elements() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_tensor(&[2, 3, 2, 4], &mut rng, 1.0, 0.0);
        let state = BnLayerState::new(
            vec![1.0; 3],
            vec![0.0; 3],
            ChannelStats { mean: vec![0.0; 3], var: vec![1.0; 3] },
            1e-12,
            BnMode::AdaBn,
        )
        .unwrap();
        let (y, cache, _) = bn_forward(&x, &state, 0).unwrap();
        let g = bn_backward(&cache, &Tensor::full(y.shape(), 1.0)).unwrap();
        assert_eq!(g.beta, vec![16.0; 3]);
    }

    fn weighted_loss(y: &Tensor<f64>, w: &[f64]) -> f64 {
        y.data().iter().zip(w).map(|(a, b)| a * b + 0.1 * a * a * b).sum()
    }

    fn weighted_loss_grad(y: &Tensor<f64>, w: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(y.shape(), y.data().iter().zip(w).map(|(a, b)| b + 0.2 * a * b).collect()).unwrap()
    }

    fn rel_ok(analytic: f64, numeric: f64) -> bool {
        if analytic.abs() < 1e-8 {
            (analytic - numeric).abs() <= 1e-6
        } else {
            (analytic - numeric).abs() / analytic.abs().max(numeric.abs()) <= 1e-4
        }
    }

    #[test]
    fn backward_matches_finite_differences_in_every_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let modes = [BnMode::AdaBn, BnMode::Source, BnMode::MixFixed(0.4), BnMode::AdaMix];
        for mode in modes {
            for transformed in [false, true] {
                let x = random_tensor(&[3, 2, 3, 3], &mut rng, 1.0, 0.4);
                let mut state = random_state(2, &mut rng, mode);
                if transformed {
                    let test = batch_stats(&x).unwrap();
                    state.transformed = Some(transform_affine(&state, &test, 0.6));
                }
                let w: Vec<f64> = (0..x.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let (y, cache, trace) = bn_forward(&x, &state, 0).unwrap();
                let grads = bn_backward(&cache, &weighted_loss_grad(&y, &w)).unwrap();
                let h = 1e-4;
                // AdaMix holds alpha fixed in backward; pin it for the oracle too.
                let mut probe = state.clone();
                if mode == BnMode::AdaMix && !transformed {
                    probe.mode = BnMode::MixFixed(trace.alpha);
                }
                let eval = |s: &BnLayerState<f64>, x: &Tensor<f64>| {
                    let (y, _, _) = bn_forward(x, s, 0).unwrap();
                    weighted_loss(&y, &w)
                };
                for i in 0..x.numel() {
                    let mut xp = x.clone();
                    xp.data_mut()[i] += h;
                    let mut xm = x.clone();
                    xm.data_mut()[i] -= h;
                    let num = (eval(&probe, &xp) - eval(&probe, &xm)) / (2.0 * h);
                    assert!(rel_ok(grads.input.data()[i], num), "{mode:?} t={transformed} dx[{i}] {} vs {num}", grads.input.data()[i]);
                }
                for c in 0..2 {
                    for (which, analytic) in [(0, grads.gamma[c]), (1, grads.beta[c])] {
                        let bump = |s: &mut BnLayerState<f64>, d: f64| {
                            let target = match (&mut s.transformed, which) {
                                (Some((g, _)), 0) => &mut g[c],
                                (Some((_, b)), _) => &mut b[c],
                                (None, 0) => &mut s.gamma[c],
                                (None, _) => &mut s.beta[c],
                            };
                            *target += d;
                        };
                        let mut sp = probe.clone();
                        bump(&mut sp, h);
                        let mut sm = probe.clone();
                        bump(&mut sm, -h);
                        let num = (eval(&sp, &x) - eval(&sm, &x)) / (2.0 * h);
                        assert!(rel_ok(analytic, num), "{mode:?} affine {which} ch {c}: {analytic} vs {num}");
                    }
                }
            }
        }
    }

    #[test]
    fn fixed_alpha_outside_unit_interval_is_rejected() {
        let r = BnLayerState::<f64>::new(
            vec![1.0],
            vec![0.0],
            ChannelStats { mean: vec![0.0], var: vec![1.0] },
            1e-5,
            BnMode::MixFixed(1.5),
        );
        assert!(r.is_err());
    }
}
