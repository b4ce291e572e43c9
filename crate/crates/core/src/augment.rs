//! Test-time augmentation: random resized crop plus horizontal flip.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Crop area as a fraction of the image, sampled uniformly.
    pub scale_min: f64,
    pub scale_max: f64,
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            scale_min: 0.8,
            scale_max: 1.0,
            flip_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.scale_min && self.scale_min <= self.scale_max && self.scale_max <= 1.0) {
            return Err(Error::Config(format!(
                "crop scale range must satisfy 0 < min <= max <= 1, got [{}, {}]",
                self.scale_min, self.scale_max
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip probability {} outside [0, 1]", self.flip_prob)));
        }
        Ok(())
    }
}

/// `m` independently augmented copies of `batch` (rank 4), deterministic in `seed`.
pub fn augment_views<T: Real>(batch: &Tensor<T>, m: usize, seed: u64, cfg: &AugmentConfig) -> Result<Vec<Tensor<T>>> {
    cfg.validate()?;
    if m == 0 {
        return Err(Error::Config("need at least one augmented view".into()));
    }
    let (n, c, h, w) = batch.dims4()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut views = Vec::with_capacity(m);
    for _ in 0..m {
        let mut out = Tensor::zeros(batch.shape());
        for i in 0..n {
            let scale = if cfg.scale_min == cfg.scale_max {
                cfg.scale_min
            } else {
                rng.gen_range(cfg.scale_min..=cfg.scale_max)
            };
            let side = scale.sqrt();
            let (ch, cw) = (side * h as f64, side * w as f64);
            let y0 = rng.gen::<f64>() * (h as f64 - ch);
            let x0 = rng.gen::<f64>() * (w as f64 - cw);
            let flip = rng.gen::<f64>() < cfg.flip_prob;
            let src = batch.sample(i);
            let dst = &mut out.data_mut()[i * c * h * w..(i + 1) * c * h * w];
            resize_crop(src, dst, c, h, w, (y0, x0, ch, cw), flip);
        }
        views.push(out);
    }
    Ok(views)
}

/// Bilinear resampling (half-pixel centers) of a crop window back to `h x w`.
fn resize_crop<T: Real>(
    src: &[T],
    dst: &mut [T],
    c: usize,
    h: usize,
    w: usize,
    (y0, x0, ch, cw): (f64, f64, f64, f64),
    flip: bool,
) {
    let axis = |o: usize, start: f64, extent: f64, len: usize| {
        let pos = start + (o as f64 + 0.5) * extent / len as f64 - 0.5;
        let pos = pos.clamp(0.0, (len - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, T::lit(pos - lo as f64))
    };
    let rows: Vec<_> = (0..h).map(|oy| axis(oy, y0, ch, h)).collect();
    let cols: Vec<_> = (0..w).map(|ox| axis(ox, x0, cw, w)).collect();
    for k in 0..c {
        let plane = &src[k * h * w..(k + 1) * h * w];
        for (oy, &(y_lo, y_hi, fy)) in rows.iter().enumerate() {
            for ox in 0..w {
                let (x_lo, x_hi, fx) = cols[if flip { w - 1 - ox } else { ox }];
                let top = lerp(plane[y_lo * w + x_lo], plane[y_lo * w + x_hi], fx);
                let bottom = lerp(plane[y_hi * w + x_lo], plane[y_hi * w + x_hi], fx);
                dst[k * h * w + oy * w + ox] = lerp(top, bottom, fy);
            }
        }
    }
}

fn lerp<T: Real>(a: T, b: T, f: T) -> T {
    if f == T::zero() {
        a
    } else {
        a + (b - a) * f
    }
}

/// Photometric and geometric jitter applied to training batches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JitterConfig {
    /// Additive brightness offset drawn from `[-brightness, brightness]`.
    pub brightness: f64,
    /// Contrast factor drawn from `[1 - contrast, 1 + contrast]` around the image mean.
    pub contrast: f64,
    pub grayscale_prob: f64,
    pub flip_prob: f64,
}

impl Default for JitterConfig {
    fn default() -> Self {
        JitterConfig {
            brightness: 0.2,
            contrast: 0.3,
            grayscale_prob: 0.1,
            flip_prob: 0.5,
        }
    }
}

impl JitterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.brightness) || !(0.0..1.0).contains(&self.contrast) {
            return Err(Error::Config("jitter brightness must lie in [0, 1] and contrast in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.grayscale_prob) || !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config("jitter probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Jitters every image of a rank-4 batch in place; values stay in `[0, 1]`.
pub fn jitter_batch<T: Real, R: Rng>(batch: &mut Tensor<T>, rng: &mut R, cfg: &JitterConfig) -> Result<()> {
    let (n, c, h, w) = batch.dims4()?;
    let len = c * h * w;
    for i in 0..n {
        let b = rng.gen_range(-cfg.brightness..=cfg.brightness);
        let k = rng.gen_range(1.0 - cfg.contrast..=1.0 + cfg.contrast);
        let gray = rng.gen::<f64>() < cfg.grayscale_prob;
        let flip = rng.gen::<f64>() < cfg.flip_prob;
        let img = &mut batch.data_mut()[i * len..(i + 1) * len];
        let mut v: Vec<f64> = img.iter().map(|x| x.as_f64()).collect();
        if gray && c == 3 {
            let plane = h * w;
            for p in 0..plane {
                let y = 0.299 * v[p] + 0.587 * v[plane + p] + 0.114 * v[2 * plane + p];
                for ch in 0..3 {
                    v[ch * plane + p] = y;
                }
            }
        }
        let mean = v.iter().sum::<f64>() / len as f64;
        for (dst, x) in img.iter_mut().zip(&v) {
            *dst = T::lit(((x - mean) * k + mean + b).clamp(0.0, 1.0));
        }
        if flip {
            for row in img.chunks_exact_mut(w) {
                row.reverse();
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_batch(n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[n, 3, 16, 16], (0..n * 3 * 256).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn collapsed_ranges_reproduce_the_input() {
        let x = random_batch(3, 1);
        let cfg = AugmentConfig {
            scale_min: 1.0,
            scale_max: 1.0,
            flip_prob: 0.0,
        };
        for v in augment_views(&x, 4, 9, &cfg).unwrap() {
            assert_eq!(v, x);
        }
    }

    #[test]
    fn certain_flip_mirrors_columns() {
        let x = random_batch(1, 2);
        let cfg = AugmentConfig {
            scale_min: 1.0,
            scale_max: 1.0,
            flip_prob: 1.0,
        };
        let v = &augment_views(&x, 1, 0, &cfg).unwrap()[0];
        for k in 0..3 {
            for y in 0..16 {
                for xx in 0..16 {
                    assert_eq!(v.data()[k * 256 + y * 16 + xx], x.data()[k * 256 + y * 16 + 15 - xx]);
                }
            }
        }
    }

    #[test]
    fn same_seed_same_views() {
        let x = random_batch(2, 3);
        let cfg = AugmentConfig::default();
        assert_eq!(augment_views(&x, 3, 5, &cfg).unwrap(), augment_views(&x, 3, 5, &cfg).unwrap());
        assert_ne!(augment_views(&x, 3, 5, &cfg).unwrap(), augment_views(&x, 3, 6, &cfg).unwrap());
    }

    #[test]
    fn crops_keep_mean_intensity() {
        let cfg = AugmentConfig::default();
        for seed in 0..100 {
            let x = random_batch(1, 100 + seed);
            let mean = x.data().iter().sum::<f64>() / x.numel() as f64;
            let v = &augment_views(&x, 1, seed, &cfg).unwrap()[0];
            let vm = v.data().iter().sum::<f64>() / v.numel() as f64;
            assert!((vm - mean).abs() <= 0.1 * mean, "seed {seed}: {vm} vs {mean}");
        }
    }

    #[test]
    fn neutral_jitter_is_identity_and_flip_mirrors() {
        let x = random_batch(2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut y = x.clone();
        let none = JitterConfig {
            brightness: 0.0,
            contrast: 0.0,
            grayscale_prob: 0.0,
            flip_prob: 0.0,
        };
        jitter_batch(&mut y, &mut rng, &none).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut f = x.clone();
        jitter_batch(&mut f, &mut rng, &JitterConfig { flip_prob: 1.0, ..none }).unwrap();
        assert_eq!(f.data()[5], x.data()[10]);
    }

    #[test]
    fn jitter_stays_in_unit_range() {
        let mut x = random_batch(4, 6);
        let cfg = JitterConfig {
            grayscale_prob: 0.5,
            ..JitterConfig::default()
        };
        jitter_batch(&mut x, &mut ChaCha8Rng::seed_from_u64(1), &cfg).unwrap();
        assert!(x.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(JitterConfig { contrast: 1.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn bad_ranges_are_rejected() {
        let x = random_batch(1, 4);
        let cfg = AugmentConfig {
            scale_min: 0.9,
            scale_max: 0.8,
            flip_prob: 0.5,
        };
        assert!(augment_views(&x, 1, 0, &cfg).is_err());
        assert!(augment_views(&x, 0, 0, &AugmentConfig::default()).is_err());
    }
}
