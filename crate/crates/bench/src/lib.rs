//! Shared inputs for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tta_core::{Architecture, ForwardMode, Model, Tensor};

/// Uniform `[0, 1)` images of shape `n x 3 x size x size`.
pub fn images(n: usize, size: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = n * 3 * size * size;
    Tensor::from_vec(&[n, 3, size, size], (0..len).map(|_| rng.gen::<f32>()).collect()).expect("shape")
}

/// Logits `n x classes` with entries in `[-scale, scale)`.
pub fn logits(n: usize, classes: usize, scale: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(&[n, classes], (0..n * classes).map(|_| rng.gen_range(-scale..scale)).collect()).expect("shape")
}

/// SmallConvNet whose running statistics come from a few training-mode passes.
pub fn warmed_model(classes: usize, seed: u64) -> Model<f32> {
    let mut m = Model::new(Architecture::small_convnet(classes), seed).expect("valid architecture");
    for k in 0..5 {
        m.forward(&images(32, 32, seed + k), ForwardMode::Train).expect("forward");
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inputs_have_requested_shapes() {
        assert_eq!(images(2, 8, 0).shape(), &[2, 3, 8, 8]);
        assert_eq!(logits(3, 5, 2.0, 0).shape(), &[3, 5]);
        let m = warmed_model(5, 1);
        assert_ne!(m.param("bn1.running_var").unwrap().data()[0], 1.0);
    }
}
