//! Parameter initialization.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Real, Tensor};

pub const INIT_STD: f64 = 0.02;

/// Tensor with i.i.d. `N(0, std²)` entries.
pub fn normal<F: Real, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<F> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| F::from_f64(dist.sample(rng)))
}

pub fn ones<F: Real>(shape: &[usize]) -> Tensor<F> {
    Tensor::full(shape, F::one())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normal_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t: Tensor<f64> = normal(&[200, 100], INIT_STD, &mut rng);
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-3);
        assert!((var.sqrt() - INIT_STD).abs() < 1e-3);
    }
}
