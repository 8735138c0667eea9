//! Weight initializers. All draw from a caller-provided RNG so model
//! construction is deterministic under a fixed seed.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// He-style fan-in initialization: `N(0, sqrt(2 / fan_in))`.
pub fn he_fan_in(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    assert!(fan_in > 0, "fan_in must be positive");
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    ArrayD::from_shape_fn(IxDyn(shape), |_| dist.sample(rng))
}

/// Truncated normal with the given std, resampling outside two standard
/// deviations (transformer-style initialization).
pub fn trunc_normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    let dist = Normal::new(0.0, std).unwrap();
    ArrayD::from_shape_fn(IxDyn(shape), |_| loop {
        let v: f64 = dist.sample(rng);
        if v.abs() <= 2.0 * std {
            return v;
        }
    })
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::ones(IxDyn(shape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn he_matches_fan_in_scale_statistically() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = he_fan_in(&mut rng, &[64, 128], 128);
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let expect = 2.0 / 128.0;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - expect).abs() < 0.2 * expect, "var {var} vs {expect}");
    }

    #[test]
    fn trunc_normal_stays_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = trunc_normal(&mut rng, &[1000], 0.02);
        assert!(w.iter().all(|v| v.abs() <= 0.04));
        assert!(w.iter().any(|v| v.abs() > 0.01), "degenerate draw");
    }

    #[test]
    fn initializers_are_deterministic() {
        let a = he_fan_in(&mut ChaCha8Rng::seed_from_u64(3), &[4, 4], 4);
        let b = he_fan_in(&mut ChaCha8Rng::seed_from_u64(3), &[4, 4], 4);
        assert_eq!(a, b);
    }
}
