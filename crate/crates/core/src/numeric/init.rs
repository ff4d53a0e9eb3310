//! Weight initializers.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Tensor;

/// Normal with standard deviation `std`, resampled outside two deviations.
pub fn truncated_normal(rows: usize, cols: usize, std: f32, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| loop {
        let z: f32 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break z * std;
        }
    })
}

/// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (rows + cols) as f32).sqrt();
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-bound..=bound))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn truncated_normal_bounds_and_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = truncated_normal(200, 50, 0.02, &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        let var = t.data().iter().map(|v| v * v).sum::<f32>() / t.len() as f32;
        // Variance of a normal truncated at two deviations is about 0.774 sigma^2.
        assert!((var.sqrt() / 0.02 - 0.88).abs() < 0.03);
    }

    #[test]
    fn glorot_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = glorot_uniform(10, 14, &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.5));
    }
}
