use rand::Rng;

use crate::rng::SeedStream;
use crate::Tensor;

/// Uniform in `±sqrt(6 / fan_in)`, drawn from the stream named after the parameter.
pub fn fan_in_uniform(shape: &[usize], fan_in: usize, seeds: &SeedStream, name: &str) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let mut rng = seeds.rng(name);
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// Fan-in of a weight: product of every extent but the output one.
///
/// Convolutions are `[K, C, kh, kw]` (fan-in `C*kh*kw`); dense weights are
/// `[F, G]` (fan-in `F`).
pub fn conv_fan_in(shape: &[usize]) -> usize {
    shape[1..].iter().product()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounded_and_seeded() {
        let s = SeedStream::new(1);
        let w = fan_in_uniform(&[8, 3, 3, 3], 27, &s, "w");
        let bound = (6.0f64 / 27.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        assert_eq!(w, fan_in_uniform(&[8, 3, 3, 3], 27, &s, "w"));
        assert_ne!(w, fan_in_uniform(&[8, 3, 3, 3], 27, &s, "other"));
    }
}
