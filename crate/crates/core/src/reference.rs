//! Seeded synthetic data: a Gaussian mixture binarized by the hyperplane
//! coder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::binarizer::HyperplaneCoder;
use crate::bitcore::{Dataset, Label, RealTable};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceConfig {
    pub n: usize,
    pub queries: usize,
    pub dim: usize,
    pub components: usize,
    pub d_bits: usize,
    /// Standard deviation of component means around the origin.
    pub center_scale: f64,
    /// Standard deviation of points around their component mean.
    pub spread: f64,
    pub seed: u64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        ReferenceConfig {
            n: 10_000,
            queries: 1_000,
            dim: 64,
            components: 64,
            d_bits: 128,
            center_scale: 1.0,
            spread: 0.75,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReferenceSet {
    /// Labels `0..n`.
    pub base: Dataset,
    /// Labels `0..queries`, drawn from the same mixture.
    pub queries: Dataset,
    pub coder: HyperplaneCoder,
}

pub fn generate(config: &ReferenceConfig) -> Result<ReferenceSet> {
    if config.n == 0 || config.dim == 0 || config.components == 0 {
        return Err(Error::usage("reference set needs n, dim and components >= 1"));
    }
    if !(config.spread > 0.0 && config.center_scale >= 0.0) {
        return Err(Error::usage("reference spread must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let means: Vec<f64> = (0..config.components * config.dim)
        .map(|_| normal(&mut rng) * config.center_scale)
        .collect();
    let draw = |count: usize, rng: &mut ChaCha8Rng| -> Result<RealTable> {
        let mut values = Vec::with_capacity(count * config.dim);
        for _ in 0..count {
            let c = rng.random_range(0..config.components);
            let mean = &means[c * config.dim..(c + 1) * config.dim];
            values.extend(mean.iter().map(|m| (m + normal(rng) * config.spread) as f32));
        }
        RealTable::new(config.dim, (0..count as u64).map(Label).collect(), values)
    };
    let base_real = draw(config.n, &mut rng)?;
    let mut qrng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let query_real = draw(config.queries, &mut qrng)?;
    let coder = HyperplaneCoder::fit_table(&base_real, config.d_bits, config.seed.wrapping_add(2))?;
    Ok(ReferenceSet {
        base: coder.encode_table(&base_real)?,
        queries: coder.encode_table(&query_real)?,
        coder,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_sized() {
        let cfg = ReferenceConfig {
            n: 500,
            queries: 20,
            ..ReferenceConfig::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.base, b.base);
        assert_eq!(a.queries, b.queries);
        assert_eq!(a.base.len(), 500);
        assert_eq!(a.queries.len(), 20);
        assert_eq!(a.base.d_bits(), 128);
        assert_eq!(a.base.reals().unwrap().dim(), 64);
        let c = generate(&ReferenceConfig { seed: 7, ..cfg }).unwrap();
        assert_ne!(a.base, c.base);
    }
}
