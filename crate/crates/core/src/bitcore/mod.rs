//! Packed binary codes, distance kernels and the dataset model.
//!
//! A code of `d_bits` bits is stored as `d_bits / 64` little-endian `u64`
//! words; bit `i` lives in word `i / 64` at position `i % 64`. This matches
//! the on-disk layout where bit 0 is the lowest bit of the first byte.

mod dataset;
pub mod io;

pub use dataset::{Dataset, RealTable};

use std::fmt;

use crate::error::{Error, Result};

/// Unique identifier of a data point, stable across all pipeline stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Label(pub u64);

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl From<u64> for Label {
    fn from(v: u64) -> Self {
        Label(v)
    }
}

/// Fixed-width packed bit vector.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BitCode {
    words: Box<[u64]>,
}

impl BitCode {
    pub fn zeros(d_bits: usize) -> Result<Self> {
        check_width(d_bits)?;
        Ok(BitCode {
            words: vec![0u64; d_bits / 64].into_boxed_slice(),
        })
    }

    pub fn ones(d_bits: usize) -> Result<Self> {
        check_width(d_bits)?;
        Ok(BitCode {
            words: vec![u64::MAX; d_bits / 64].into_boxed_slice(),
        })
    }

    pub fn from_words(words: Vec<u64>) -> Result<Self> {
        if words.is_empty() {
            return Err(Error::usage("bit code must have at least one word"));
        }
        Ok(BitCode {
            words: words.into_boxed_slice(),
        })
    }

    /// Builds a code from individual bits; `bits.len()` must be a multiple of 64.
    pub fn from_bits(bits: &[bool]) -> Result<Self> {
        let mut code = Self::zeros(bits.len())?;
        for (i, &b) in bits.iter().enumerate() {
            code.set(i, b);
        }
        Ok(code)
    }

    pub fn d_bits(&self) -> usize {
        self.words.len() * 64
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn get(&self, i: usize) -> bool {
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    pub fn set(&mut self, i: usize, value: bool) {
        let mask = 1u64 << (i % 64);
        if value {
            self.words[i / 64] |= mask;
        } else {
            self.words[i / 64] &= !mask;
        }
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }
}

pub(crate) fn check_width(d_bits: usize) -> Result<()> {
    if d_bits == 0 || d_bits % 64 != 0 {
        return Err(Error::usage(format!(
            "d_bits must be a positive multiple of 64, got {d_bits}"
        )));
    }
    Ok(())
}

/// Hamming distance between two equal-width codes.
pub fn hamming(a: &BitCode, b: &BitCode) -> Result<u32> {
    if a.words.len() != b.words.len() {
        return Err(Error::usage(format!(
            "code width mismatch: {} vs {} bits",
            a.d_bits(),
            b.d_bits()
        )));
    }
    Ok(hamming_words(&a.words, &b.words))
}

/// Unchecked kernel over raw word slices. Callers guarantee equal lengths.
#[inline]
pub fn hamming_words(a: &[u64], b: &[u64]) -> u32 {
    debug_assert_eq!(a.len(), b.len());
    match a.len() {
        1 => (a[0] ^ b[0]).count_ones(),
        2 => (a[0] ^ b[0]).count_ones() + (a[1] ^ b[1]).count_ones(),
        _ => a
            .iter()
            .zip(b)
            .map(|(x, y)| (x ^ y).count_ones())
            .sum(),
    }
}

/// Squared Euclidean distance, accumulated in `f64`.
pub fn l2_squared(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::usage(format!(
            "vector dimension mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(l2_squared_unchecked(a, b))
}

#[inline]
pub(crate) fn l2_squared_unchecked(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn per_bit(a: &BitCode, b: &BitCode) -> u32 {
        (0..a.d_bits()).filter(|&i| a.get(i) != b.get(i)).count() as u32
    }

    fn random_code(rng: &mut impl Rng, d_bits: usize) -> BitCode {
        BitCode::from_words((0..d_bits / 64).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn identity_and_complement() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_code(&mut rng, 128);
        assert_eq!(hamming(&x, &x).unwrap(), 0);
        let zeros = BitCode::zeros(64).unwrap();
        let ones = BitCode::ones(64).unwrap();
        assert_eq!(hamming(&zeros, &ones).unwrap(), 64);
    }

    #[test]
    fn matches_per_bit_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let a = random_code(&mut rng, 128);
            let b = random_code(&mut rng, 128);
            assert_eq!(hamming(&a, &b).unwrap(), per_bit(&a, &b));
        }
    }

    #[test]
    fn width_mismatch_is_usage_error() {
        let a = BitCode::zeros(64).unwrap();
        let b = BitCode::zeros(128).unwrap();
        assert!(matches!(hamming(&a, &b), Err(Error::Usage(_))));
        assert!(BitCode::zeros(100).is_err());
    }

    #[test]
    fn l2_cases() {
        let v = [1.5f32, -2.0, 3.25];
        assert_eq!(l2_squared(&v, &v).unwrap(), 0.0);
        assert_eq!(l2_squared(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 25.0);
        assert!(matches!(
            l2_squared(&[0.0], &[0.0, 1.0]),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn l2_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let dim = rng.random_range(1..200);
            let a: Vec<f32> = (0..dim).map(|_| rng.random_range(-10.0..10.0)).collect();
            let b: Vec<f32> = (0..dim).map(|_| rng.random_range(-10.0..10.0)).collect();
            let mut oracle = 0.0f64;
            for i in 0..dim {
                let d = a[i] as f64 - b[i] as f64;
                oracle += d * d;
            }
            let got = l2_squared(&a, &b).unwrap();
            assert!((got - oracle).abs() <= 1e-6 * oracle.max(1e-12));
        }
    }

    fn code_strategy(words: usize) -> impl Strategy<Value = BitCode> {
        proptest::collection::vec(any::<u64>(), words)
            .prop_map(|w| BitCode::from_words(w).unwrap())
    }

    proptest! {
        #[test]
        fn hamming_is_a_metric(a in code_strategy(2), b in code_strategy(2), c in code_strategy(2)) {
            let ab = hamming(&a, &b).unwrap();
            let ba = hamming(&b, &a).unwrap();
            let bc = hamming(&b, &c).unwrap();
            let ac = hamming(&a, &c).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!(ab <= 128);
            prop_assert_eq!(ab == 0, a == b);
            prop_assert!(ac <= ab + bc);
            prop_assert_eq!(ab, per_bit(&a, &b));
        }
    }
}
