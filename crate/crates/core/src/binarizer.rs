//! Real-vector to binary-code mapping.
//!
//! [`HyperplaneCoder`] takes the sign of projections onto random unit
//! directions after subtracting the sample mean. Anything implementing
//! [`BinaryCoder`] can replace it; the rest of the pipeline only sees codes.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::bitcore::{check_width, BitCode, Dataset, RealTable};
use crate::codec::{read_file, to_u32, write_file, Reader, Writer};
use crate::error::{Error, Result};

pub const CODER_MAGIC: &[u8; 4] = b"BDC\x01";

pub trait BinaryCoder {
    fn dim(&self) -> usize;
    fn d_bits(&self) -> usize;
    fn encode(&self, v: &[f32]) -> Result<BitCode>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperplaneCoder {
    seed: u64,
    dim: usize,
    d_bits: usize,
    mean: Vec<f32>,
    /// `d_bits` rows of `dim` values, each of unit norm.
    planes: Vec<f32>,
}

impl HyperplaneCoder {
    pub fn fit<'a, I>(sample: I, d_bits: usize, seed: u64) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f32]>,
    {
        check_width(d_bits)?;
        let mut iter = sample.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| Error::usage("cannot fit a coder on an empty sample"))?;
        let dim = first.len();
        if dim == 0 {
            return Err(Error::usage("sample vectors must have positive dimension"));
        }
        let mut sum = vec![0f64; dim];
        let mut count = 0usize;
        for v in std::iter::once(first).chain(iter) {
            if v.len() != dim {
                return Err(Error::usage(format!(
                    "sample dimension mismatch: {} vs {dim}",
                    v.len()
                )));
            }
            for (s, &x) in sum.iter_mut().zip(v) {
                *s += x as f64;
            }
            count += 1;
        }
        let mean = sum.iter().map(|s| (s / count as f64) as f32).collect();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut planes = Vec::with_capacity(d_bits * dim);
        for _ in 0..d_bits {
            let row: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            planes.extend(row.iter().map(|x| (x / norm) as f32));
        }
        Ok(HyperplaneCoder {
            seed,
            dim,
            d_bits,
            mean,
            planes,
        })
    }

    pub fn fit_table(sample: &RealTable, d_bits: usize, seed: u64) -> Result<Self> {
        Self::fit(sample.rows(), d_bits, seed)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn mean(&self) -> &[f32] {
        &self.mean
    }

    pub fn plane(&self, i: usize) -> &[f32] {
        &self.planes[i * self.dim..(i + 1) * self.dim]
    }

    /// Encodes every row of `table`, keeping its labels and attaching the
    /// vectors themselves to the returned dataset.
    pub fn encode_table(&self, table: &RealTable) -> Result<Dataset> {
        if table.dim() != self.dim {
            return Err(Error::usage(format!(
                "table dimension {} does not match coder dimension {}",
                table.dim(),
                self.dim
            )));
        }
        let wpc = self.d_bits / 64;
        let words: Vec<u64> = table
            .values()
            .par_chunks_exact(self.dim)
            .flat_map_iter(|row| self.encode_words(row))
            .collect();
        debug_assert_eq!(words.len(), table.len() * wpc);
        Dataset::new(self.d_bits, table.labels().to_vec(), words)?.with_reals(table.clone())
    }

    fn encode_words(&self, v: &[f32]) -> Vec<u64> {
        let centered: Vec<f64> = v
            .iter()
            .zip(&self.mean)
            .map(|(&x, &m)| x as f64 - m as f64)
            .collect();
        let mut words = vec![0u64; self.d_bits / 64];
        for (i, plane) in self.planes.chunks_exact(self.dim).enumerate() {
            let dot: f64 = plane
                .iter()
                .zip(&centered)
                .map(|(&p, &c)| p as f64 * c)
                .sum();
            if dot >= 0.0 {
                words[i / 64] |= 1 << (i % 64);
            }
        }
        words
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.bytes(CODER_MAGIC)
            .u64(self.seed)
            .u32(to_u32(self.dim, "dimension")?)
            .u32(to_u32(self.d_bits, "d_bits")?)
            .f32s(&self.mean)
            .f32s(&self.planes);
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "coder file");
        r.expect_magic(CODER_MAGIC)?;
        let seed = r.u64()?;
        let dim = r.u32()? as usize;
        let d_bits = r.u32()? as usize;
        if dim == 0 || d_bits == 0 || d_bits % 64 != 0 {
            return Err(Error::format(format!(
                "coder file: invalid shape D={dim}, d_bits={d_bits}"
            )));
        }
        r.count((d_bits as u64 + 1) * dim as u64, 4)?;
        let mut mean = Vec::with_capacity(dim);
        r.f32s(dim, &mut mean)?;
        let mut planes = Vec::with_capacity(d_bits * dim);
        r.f32s(d_bits * dim, &mut planes)?;
        r.finish()?;
        Ok(HyperplaneCoder {
            seed,
            dim,
            d_bits,
            mean,
            planes,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

impl BinaryCoder for HyperplaneCoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn d_bits(&self) -> usize {
        self.d_bits
    }

    fn encode(&self, v: &[f32]) -> Result<BitCode> {
        if v.len() != self.dim {
            return Err(Error::usage(format!(
                "vector dimension {} does not match coder dimension {}",
                v.len(),
                self.dim
            )));
        }
        BitCode::from_words(self.encode_words(v))
    }
}
