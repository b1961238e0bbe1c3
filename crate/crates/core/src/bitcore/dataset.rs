use std::collections::HashMap;

use super::{check_width, BitCode, Label};
use crate::error::{Error, Result};

/// Real-valued vectors keyed by label, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RealTable {
    dim: usize,
    labels: Vec<Label>,
    values: Vec<f32>,
}

impl RealTable {
    pub fn new(dim: usize, labels: Vec<Label>, values: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::usage("real vector dimension must be positive"));
        }
        if values.len() != labels.len() * dim {
            return Err(Error::usage(format!(
                "expected {} values for {} rows of dimension {dim}, got {}",
                labels.len() * dim,
                labels.len(),
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::usage(format!(
                "non-finite value in row {}",
                pos / dim
            )));
        }
        Ok(RealTable {
            dim,
            labels,
            values,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.values.chunks_exact(self.dim)
    }

    /// Rows for the given positions, in that order.
    pub fn select(&self, positions: &[usize]) -> RealTable {
        let mut values = Vec::with_capacity(positions.len() * self.dim);
        for &p in positions {
            values.extend_from_slice(self.row(p));
        }
        RealTable {
            dim: self.dim,
            labels: positions.iter().map(|&p| self.labels[p]).collect(),
            values,
        }
    }
}

/// Binary codes keyed by unique labels, optionally paired with real vectors.
///
/// Codes are stored flat; row `i` occupies words `i * w .. (i + 1) * w`
/// where `w = d_bits / 64`. When real vectors are attached they are
/// reordered so that row `i` of both tables belongs to the same label.
#[derive(Debug, Clone)]
pub struct Dataset {
    d_bits: usize,
    labels: Vec<Label>,
    words: Vec<u64>,
    positions: HashMap<Label, usize>,
    reals: Option<RealTable>,
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.d_bits == other.d_bits
            && self.labels == other.labels
            && self.words == other.words
            && self.reals == other.reals
    }
}

impl Dataset {
    pub fn new(d_bits: usize, labels: Vec<Label>, words: Vec<u64>) -> Result<Self> {
        check_width(d_bits)?;
        let w = d_bits / 64;
        if words.len() != labels.len() * w {
            return Err(Error::usage(format!(
                "expected {} code words for {} records, got {}",
                labels.len() * w,
                labels.len(),
                words.len()
            )));
        }
        let mut positions = HashMap::with_capacity(labels.len());
        for (i, &l) in labels.iter().enumerate() {
            if positions.insert(l, i).is_some() {
                return Err(Error::usage(format!("duplicate label {l}")));
            }
        }
        Ok(Dataset {
            d_bits,
            labels,
            words,
            positions,
            reals: None,
        })
    }

    pub fn from_codes(d_bits: usize, records: Vec<(Label, BitCode)>) -> Result<Self> {
        check_width(d_bits)?;
        let mut labels = Vec::with_capacity(records.len());
        let mut words = Vec::with_capacity(records.len() * d_bits / 64);
        for (l, c) in records {
            if c.d_bits() != d_bits {
                return Err(Error::usage(format!(
                    "code for label {l} has {} bits, expected {d_bits}",
                    c.d_bits()
                )));
            }
            labels.push(l);
            words.extend_from_slice(c.words());
        }
        Self::new(d_bits, labels, words)
    }

    /// Attaches real vectors; their label set must equal the code label set.
    pub fn with_reals(mut self, reals: RealTable) -> Result<Self> {
        if reals.len() != self.len() {
            return Err(Error::usage(format!(
                "real table has {} rows but dataset has {} codes",
                reals.len(),
                self.len()
            )));
        }
        let mut order = Vec::with_capacity(reals.len());
        let mut seen = vec![false; self.len()];
        let real_pos: HashMap<Label, usize> = reals
            .labels()
            .iter()
            .enumerate()
            .map(|(i, &l)| (l, i))
            .collect();
        for &l in &self.labels {
            let p = *real_pos
                .get(&l)
                .ok_or_else(|| Error::usage(format!("no real vector for label {l}")))?;
            if std::mem::replace(&mut seen[p], true) {
                return Err(Error::usage(format!("duplicate real vector label {l}")));
            }
            order.push(p);
        }
        self.reals = Some(reals.select(&order));
        Ok(self)
    }

    pub fn d_bits(&self) -> usize {
        self.d_bits
    }

    pub fn words_per_code(&self) -> usize {
        self.d_bits / 64
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> Label {
        self.labels[i]
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn code(&self, i: usize) -> &[u64] {
        let w = self.words_per_code();
        &self.words[i * w..(i + 1) * w]
    }

    pub fn bitcode(&self, i: usize) -> BitCode {
        BitCode::from_words(self.code(i).to_vec()).expect("non-empty code")
    }

    pub fn position(&self, label: Label) -> Option<usize> {
        self.positions.get(&label).copied()
    }

    pub fn code_of(&self, label: Label) -> Option<&[u64]> {
        self.position(label).map(|p| self.code(p))
    }

    pub fn reals(&self) -> Option<&RealTable> {
        self.reals.as_ref()
    }

    pub fn real_of(&self, label: Label) -> Option<&[f32]> {
        let r = self.reals.as_ref()?;
        self.position(label).map(|p| r.row(p))
    }

    /// Sub-dataset made of the given row positions, in order.
    pub fn select(&self, positions: &[usize]) -> Dataset {
        let w = self.words_per_code();
        let mut words = Vec::with_capacity(positions.len() * w);
        for &p in positions {
            words.extend_from_slice(self.code(p));
        }
        let labels = positions.iter().map(|&p| self.labels[p]).collect();
        let mut out = Dataset::new(self.d_bits, labels, words).expect("subset of valid dataset");
        out.reals = self.reals.as_ref().map(|r| r.select(positions));
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = (Label, &[u64])> {
        self.labels
            .iter()
            .copied()
            .zip(self.words.chunks_exact(self.words_per_code()))
    }
}
