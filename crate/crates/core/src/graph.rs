//! Neighbor lists and the k-NN graph artifact.
//!
//! Graph file (`BDG\x02`, little-endian): u64 n, u32 k_max, u32 d_bits,
//! u32 entry count E, E u64 entry labels, then per node in ascending label
//! order: u64 label, u32 degree, degree x (u64 label, u32 distance).

use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bitcore::{hamming_words, Dataset, Label};
use crate::codec::{read_file, to_u32, write_file, Reader, Writer};
use crate::error::{Error, Result};

pub const GRAPH_MAGIC: &[u8; 4] = b"BDG\x02";

/// One stored edge. Field order makes the derived ordering (distance, label).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Neighbor {
    pub dist: u32,
    pub label: Label,
}

impl Neighbor {
    pub fn new(label: Label, dist: u32) -> Self {
        Neighbor { dist, label }
    }
}

/// Bounded list of neighbors, ascending by (distance, label), labels unique.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborList {
    cap: usize,
    entries: Vec<Neighbor>,
}

impl NeighborList {
    pub fn new(cap: usize) -> Self {
        NeighborList {
            cap,
            entries: Vec::with_capacity(cap.min(64)),
        }
    }

    /// Builds a list from arbitrary candidates: sorted, deduplicated, capped.
    pub fn from_candidates(cap: usize, candidates: impl IntoIterator<Item = Neighbor>) -> Self {
        let mut all: Vec<Neighbor> = candidates.into_iter().collect();
        all.sort_unstable();
        all.dedup_by_key(|n| n.label);
        let mut list = NeighborList::new(cap);
        // dedup_by_key only removes adjacent repeats; a label can only recur
        // with the same distance, so sorted repeats are adjacent.
        for n in all {
            if list.entries.len() == cap {
                break;
            }
            if !list.contains(n.label) {
                list.entries.push(n);
            }
        }
        list
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.cap
    }

    pub fn entries(&self) -> &[Neighbor] {
        &self.entries
    }

    pub fn labels(&self) -> impl Iterator<Item = Label> + '_ {
        self.entries.iter().map(|n| n.label)
    }

    pub fn contains(&self, label: Label) -> bool {
        self.entries.iter().any(|n| n.label == label)
    }

    /// Worst kept entry once the list is full; `None` while it still has room.
    pub fn threshold(&self) -> Option<Neighbor> {
        if self.is_full() {
            self.entries.last().copied()
        } else {
            None
        }
    }

    /// Inserts `n` if it improves the list. Returns whether it was kept.
    pub fn insert(&mut self, n: Neighbor) -> bool {
        if self.cap == 0 {
            return false;
        }
        if let Some(worst) = self.threshold() {
            if n >= worst {
                return false;
            }
        }
        if self.contains(n.label) {
            return false;
        }
        let pos = self.entries.partition_point(|e| *e < n);
        self.entries.insert(pos, n);
        self.entries.truncate(self.cap);
        true
    }

    /// Top-`cap` of the union of both lists.
    pub fn merge(&mut self, other: &[Neighbor]) {
        for &n in other {
            self.insert(n);
        }
    }

    pub fn truncate(&mut self, len: usize) {
        self.entries.truncate(len);
    }

    pub(crate) fn with_entries(cap: usize, entries: Vec<Neighbor>) -> Self {
        NeighborList { cap, entries }
    }

    /// u32 count followed by (u64 label, u32 distance) pairs.
    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for n in &self.entries {
            out.extend_from_slice(&n.label.0.to_le_bytes());
            out.extend_from_slice(&n.dist.to_le_bytes());
        }
    }

    pub fn decode(cap: usize, bytes: &[u8]) -> Result<(Self, usize)> {
        let entries = decode_neighbors(bytes)?;
        let used = 4 + entries.len() * 12;
        Ok((NeighborList::with_entries(cap, entries), used))
    }
}

pub(crate) fn decode_neighbors(bytes: &[u8]) -> Result<Vec<Neighbor>> {
    if bytes.len() < 4 {
        return Err(Error::pipeline("neighbor payload too short"));
    }
    let count = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    let body = bytes
        .get(4..4 + count * 12)
        .ok_or_else(|| Error::pipeline("neighbor payload truncated"))?;
    Ok(body
        .chunks_exact(12)
        .map(|c| Neighbor {
            label: Label(u64::from_le_bytes(c[..8].try_into().unwrap())),
            dist: u32::from_le_bytes(c[8..].try_into().unwrap()),
        })
        .collect())
}

/// Label-indexed neighbor lists plus the entry sample used at query time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnnGraph {
    k_max: usize,
    d_bits: usize,
    entries: Vec<Label>,
    nodes: Vec<(Label, NeighborList)>,
}

impl KnnGraph {
    /// `nodes` may come in any order; they are stored by ascending label.
    pub fn new(
        k_max: usize,
        d_bits: usize,
        entries: Vec<Label>,
        mut nodes: Vec<(Label, NeighborList)>,
    ) -> Result<Self> {
        nodes.sort_unstable_by_key(|(l, _)| *l);
        if nodes.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::usage("graph has duplicate node labels"));
        }
        Ok(KnnGraph {
            k_max,
            d_bits,
            entries,
            nodes,
        })
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    pub fn d_bits(&self) -> usize {
        self.d_bits
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn entry_points(&self) -> &[Label] {
        &self.entries
    }

    pub fn set_entry_points(&mut self, entries: Vec<Label>) {
        self.entries = entries;
    }

    pub fn nodes(&self) -> &[(Label, NeighborList)] {
        &self.nodes
    }

    pub fn neighbors(&self, label: Label) -> Option<&NeighborList> {
        self.nodes
            .binary_search_by_key(&label, |(l, _)| *l)
            .ok()
            .map(|i| &self.nodes[i].1)
    }

    pub fn max_degree(&self) -> usize {
        self.nodes.iter().map(|(_, l)| l.len()).max().unwrap_or(0)
    }

    pub fn edge_count(&self) -> usize {
        self.nodes.iter().map(|(_, l)| l.len()).sum()
    }

    /// Checks self-exclusion, ordering, uniqueness and exact distances.
    pub fn validate(&self, data: &Dataset) -> Result<()> {
        for (owner, list) in &self.nodes {
            let oc = data
                .code_of(*owner)
                .ok_or_else(|| Error::index(format!("graph node {owner} not in dataset")))?;
            for w in list.entries().windows(2) {
                if w[0] >= w[1] {
                    return Err(Error::index(format!("list of {owner} not strictly sorted")));
                }
            }
            for n in list.entries() {
                if n.label == *owner {
                    return Err(Error::index(format!("node {owner} lists itself")));
                }
                let nc = data.code_of(n.label).ok_or_else(|| {
                    Error::index(format!("edge {owner} -> {} leaves the dataset", n.label))
                })?;
                if hamming_words(oc, nc) != n.dist {
                    return Err(Error::index(format!(
                        "edge {owner} -> {} stores distance {}, actual {}",
                        n.label,
                        n.dist,
                        hamming_words(oc, nc)
                    )));
                }
            }
            let mut labels: Vec<Label> = list.labels().collect();
            labels.sort_unstable();
            if labels.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::index(format!("list of {owner} repeats a label")));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.bytes(GRAPH_MAGIC)
            .u64(self.nodes.len() as u64)
            .u32(to_u32(self.k_max, "k_max")?)
            .u32(to_u32(self.d_bits, "d_bits")?)
            .u32(to_u32(self.entries.len(), "entry count")?);
        for e in &self.entries {
            w.u64(e.0);
        }
        for (label, list) in &self.nodes {
            w.u64(label.0).u32(list.len() as u32);
            for n in list.entries() {
                w.u64(n.label.0).u32(n.dist);
            }
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "graph file");
        r.expect_magic(GRAPH_MAGIC)?;
        let n = r.u64()?;
        let k_max = r.u32()? as usize;
        let d_bits = r.u32()? as usize;
        let e = r.u32()?;
        let e = r.count(e as u64, 8)?;
        let entries = (0..e).map(|_| r.u64().map(Label)).collect::<Result<Vec<_>>>()?;
        let n = r.count(n, 12)?;
        let mut nodes = Vec::with_capacity(n);
        let mut prev: Option<Label> = None;
        for _ in 0..n {
            let label = Label(r.u64()?);
            if prev.is_some_and(|p| p >= label) {
                return Err(Error::format("graph file: node labels not ascending"));
            }
            prev = Some(label);
            let degree = r.u32()? as usize;
            let degree = r.count(degree as u64, 12)?;
            let mut list = Vec::with_capacity(degree);
            for _ in 0..degree {
                let l = Label(r.u64()?);
                let d = r.u32()?;
                list.push(Neighbor::new(l, d));
            }
            nodes.push((label, NeighborList::with_entries(k_max.max(degree), list)));
        }
        r.finish()?;
        Ok(KnnGraph {
            k_max,
            d_bits,
            entries,
            nodes,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

/// Uniform sample of `count` labels (all labels if fewer), ascending.
pub fn sample_entry_points(labels: &[Label], count: usize, seed: u64) -> Vec<Label> {
    let count = count.min(labels.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Label> = index::sample(&mut rng, labels.len(), count)
        .iter()
        .map(|i| labels[i])
        .collect();
    out.sort_unstable();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn nb(l: u64, d: u32) -> Neighbor {
        Neighbor::new(Label(l), d)
    }

    #[test]
    fn insert_keeps_sorted_unique_capped() {
        let mut l = NeighborList::new(3);
        assert!(l.insert(nb(5, 4)));
        assert!(l.insert(nb(2, 4)));
        assert!(l.insert(nb(9, 1)));
        assert!(!l.insert(nb(9, 1)));
        assert!(!l.insert(nb(7, 4)));
        assert!(l.insert(nb(1, 4)));
        assert_eq!(l.entries(), &[nb(9, 1), nb(1, 4), nb(2, 4)]);
        assert_eq!(l.threshold(), Some(nb(2, 4)));
    }

    #[test]
    fn graph_file_round_trip_and_errors() {
        let mut a = NeighborList::new(2);
        a.insert(nb(1, 3));
        let g = KnnGraph::new(
            2,
            64,
            vec![Label(0)],
            vec![(Label(1), NeighborList::new(2)), (Label(0), a)],
        )
        .unwrap();
        let bytes = g.to_bytes().unwrap();
        assert_eq!(KnnGraph::from_bytes(&bytes).unwrap(), g);
        assert!(matches!(
            KnnGraph::from_bytes(&bytes[..bytes.len() - 2]),
            Err(Error::Format(_))
        ));
    }

    proptest! {
        #[test]
        fn merge_equals_top_k_of_union(
            a in proptest::collection::vec((0u64..40, 0u32..20), 0..30),
            b in proptest::collection::vec((0u64..40, 0u32..20), 0..30),
            cap in 1usize..12,
        ) {
            // distances must be a function of the label, as in a real graph
            let fix = |v: Vec<(u64, u32)>| -> Vec<Neighbor> {
                v.into_iter().map(|(l, _)| nb(l, (l * 7 % 13) as u32)).collect()
            };
            let (a, b) = (fix(a), fix(b));
            let mut list = NeighborList::from_candidates(cap, a.clone());
            list.merge(&b);
            let mut all: Vec<Neighbor> = a.into_iter().chain(b).collect();
            all.sort();
            all.dedup();
            all.truncate(cap);
            prop_assert_eq!(list.entries(), &all[..]);
        }
    }
}
