//! Single-pass divide-and-conquer construction of the base k-NN graph.
//!
//! Every point is sent to its nearest clusters until the probed clusters
//! together hold `coarse_num` points. Inside each cluster group, every record
//! is a query against the records whose cluster is their own nearest one
//! (flag 0), so each point is a candidate in exactly one group. Partial lists
//! from all groups are merged per owner in a second shuffle.
//!
//! Map record (key = center index): u8 flag, u64 big-endian label, code words.
//! Reduce1 record (key = owner label): encoded partial neighbor list.

use rayon::prelude::*;
use tracing::{info, warn};

use crate::bitcore::{hamming_words, Dataset, Label};
use crate::bkmeans::{assign_step, CenterSet};
use crate::error::{Error, Result};
use crate::graph::{decode_neighbors, sample_entry_points, KnnGraph, Neighbor, NeighborList};
use crate::pipeline::{Emitter, Engine, Records, StagePlan};

pub const DEFAULT_K: usize = 50;
pub const DEFAULT_COARSE_NUM: u64 = 100_000;
pub const DEFAULT_ENTRY_SAMPLES: usize = 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuildParams {
    pub k: usize,
    pub coarse_num: u64,
    pub entry_samples: usize,
    pub seed: u64,
    /// Warn when one group needs more comparisons than this.
    pub group_budget: u64,
}

impl Default for BuildParams {
    fn default() -> Self {
        BuildParams {
            k: DEFAULT_K,
            coarse_num: DEFAULT_COARSE_NUM,
            entry_samples: DEFAULT_ENTRY_SAMPLES,
            seed: 0,
            group_budget: 1 << 32,
        }
    }
}

impl BuildParams {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::usage("k must be at least 1"));
        }
        if self.coarse_num == 0 {
            return Err(Error::usage("coarse_num must be at least 1"));
        }
        if self.entry_samples == 0 {
            return Err(Error::usage("entry_samples must be at least 1"));
        }
        Ok(())
    }
}

/// One probe of a point: the center and whether it is the point's nearest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Probe {
    pub center: u32,
    pub flag: u8,
}

/// Nearest-center membership count per center.
pub fn cluster_sizes(data: &Dataset, centers: &CenterSet) -> Result<Vec<u64>> {
    Ok(assign_step(data, centers)?.histogram(centers.m()))
}

/// Centers in ascending distance (lower index on ties), taken while the
/// running total of their sizes stays within `coarse_num`. The nearest center
/// is always probed and is the only one with flag 0.
pub fn probe_centers(code: &[u64], centers: &CenterSet, sizes: &[u64], coarse_num: u64) -> Vec<Probe> {
    let mut order: Vec<(u32, u32)> = (0..centers.m())
        .map(|j| (hamming_words(code, centers.code(j)), j as u32))
        .collect();
    order.sort_unstable();
    let mut probes = Vec::new();
    let mut total = 0u64;
    for (i, &(_, j)) in order.iter().enumerate() {
        let size = sizes[j as usize];
        if i > 0 && total + size > coarse_num {
            break;
        }
        total += size;
        probes.push(Probe {
            center: j,
            flag: (i > 0) as u8,
        });
    }
    probes
}

#[derive(Debug, Clone)]
pub struct BaseBuild {
    pub graph: KnnGraph,
    pub sizes: Vec<u64>,
    /// Map + Reduce1.
    pub probe_stage: StagePlan,
    /// Shuffle2 + Reduce2.
    pub merge_stage: StagePlan,
    /// Hamming evaluations performed in Reduce1.
    pub comparisons: u64,
}

pub fn build_base_graph(
    engine: &Engine,
    data: &Dataset,
    centers: &CenterSet,
    params: &BuildParams,
) -> Result<BaseBuild> {
    params.validate()?;
    if centers.d_bits() != data.d_bits() {
        return Err(Error::usage(format!(
            "center width {} does not match data width {}",
            centers.d_bits(),
            data.d_bits()
        )));
    }
    let k = params.k;
    let wpc = data.words_per_code();
    let sizes = engine.install(|| cluster_sizes(data, centers))?;

    let input = code_records(data);
    let record_len = 9 + wpc * 8;
    let in_dataset = |key: u64| data.position(Label(key)).is_some();
    let comparisons = std::sync::atomic::AtomicU64::new(0);

    let mapper = |key: u64, value: &[u8], out: &mut Emitter| -> Result<()> {
        let code = words_from_le(value);
        let mut buf = Vec::with_capacity(record_len);
        for p in probe_centers(&code, centers, &sizes, params.coarse_num) {
            buf.clear();
            buf.push(p.flag);
            buf.extend_from_slice(&key.to_be_bytes());
            buf.extend_from_slice(value);
            out.emit(p.center as u64, &buf);
        }
        Ok(())
    };

    let reducer = |center: u64, values: &[&[u8]], out: &mut Emitter| -> Result<()> {
        // flag-0 records sort first
        let n_cand = values.iter().take_while(|v| v[0] == 0).count();
        if n_cand == 0 {
            return Ok(());
        }
        let work = values.len() as u64 * n_cand as u64;
        if work > params.group_budget {
            warn!(
                center,
                records = values.len(),
                candidates = n_cand,
                "cluster group exceeds the comparison budget; consider a larger m"
            );
        }
        comparisons.fetch_add(work, std::sync::atomic::Ordering::Relaxed);
        let mut cand_labels = Vec::with_capacity(n_cand);
        let mut cand_words = Vec::with_capacity(n_cand * wpc);
        for v in &values[..n_cand] {
            cand_labels.push(Label(u64::from_be_bytes(v[1..9].try_into().unwrap())));
            cand_words.extend(words_from_le(&v[9..]));
        }
        let mut scratch: Vec<Neighbor> = Vec::with_capacity(n_cand);
        let mut buf = Vec::new();
        for v in values {
            let owner = Label(u64::from_be_bytes(v[1..9].try_into().unwrap()));
            let code = words_from_le(&v[9..]);
            scratch.clear();
            for (i, c) in cand_words.chunks_exact(wpc).enumerate() {
                if cand_labels[i] != owner {
                    scratch.push(Neighbor::new(cand_labels[i], hamming_words(&code, c)));
                }
            }
            let list = top_k(&mut scratch, k);
            buf.clear();
            NeighborList::with_entries(k, list).encode_into(&mut buf);
            out.emit(owner.0, &buf);
        }
        Ok(())
    };

    let stage1 = engine.run_stage("dac-probe", &input, mapper, reducer, Some(&in_dataset))?;
    let merge = |owner: u64, values: &[&[u8]], out: &mut Emitter| -> Result<()> {
        let mut list = NeighborList::new(k);
        for v in values {
            list.merge(&decode_neighbors(v)?);
        }
        let mut buf = Vec::new();
        list.encode_into(&mut buf);
        out.emit(owner, &buf);
        Ok(())
    };
    let stage2 = engine.run_reduce("dac-merge", &stage1.records, merge, Some(&in_dataset))?;

    let nodes = decode_lists(&stage2.records, k)?;
    if nodes.len() != data.len() {
        return Err(Error::pipeline(format!(
            "base graph covers {} of {} points",
            nodes.len(),
            data.len()
        )));
    }
    let empty = nodes.iter().filter(|(_, l)| l.is_empty()).count();
    if empty > 0 && data.len() > 1 {
        info!(empty, "points with no candidates in any probed cluster");
    }
    let entries = sample_entry_points(data.labels(), params.entry_samples, params.seed);
    let graph = KnnGraph::new(k, data.d_bits(), entries, nodes)?;
    Ok(BaseBuild {
        graph,
        sizes,
        probe_stage: stage1.plan,
        merge_stage: stage2.plan,
        comparisons: comparisons.into_inner(),
    })
}

/// k smallest by (distance, label), sorted.
pub(crate) fn top_k(cands: &mut [Neighbor], k: usize) -> Vec<Neighbor> {
    if cands.len() > k {
        cands.select_nth_unstable(k);
        let top = &mut cands[..k];
        top.sort_unstable();
        top.to_vec()
    } else {
        cands.sort_unstable();
        cands.to_vec()
    }
}

/// One record per point: key = label, value = little-endian code words.
pub(crate) fn code_records(data: &Dataset) -> Records {
    let mut recs = Records::new();
    let mut buf = Vec::with_capacity(data.words_per_code() * 8);
    for (label, code) in data.iter() {
        buf.clear();
        for w in code {
            buf.extend_from_slice(&w.to_le_bytes());
        }
        recs.push(label.0, &buf);
    }
    recs
}

pub(crate) fn words_from_le(bytes: &[u8]) -> Vec<u64> {
    bytes
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

/// Graph nodes from (owner -> encoded list) records.
pub(crate) fn decode_lists(records: &Records, cap: usize) -> Result<Vec<(Label, NeighborList)>> {
    records
        .iter()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&(k, v)| Ok((Label(k), NeighborList::decode(cap, v)?.0)))
        .collect()
}
