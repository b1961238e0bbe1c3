//! Breadth-first neighborhood propagation over the pipeline engine.
//!
//! One round compares every node `r` with the neighbors of each of its
//! neighbors `l`. The map sends `r`'s code and current threshold to every `l`
//! in `B(r)` (so key `l` sees its reverse neighbors `R(l)` next to `B(l)`);
//! Reduce1 scores each `r` against all of `B(l)` and routes the candidates
//! back to `r`; Reduce2 merges them into `r`'s list.
//!
//! With the filter on, Reduce1 drops a candidate `(d, z)` for `r` unless it
//! orders strictly before the worst entry of `r`'s full list under the
//! (distance, label) order, which is exactly the set of candidates that can
//! change `r`'s list. Output graphs are the same with or without it.
//!
//! Payloads (first byte is a tag, so a node's own list sorts first):
//! - map/identity, key `l`: `0`, u32 count, count x (u64 label, u32 dist, code)
//! - map/reverse, key `l`:  `1`, u64 BE label r, u32 BE tau dist,
//!   u64 BE tau label, code of r
//! - reduce1/identity, key `l`: `0`, encoded neighbor list
//! - reduce1/candidate, key `r`: `1`, u64 BE label z, u32 BE dist

use tracing::debug;

use crate::bitcore::{hamming_words, Dataset, Label};
use crate::error::{Error, Result};
use crate::graph::{decode_neighbors, KnnGraph, Neighbor, NeighborList};
use crate::graph_build::{decode_lists, words_from_le};
use crate::pipeline::{Emitter, Engine, Records, StageCounters};

pub const DEFAULT_ROUNDS: usize = 2;

const TAG_LIST: u8 = 0;
const TAG_OTHER: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PropagationParams {
    pub rounds: usize,
    pub filter_enabled: bool,
}

impl Default for PropagationParams {
    fn default() -> Self {
        PropagationParams {
            rounds: DEFAULT_ROUNDS,
            filter_enabled: true,
        }
    }
}

/// Counters for one round.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RoundStats {
    /// Map + Reduce1 stage (shuffle 1).
    pub expand: StageCounters,
    /// Reduce2 stage (shuffle 2); `expand.output == merge.shuffled`.
    pub merge: StageCounters,
    /// Second-floor candidates sent through shuffle 2.
    pub candidates: u64,
    /// Nodes whose list changed.
    pub improved_nodes: u64,
}

#[derive(Debug, Clone)]
pub struct Propagation {
    pub graph: KnnGraph,
    pub rounds: Vec<RoundStats>,
}

pub fn propagate(
    engine: &Engine,
    graph: &KnnGraph,
    data: &Dataset,
    params: &PropagationParams,
) -> Result<Propagation> {
    if params.rounds == 0 {
        return Err(Error::usage("propagation rounds must be at least 1"));
    }
    let mut current = graph.clone();
    let mut rounds = Vec::with_capacity(params.rounds);
    for round in 0..params.rounds {
        let (next, stats) = propagate_round(engine, &current, data, params.filter_enabled)?;
        debug!(
            round,
            candidates = stats.candidates,
            improved = stats.improved_nodes,
            "propagation round"
        );
        rounds.push(stats);
        current = next;
    }
    Ok(Propagation {
        graph: current,
        rounds,
    })
}

pub fn propagate_round(
    engine: &Engine,
    graph: &KnnGraph,
    data: &Dataset,
    filter: bool,
) -> Result<(KnnGraph, RoundStats)> {
    let k = graph.k_max();
    let wpc = data.words_per_code();
    let code_of = |label: Label| -> Result<&[u64]> {
        data.code_of(label)
            .ok_or_else(|| Error::pipeline(format!("node {label} has no code")))
    };

    let mut input = Records::new();
    let mut buf = Vec::new();
    for (label, list) in graph.nodes() {
        buf.clear();
        list.encode_into(&mut buf);
        input.push(label.0, &buf);
    }
    let in_graph = |key: u64| graph.neighbors(Label(key)).is_some();

    let mapper = |key: u64, value: &[u8], out: &mut Emitter| -> Result<()> {
        let owner = Label(key);
        let own_code = code_of(owner)?;
        let list = decode_neighbors(value)?;
        let mut ident = Vec::with_capacity(5 + list.len() * (12 + wpc * 8));
        ident.push(TAG_LIST);
        ident.extend_from_slice(&(list.len() as u32).to_le_bytes());
        for n in &list {
            ident.extend_from_slice(&n.label.0.to_le_bytes());
            ident.extend_from_slice(&n.dist.to_le_bytes());
            for w in code_of(n.label)? {
                ident.extend_from_slice(&w.to_le_bytes());
            }
        }
        out.emit(key, &ident);

        let tau = if list.len() >= k {
            list[list.len() - 1]
        } else {
            Neighbor::new(Label(u64::MAX), u32::MAX)
        };
        let mut rev = Vec::with_capacity(21 + wpc * 8);
        rev.push(TAG_OTHER);
        rev.extend_from_slice(&key.to_be_bytes());
        rev.extend_from_slice(&tau.dist.to_be_bytes());
        rev.extend_from_slice(&tau.label.0.to_be_bytes());
        for w in own_code {
            rev.extend_from_slice(&w.to_le_bytes());
        }
        for n in &list {
            out.emit(n.label.0, &rev);
        }
        Ok(())
    };

    let expand = |key: u64, values: &[&[u8]], out: &mut Emitter| -> Result<()> {
        let ident = values
            .first()
            .filter(|v| v[0] == TAG_LIST)
            .ok_or_else(|| Error::pipeline(format!("node {key} reached Reduce1 without its list")))?;
        let count = u32::from_le_bytes(ident[1..5].try_into().unwrap()) as usize;
        let stride = 12 + wpc * 8;
        let body = ident
            .get(5..5 + count * stride)
            .ok_or_else(|| Error::pipeline("truncated identity payload"))?;
        let mut labels = Vec::with_capacity(count);
        let mut dists = Vec::with_capacity(count);
        let mut codes = Vec::with_capacity(count * wpc);
        for chunk in body.chunks_exact(stride) {
            labels.push(Label(u64::from_le_bytes(chunk[..8].try_into().unwrap())));
            dists.push(u32::from_le_bytes(chunk[8..12].try_into().unwrap()));
            codes.extend(words_from_le(&chunk[12..]));
        }
        let mut buf = Vec::with_capacity(5 + count * 12);
        buf.push(TAG_LIST);
        NeighborList::with_entries(
            k,
            labels
                .iter()
                .zip(&dists)
                .map(|(&l, &d)| Neighbor::new(l, d))
                .collect(),
        )
        .encode_into(&mut buf);
        out.emit(key, &buf);

        let mut cand = [0u8; 13];
        cand[0] = TAG_OTHER;
        for v in &values[1..] {
            if v[0] != TAG_OTHER {
                return Err(Error::pipeline(format!("node {key} has two identity records")));
            }
            let r = Label(u64::from_be_bytes(v[1..9].try_into().unwrap()));
            let tau = Neighbor::new(
                Label(u64::from_be_bytes(v[13..21].try_into().unwrap())),
                u32::from_be_bytes(v[9..13].try_into().unwrap()),
            );
            let r_code = words_from_le(&v[21..]);
            for (i, z_code) in codes.chunks_exact(wpc).enumerate() {
                let z = labels[i];
                if z == r {
                    continue;
                }
                let d = hamming_words(&r_code, z_code);
                if filter && Neighbor::new(z, d) >= tau {
                    continue;
                }
                cand[1..9].copy_from_slice(&z.0.to_be_bytes());
                cand[9..13].copy_from_slice(&d.to_be_bytes());
                out.emit(r.0, &cand);
            }
        }
        Ok(())
    };

    let merge = |key: u64, values: &[&[u8]], out: &mut Emitter| -> Result<()> {
        let ident = values
            .first()
            .filter(|v| v[0] == TAG_LIST)
            .ok_or_else(|| Error::pipeline(format!("node {key} reached Reduce2 without its list")))?;
        let mut list = NeighborList::with_entries(k, decode_neighbors(&ident[1..])?);
        for v in &values[1..] {
            let z = Label(u64::from_be_bytes(v[1..9].try_into().unwrap()));
            let d = u32::from_be_bytes(v[9..13].try_into().unwrap());
            list.insert(Neighbor::new(z, d));
        }
        let mut buf = Vec::new();
        list.encode_into(&mut buf);
        out.emit(key, &buf);
        Ok(())
    };

    let stage1 = engine.run_stage("propagate-expand", &input, mapper, expand, Some(&in_graph))?;
    let stage2 = engine.run_reduce("propagate-merge", &stage1.records, merge, Some(&in_graph))?;
    let nodes = decode_lists(&stage2.records, k)?;
    let improved = nodes
        .iter()
        .zip(graph.nodes())
        .filter(|((_, new), (_, old))| new.entries() != old.entries())
        .count() as u64;
    let out = KnnGraph::new(k, graph.d_bits(), graph.entry_points().to_vec(), nodes)?;
    let stats = RoundStats {
        candidates: stage2.plan.counters.shuffled - graph.len() as u64,
        expand: stage1.plan.counters,
        merge: stage2.plan.counters,
        improved_nodes: improved,
    };
    Ok((out, stats))
}
