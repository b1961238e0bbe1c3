//! Occlusion pruning of finished neighbor lists.
//!
//! Scanning a list in ascending order, an edge `a -> c` is dropped when some
//! already kept neighbor `b` is strictly closer to `c` than `a` is.

use crate::bitcore::{hamming_words, Dataset, Label};
use crate::error::{Error, Result};
use crate::graph::{decode_neighbors, KnnGraph, Neighbor, NeighborList};
use crate::graph_build::decode_lists;
use crate::pipeline::{Emitter, Engine, Records, StageCounters};

pub const DEFAULT_MAX_DEGREE: usize = 50;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneParams {
    pub max_degree: usize,
    /// When off, lists are only truncated to `max_degree`.
    pub occlusion: bool,
}

impl Default for PruneParams {
    fn default() -> Self {
        PruneParams {
            max_degree: DEFAULT_MAX_DEGREE,
            occlusion: true,
        }
    }
}

impl PruneParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_degree == 0 {
            return Err(Error::usage("max degree must be at least 1"));
        }
        Ok(())
    }
}

/// `list` distances are taken as the owner-to-neighbor distances.
pub fn prune_node(list: &[Neighbor], data: &Dataset, params: &PruneParams) -> Result<Vec<Neighbor>> {
    if !params.occlusion {
        return Ok(list.iter().take(params.max_degree).copied().collect());
    }
    let code = |l: Label| {
        data.code_of(l)
            .ok_or_else(|| Error::pipeline(format!("neighbor {l} has no code")))
    };
    let mut kept: Vec<Neighbor> = Vec::with_capacity(params.max_degree.min(list.len()));
    let mut kept_codes: Vec<&[u64]> = Vec::with_capacity(kept.capacity());
    for &c in list {
        if kept.len() == params.max_degree {
            break;
        }
        let cc = code(c.label)?;
        if kept_codes.iter().all(|b| hamming_words(b, cc) >= c.dist) {
            kept.push(c);
            kept_codes.push(cc);
        }
    }
    Ok(kept)
}

pub fn prune_graph(
    engine: &Engine,
    graph: &KnnGraph,
    data: &Dataset,
    params: &PruneParams,
) -> Result<(KnnGraph, StageCounters)> {
    params.validate()?;
    let mut input = Records::new();
    let mut buf = Vec::new();
    for (label, list) in graph.nodes() {
        buf.clear();
        list.encode_into(&mut buf);
        input.push(label.0, &buf);
    }
    let cap = graph.k_max();
    let mapper = |key: u64, value: &[u8], out: &mut Emitter| -> Result<()> {
        let kept = prune_node(&decode_neighbors(value)?, data, params)?;
        let mut buf = Vec::with_capacity(4 + kept.len() * 12);
        NeighborList::with_entries(cap, kept).encode_into(&mut buf);
        out.emit(key, &buf);
        Ok(())
    };
    let stage = engine.run_map("prune", &input, mapper)?;
    let nodes = decode_lists(&stage.records, cap)?;
    let out = KnnGraph::new(cap, graph.d_bits(), graph.entry_points().to_vec(), nodes)?;
    Ok((out, stage.plan.counters))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitcore::BitCode;
    use proptest::prelude::*;

    fn byte_code(b: u8) -> BitCode {
        BitCode::from_words(vec![b as u64]).unwrap()
    }

    fn per_bit(a: u8, b: u8) -> u32 {
        (0..8).filter(|i| (a >> i) & 1 != (b >> i) & 1).count() as u32
    }

    fn dataset(codes: &[u8]) -> Dataset {
        Dataset::from_codes(
            64,
            codes
                .iter()
                .enumerate()
                .map(|(i, &c)| (Label(i as u64), byte_code(c)))
                .collect(),
        )
        .unwrap()
    }

    fn list_for(owner: usize, codes: &[u8]) -> Vec<Neighbor> {
        let mut v: Vec<Neighbor> = (0..codes.len())
            .filter(|&j| j != owner)
            .map(|j| Neighbor::new(Label(j as u64), per_bit(codes[owner], codes[j])))
            .collect();
        v.sort();
        v
    }

    #[test]
    fn occluded_edge_is_dropped() {
        // owner 0, b at 1, c at 2, b-c at 1
        let codes = [0b0000_0000, 0b0000_0001, 0b0000_0011];
        assert_eq!((per_bit(codes[0], codes[1]), per_bit(codes[0], codes[2]), per_bit(codes[1], codes[2])), (1, 2, 1));
        let data = dataset(&codes);
        let kept = prune_node(&list_for(0, &codes), &data, &PruneParams::default()).unwrap();
        assert_eq!(kept, vec![Neighbor::new(Label(1), 1)]);
    }

    #[test]
    fn spread_neighbors_survive() {
        // each pair of neighbors is 4 apart, each neighbor is 2 from the owner
        let codes = [0b0000_0000, 0b0000_0011, 0b0000_1100, 0b0011_0000, 0b1100_0000];
        let data = dataset(&codes);
        let list = list_for(0, &codes);
        assert_eq!(prune_node(&list, &data, &PruneParams::default()).unwrap(), list);
        assert!(prune_node(&[], &data, &PruneParams::default()).unwrap().is_empty());
        let capped = PruneParams { max_degree: 2, occlusion: true };
        assert_eq!(prune_node(&list, &data, &capped).unwrap(), list[..2].to_vec());
    }

    #[test]
    fn invalid_degree() {
        assert!(matches!(
            PruneParams { max_degree: 0, occlusion: true }.validate(),
            Err(Error::Usage(_))
        ));
    }

    fn random_graph(codes: &[u8], k: usize) -> KnnGraph {
        let nodes = (0..codes.len())
            .map(|i| (Label(i as u64), NeighborList::from_candidates(k, list_for(i, codes))))
            .collect();
        KnnGraph::new(k, 64, vec![Label(0)], nodes).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn pruned_graph_properties(codes in proptest::collection::hash_set(any::<u8>(), 2..40), m in 1usize..8) {
            let codes: Vec<u8> = codes.into_iter().collect();
            let data = dataset(&codes);
            let g = random_graph(&codes, 10);
            let params = PruneParams { max_degree: m, occlusion: true };
            let (a, _) = prune_graph(&Engine::with_workers(1).unwrap(), &g, &data, &params).unwrap();
            let (b, _) = prune_graph(&Engine::with_workers(3).unwrap(), &g, &data, &params).unwrap();
            prop_assert_eq!(&a, &b);
            a.validate(&data).unwrap();
            for ((_, new), (_, old)) in a.nodes().iter().zip(g.nodes()) {
                prop_assert!(new.len() <= m);
                prop_assert_eq!(new.entries().first(), old.entries().first());
                // kept edges are a subsequence of the original list
                let mut it = old.entries().iter();
                for e in new.entries() {
                    prop_assert!(it.any(|o| o == e));
                }
                // no kept edge is occluded by an earlier kept edge
                for (i, c) in new.entries().iter().enumerate() {
                    for b in &new.entries()[..i] {
                        let cb = per_bit(codes[b.label.0 as usize], codes[c.label.0 as usize]);
                        prop_assert!(cb >= c.dist);
                    }
                }
            }
        }
    }
}
