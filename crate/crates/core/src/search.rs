//! Online search: entry selection over the stored samples, best-first graph
//! traversal, and optional rerank with real vectors.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bitcore::{hamming_words, l2_squared_unchecked, Dataset, Label};
use crate::error::{Error, Result};
use crate::graph::{KnnGraph, Neighbor};

/// Maximum pool size that may be reranked.
pub const MAX_RERANK_POOL: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    Hamming,
    L2,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Hamming => "hamming",
            Metric::L2 => "l2",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hamming" => Ok(Metric::Hamming),
            "l2" => Ok(Metric::L2),
            _ => Err(Error::usage(format!("unknown metric {s:?} (hamming|l2)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchParams {
    pub ef: usize,
    pub topn: usize,
    /// Entry candidates compared per query; `None` uses every stored sample.
    pub entry_samples: Option<usize>,
    pub rerank: bool,
    pub seed: u64,
}

impl Default for SearchParams {
    fn default() -> Self {
        SearchParams {
            ef: 512,
            topn: 60,
            entry_samples: None,
            rerank: false,
            seed: 0,
        }
    }
}

impl SearchParams {
    pub fn validate(&self) -> Result<()> {
        if self.ef == 0 || self.topn == 0 {
            return Err(Error::usage("ef and topn must be at least 1"));
        }
        if self.topn > self.ef {
            return Err(Error::usage(format!(
                "topn {} exceeds ef {}",
                self.topn, self.ef
            )));
        }
        if self.rerank && self.ef > MAX_RERANK_POOL {
            return Err(Error::usage(format!(
                "ef {} exceeds the rerank pool limit {MAX_RERANK_POOL}",
                self.ef
            )));
        }
        if self.entry_samples == Some(0) {
            return Err(Error::usage("entry_samples must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SearchStats {
    /// Hamming evaluations against entry samples.
    pub hamming_long: u64,
    /// Hamming evaluations during graph traversal.
    pub hamming_short: u64,
    pub l2: u64,
    /// Nodes expanded.
    pub hops: u64,
    /// Fewer than `topn` results were reachable.
    pub truncated: bool,
}

impl SearchStats {
    pub fn add(&mut self, other: &SearchStats) {
        self.hamming_long += other.hamming_long;
        self.hamming_short += other.hamming_short;
        self.l2 += other.l2;
        self.hops += other.hops;
        self.truncated |= other.truncated;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub label: Label,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultSet {
    pub metric: Metric,
    pub hits: Vec<Hit>,
}

impl ResultSet {
    pub fn labels(&self) -> impl Iterator<Item = Label> + '_ {
        self.hits.iter().map(|h| h.label)
    }
}

/// Immutable search structure: the graph in dense adjacency form over the
/// dataset's positions.
#[derive(Debug, Clone)]
pub struct SearchIndex {
    graph: KnnGraph,
    data: Dataset,
    offsets: Vec<usize>,
    targets: Vec<u32>,
    entries: Vec<u32>,
}

impl SearchIndex {
    pub fn new(graph: KnnGraph, data: Dataset) -> Result<Self> {
        if graph.d_bits() != data.d_bits() {
            return Err(Error::index(format!(
                "graph width {} does not match code width {}",
                graph.d_bits(),
                data.d_bits()
            )));
        }
        if u32::try_from(data.len()).is_err() {
            return Err(Error::index("index too large"));
        }
        let pos = |l: Label| {
            data.position(l)
                .map(|p| p as u32)
                .ok_or_else(|| Error::index(format!("graph label {l} has no code")))
        };
        let mut lists = vec![None; data.len()];
        for (label, list) in graph.nodes() {
            lists[pos(*label)? as usize] = Some(list);
        }
        let mut offsets = Vec::with_capacity(data.len() + 1);
        let mut targets = Vec::with_capacity(graph.edge_count());
        offsets.push(0);
        for list in &lists {
            if let Some(list) = list {
                for l in list.labels() {
                    targets.push(pos(l)?);
                }
            }
            offsets.push(targets.len());
        }
        let entries = graph
            .entry_points()
            .iter()
            .map(|&l| pos(l))
            .collect::<Result<_>>()?;
        Ok(SearchIndex {
            graph,
            data,
            offsets,
            targets,
            entries,
        })
    }

    pub fn graph(&self) -> &KnnGraph {
        &self.graph
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn neighbors(&self, pos: u32) -> &[u32] {
        let p = pos as usize;
        &self.targets[self.offsets[p]..self.offsets[p + 1]]
    }

    fn check_query(&self, query: &[u64]) -> Result<()> {
        if query.len() != self.data.words_per_code() {
            return Err(Error::usage(format!(
                "query has {} code words, index has {}",
                query.len(),
                self.data.words_per_code()
            )));
        }
        Ok(())
    }

    /// Nearest stored entry sample; `count` limits how many are compared.
    pub fn select_entry(
        &self,
        query: &[u64],
        count: Option<usize>,
        seed: u64,
        stats: &mut SearchStats,
    ) -> Result<Label> {
        self.check_query(query)?;
        let chosen: Vec<u32> = match count {
            Some(c) if c < self.entries.len() => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                index::sample(&mut rng, self.entries.len(), c)
                    .into_iter()
                    .map(|i| self.entries[i])
                    .collect()
            }
            _ => self.entries.clone(),
        };
        let labels: Vec<Label> = chosen.iter().map(|&p| self.data.label(p as usize)).collect();
        stats.hamming_long += labels.len() as u64;
        select_entry(query, &labels, &self.data)
    }

    /// Best-first traversal from `entry`; returns up to `ef` nodes ascending
    /// by (distance, label).
    pub fn beam_search(
        &self,
        query: &[u64],
        ef: usize,
        entry: Label,
        stats: &mut SearchStats,
    ) -> Result<Vec<Neighbor>> {
        self.check_query(query)?;
        if ef == 0 {
            return Err(Error::usage("ef must be at least 1"));
        }
        let start = self
            .data
            .position(entry)
            .filter(|_| self.graph.neighbors(entry).is_some())
            .ok_or_else(|| Error::index(format!("entry {entry} is not in the graph")))?
            as u32;
        let n = self.data.len();
        let mut visited = vec![0u64; n.div_ceil(64)];
        let key = |p: u32| -> (u32, Label, u32) {
            let d = hamming_words(query, self.data.code(p as usize));
            (d, self.data.label(p as usize), p)
        };
        let mut frontier = BinaryHeap::new();
        let mut pool: BinaryHeap<(u32, Label, u32)> = BinaryHeap::with_capacity(ef + 1);
        visited[start as usize / 64] |= 1 << (start % 64);
        let first = key(start);
        stats.hamming_short += 1;
        frontier.push(Reverse(first));
        pool.push(first);

        while let Some(Reverse(cur)) = frontier.pop() {
            if pool.len() >= ef && cur > *pool.peek().unwrap() {
                break;
            }
            stats.hops += 1;
            for &nb in self.neighbors(cur.2) {
                let (w, b) = (nb as usize / 64, nb % 64);
                if visited[w] >> b & 1 == 1 {
                    continue;
                }
                visited[w] |= 1 << b;
                let cand = key(nb);
                stats.hamming_short += 1;
                if pool.len() < ef || cand < *pool.peek().unwrap() {
                    frontier.push(Reverse(cand));
                    pool.push(cand);
                    if pool.len() > ef {
                        pool.pop();
                    }
                }
            }
        }
        let mut out: Vec<Neighbor> = pool
            .into_iter()
            .map(|(d, l, _)| Neighbor::new(l, d))
            .collect();
        out.sort_unstable();
        Ok(out)
    }

    pub fn search(
        &self,
        query: &[u64],
        query_real: Option<&[f32]>,
        params: &SearchParams,
    ) -> Result<(ResultSet, SearchStats)> {
        params.validate()?;
        let real = if params.rerank {
            if self.data.reals().is_none() {
                return Err(Error::usage("rerank requested but the index has no real vectors"));
            }
            let q = query_real.ok_or_else(|| Error::usage("rerank requested without a real query"))?;
            let dim = self.data.reals().unwrap().dim();
            if q.len() != dim {
                return Err(Error::usage(format!(
                    "real query has dimension {}, index has {dim}",
                    q.len()
                )));
            }
            Some(q)
        } else {
            None
        };
        let mut stats = SearchStats::default();
        let entry = self.select_entry(query, params.entry_samples, params.seed, &mut stats)?;
        let pool = self.beam_search(query, params.ef, entry, &mut stats)?;
        stats.truncated = pool.len() < params.topn;
        let result = match real {
            Some(q) => rerank(&pool, q, &self.data, params.topn, &mut stats)?,
            None => ResultSet {
                metric: Metric::Hamming,
                hits: pool
                    .iter()
                    .take(params.topn)
                    .map(|n| Hit {
                        label: n.label,
                        distance: n.dist as f64,
                    })
                    .collect(),
            },
        };
        Ok((result, stats))
    }

    /// Runs every query of `queries` in parallel; real query vectors are used
    /// when present.
    pub fn search_batch(
        &self,
        queries: &Dataset,
        params: &SearchParams,
    ) -> Result<Vec<(ResultSet, SearchStats)>> {
        (0..queries.len())
            .into_par_iter()
            .map(|i| {
                let real = queries.reals().map(|r| r.row(i));
                self.search(queries.code(i), real, params)
            })
            .collect()
    }
}

/// Anything that answers queries: a single index or a set of shards.
pub trait Searcher: Sync {
    fn search(
        &self,
        query: &[u64],
        query_real: Option<&[f32]>,
        params: &SearchParams,
    ) -> Result<(ResultSet, SearchStats)>;
}

impl Searcher for SearchIndex {
    fn search(
        &self,
        query: &[u64],
        query_real: Option<&[f32]>,
        params: &SearchParams,
    ) -> Result<(ResultSet, SearchStats)> {
        SearchIndex::search(self, query, query_real, params)
    }
}

/// Argmin Hamming among `entries`, ties to the lower label.
pub fn select_entry(query: &[u64], entries: &[Label], data: &Dataset) -> Result<Label> {
    let mut best: Option<(u32, Label)> = None;
    for &l in entries {
        let code = data
            .code_of(l)
            .ok_or_else(|| Error::index(format!("entry {l} has no code")))?;
        let cand = (hamming_words(query, code), l);
        if best.is_none_or(|b| cand < b) {
            best = Some(cand);
        }
    }
    best.map(|b| b.1)
        .ok_or_else(|| Error::index("index has no entry points"))
}

/// Sorts `pool` by squared L2 to `query` (ties to the lower label) and keeps
/// `topn`.
pub fn rerank(
    pool: &[Neighbor],
    query: &[f32],
    data: &Dataset,
    topn: usize,
    stats: &mut SearchStats,
) -> Result<ResultSet> {
    if pool.len() > MAX_RERANK_POOL {
        return Err(Error::usage(format!(
            "rerank pool of {} exceeds {MAX_RERANK_POOL}",
            pool.len()
        )));
    }
    let mut hits = pool
        .iter()
        .map(|n| {
            let v = data
                .real_of(n.label)
                .ok_or_else(|| Error::index(format!("no real vector for {}", n.label)))?;
            if v.len() != query.len() {
                return Err(Error::usage("real query dimension mismatch"));
            }
            Ok(Hit {
                label: n.label,
                distance: l2_squared_unchecked(query, v),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    stats.l2 += hits.len() as u64;
    hits.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.label.cmp(&b.label)));
    hits.truncate(topn);
    Ok(ResultSet {
        metric: Metric::L2,
        hits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitcore::{BitCode, RealTable};
    use crate::graph::NeighborList;
    use rand::{Rng, SeedableRng};

    fn per_bit(a: &[u64], b: &[u64]) -> u32 {
        let mut d = 0;
        for i in 0..a.len() * 64 {
            d += (((a[i / 64] ^ b[i / 64]) >> (i % 64)) & 1) as u32;
        }
        d
    }

    fn byte_data(codes: &[u8]) -> Dataset {
        Dataset::from_codes(
            64,
            codes
                .iter()
                .enumerate()
                .map(|(i, &c)| (Label(i as u64), BitCode::from_words(vec![c as u64]).unwrap()))
                .collect(),
        )
        .unwrap()
    }

    fn graph_from(data: &Dataset, adj: &[&[u64]], entries: Vec<Label>) -> KnnGraph {
        let nodes = adj
            .iter()
            .enumerate()
            .map(|(i, ns)| {
                let list = NeighborList::from_candidates(
                    8,
                    ns.iter().map(|&j| {
                        Neighbor::new(Label(j), per_bit(data.code(i), data.code(j as usize)))
                    }),
                );
                (Label(i as u64), list)
            })
            .collect();
        KnnGraph::new(8, 64, entries, nodes).unwrap()
    }

    #[test]
    fn hand_traced_toy_graph() {
        // path 0 - 1 - 2 - 3 - 4 with codes drifting away from 0
        let codes = [0b0000_0000u8, 0b0000_0001, 0b0000_0011, 0b0000_0111, 0b0000_1111];
        let data = byte_data(&codes);
        let adj: [&[u64]; 5] = [&[1], &[0, 2], &[1, 3], &[2, 4], &[3]];
        let idx = SearchIndex::new(graph_from(&data, &adj, vec![Label(0)]), data).unwrap();
        let q = [0b0000_0111u64];
        let mut st = SearchStats::default();
        // expansion order 0, 1, 2, 3, 4; node 4 ties the pool's worst entry
        // so it is still expanded, then the frontier is empty
        let pool = idx.beam_search(&q, 3, Label(0), &mut st).unwrap();
        assert_eq!(
            pool,
            vec![
                Neighbor::new(Label(3), 0),
                Neighbor::new(Label(2), 1),
                Neighbor::new(Label(4), 1)
            ]
        );
        assert_eq!(st.hamming_short, 5);
        assert_eq!(st.hops, 5);

        let mut st = SearchStats::default();
        let pool = idx.beam_search(&q, 1, Label(0), &mut st).unwrap();
        assert_eq!(pool, vec![Neighbor::new(Label(3), 0)]);
        // node 4 never beats (0, L3) and is not pushed
        assert_eq!(st.hops, 4);
    }

    #[test]
    fn entry_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let words: Vec<u64> = (0..200).map(|_| rng.random()).collect();
        let data = Dataset::new(64, (0..200).map(Label).collect(), words).unwrap();
        let entries: Vec<Label> = (0..64).map(|i| Label(i * 3)).collect();
        for _ in 0..50 {
            let q = [rng.random::<u64>()];
            let oracle = entries
                .iter()
                .map(|&l| (per_bit(&q, data.code_of(l).unwrap()), l))
                .min()
                .unwrap()
                .1;
            assert_eq!(select_entry(&q, &entries, &data).unwrap(), oracle);
        }
        let q = data.code(9).to_vec();
        assert_eq!(select_entry(&q, &entries, &data).unwrap(), Label(9));
        assert_eq!(select_entry(&q, &[Label(7)], &data).unwrap(), Label(7));
        assert!(matches!(select_entry(&q, &[], &data), Err(Error::Index(_))));
    }

    #[test]
    fn full_pool_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 500;
        let words: Vec<u64> = (0..n * 2).map(|_| rng.random()).collect();
        let data = Dataset::new(128, (0..n as u64).map(Label).collect(), words).unwrap();
        // ring plus random chords keeps it connected
        let nodes = (0..n)
            .map(|i| {
                let mut ns = vec![(i + 1) % n, (i + n - 1) % n];
                ns.extend((0..4).map(|_| rng.random_range(0..n)));
                ns.retain(|&j| j != i);
                let list = NeighborList::from_candidates(
                    8,
                    ns.into_iter()
                        .map(|j| Neighbor::new(Label(j as u64), per_bit(data.code(i), data.code(j)))),
                );
                (Label(i as u64), list)
            })
            .collect();
        let g = KnnGraph::new(8, 128, vec![Label(0), Label(250)], nodes).unwrap();
        let idx = SearchIndex::new(g, data.clone()).unwrap();
        for _ in 0..5 {
            let q = [rng.random::<u64>(), rng.random::<u64>()];
            let mut oracle: Vec<Neighbor> = (0..n)
                .map(|j| Neighbor::new(Label(j as u64), per_bit(&q, data.code(j))))
                .collect();
            oracle.sort();
            let mut st = SearchStats::default();
            let pool = idx.beam_search(&q, n, Label(0), &mut st).unwrap();
            assert_eq!(pool, oracle);
            assert!(st.hops <= n as u64);
            let mut st = SearchStats::default();
            let pool = idx.beam_search(&q, 200, Label(0), &mut st).unwrap();
            assert!(pool.windows(2).all(|w| w[0] < w[1]));
            assert_eq!(pool[0], oracle[0]);
        }
    }

    #[test]
    fn rerank_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100;
        let dim = 6;
        let values: Vec<f32> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels: Vec<Label> = (0..n as u64).map(Label).collect();
        let words: Vec<u64> = (0..n).map(|_| rng.random()).collect();
        let data = Dataset::new(64, labels.clone(), words)
            .unwrap()
            .with_reals(RealTable::new(dim, labels, values.clone()).unwrap())
            .unwrap();
        let q: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pool: Vec<Neighbor> = (0..n).map(|i| Neighbor::new(Label(i as u64), 0)).collect();
        let mut st = SearchStats::default();
        let rs = rerank(&pool, &q, &data, 10, &mut st).unwrap();
        assert_eq!(st.l2, 100);
        let mut oracle: Vec<(f64, u64)> = (0..n)
            .map(|i| {
                let d: f64 = (0..dim)
                    .map(|j| {
                        let t = values[i * dim + j] as f64 - q[j] as f64;
                        t * t
                    })
                    .sum();
                (d, i as u64)
            })
            .collect();
        oracle.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(
            rs.labels().collect::<Vec<_>>(),
            oracle[..10].iter().map(|o| Label(o.1)).collect::<Vec<_>>()
        );
        for (h, o) in rs.hits.iter().zip(&oracle) {
            assert!((h.distance - o.0).abs() <= 1e-6 * o.0.max(1.0));
        }
        let one = rerank(&pool[..1], &q, &data, 1, &mut st).unwrap();
        assert_eq!(one.hits.len(), 1);
    }

    #[test]
    fn search_errors_and_passthrough() {
        let codes = [1u8, 3, 7, 15, 31];
        let data = byte_data(&codes);
        let adj: [&[u64]; 5] = [&[1], &[0, 2], &[1, 3], &[2, 4], &[3]];
        let idx = SearchIndex::new(graph_from(&data, &adj, vec![Label(0), Label(4)]), data).unwrap();
        let q = [7u64];
        let p = |ef, topn, rerank| SearchParams { ef, topn, rerank, ..SearchParams::default() };
        assert!(matches!(idx.search(&q, None, &p(2, 3, false)), Err(Error::Usage(_))));
        assert!(matches!(idx.search(&q, None, &p(3, 3, true)), Err(Error::Usage(_))));
        let (rs, st) = idx.search(&q, None, &p(3, 3, false)).unwrap();
        let mut s2 = SearchStats::default();
        // both entries are at distance 2; the lower label wins
        let pool = idx.beam_search(&q, 3, Label(0), &mut s2).unwrap();
        assert_eq!(rs.labels().collect::<Vec<_>>(), pool.iter().map(|n| n.label).collect::<Vec<_>>());
        assert_eq!(rs.hits[0].label, Label(2));
        assert_eq!(st.hamming_long, 2);
        assert!(!st.truncated);
        let (rs, st) = idx.search(&q, None, &p(10, 10, false)).unwrap();
        assert_eq!(rs.hits.len(), 5);
        assert!(st.truncated);
        assert!(matches!(
            idx.beam_search(&q, 3, Label(99), &mut SearchStats::default()),
            Err(Error::Index(_))
        ));
    }
}
