//! Ground truth, recall, parameter sweeps and graph quality.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::io;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bitcore::{hamming_words, l2_squared_unchecked, Dataset, Label};
use crate::error::{Error, Result};
use crate::graph::{KnnGraph, Neighbor};
use crate::search::{Metric, ResultSet, SearchParams, SearchStats, Searcher};

/// Exact top-N per query under one metric.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub metric: Metric,
    pub topn: usize,
    /// One ascending list per query, in query order.
    pub lists: Vec<Vec<(Label, f64)>>,
}

#[derive(Clone, Copy, PartialEq)]
struct Keyed(f64, Label);

impl Eq for Keyed {}

impl PartialOrd for Keyed {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Keyed {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

pub fn brute_force_topn(
    queries: &Dataset,
    data: &Dataset,
    metric: Metric,
    topn: usize,
) -> Result<GroundTruth> {
    if topn == 0 {
        return Err(Error::usage("topn must be at least 1"));
    }
    let n = topn.min(data.len());
    let lists = match metric {
        Metric::Hamming => {
            if queries.d_bits() != data.d_bits() {
                return Err(Error::usage(format!(
                    "query width {} does not match data width {}",
                    queries.d_bits(),
                    data.d_bits()
                )));
            }
            (0..queries.len())
                .into_par_iter()
                .map(|q| {
                    let query = queries.code(q);
                    top_by(n, data.len(), |j| {
                        Keyed(hamming_words(query, data.code(j)) as f64, data.label(j))
                    })
                })
                .collect()
        }
        Metric::L2 => {
            let (qr, dr) = match (queries.reals(), data.reals()) {
                (Some(q), Some(d)) => (q, d),
                _ => {
                    return Err(Error::usage(
                        "l2 ground truth needs real vectors for queries and data",
                    ))
                }
            };
            if qr.dim() != dr.dim() {
                return Err(Error::usage("query and data real dimensions differ"));
            }
            (0..queries.len())
                .into_par_iter()
                .map(|q| {
                    let query = qr.row(q);
                    top_by(n, data.len(), |j| {
                        Keyed(l2_squared_unchecked(query, dr.row(j)), data.label(j))
                    })
                })
                .collect()
        }
    };
    Ok(GroundTruth {
        metric,
        topn: n,
        lists,
    })
}

fn top_by(n: usize, len: usize, key: impl Fn(usize) -> Keyed) -> Vec<(Label, f64)> {
    let mut heap: BinaryHeap<Keyed> = BinaryHeap::with_capacity(n + 1);
    for j in 0..len {
        let k = key(j);
        if heap.len() < n {
            heap.push(k);
        } else if k < *heap.peek().unwrap() {
            heap.pop();
            heap.push(k);
        }
    }
    heap.into_sorted_vec()
        .into_iter()
        .map(|Keyed(d, l)| (l, d))
        .collect()
}

/// `|top-n of found ∩ top-n of truth| / n`, with `n` clamped to the truth
/// length.
pub fn recall(found: impl IntoIterator<Item = Label>, truth: &[(Label, f64)], n: usize) -> f64 {
    let n = n.min(truth.len());
    if n == 0 {
        return 1.0;
    }
    let want: HashSet<Label> = truth[..n].iter().map(|t| t.0).collect();
    let hit = found
        .into_iter()
        .take(n)
        .collect::<HashSet<_>>()
        .intersection(&want)
        .count();
    hit as f64 / n as f64
}

/// One (ef, topn) row of a sweep; field names are the CSV header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub ef: usize,
    pub topn: usize,
    pub metric: String,
    pub rerank: bool,
    pub recall_mean: f64,
    pub time_ms_mean: f64,
    pub time_ms_p50: f64,
    pub hamming_evals_mean_long: f64,
    pub hamming_evals_mean_short: f64,
    pub l2_evals_mean: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub graph_quality: Option<f64>,
}

impl EvalReport {
    pub fn write_csv<W: io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: io::Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let headers = r.headers().map_err(csv_error)?.clone();
        if headers.iter().collect::<Vec<_>>() != CSV_HEADER {
            return Err(Error::format(format!("unexpected report header {headers:?}")));
        }
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<EvalRow>, _>>()
            .map_err(csv_error)?;
        Ok(EvalReport {
            rows,
            graph_quality: None,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

pub const CSV_HEADER: [&str; 10] = [
    "ef",
    "topn",
    "metric",
    "rerank",
    "recall_mean",
    "time_ms_mean",
    "time_ms_p50",
    "hamming_evals_mean_long",
    "hamming_evals_mean_short",
    "l2_evals_mean",
];

fn csv_error(e: csv::Error) -> Error {
    Error::format(format!("report csv: {e}"))
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub efs: Vec<usize>,
    pub topns: Vec<usize>,
    pub rerank: bool,
    /// Metric the caller evaluates against; must match the truth.
    pub metric: Metric,
    pub entry_samples: Option<usize>,
    pub seed: u64,
}

/// Per-query outcome of one sweep point.
#[derive(Debug, Clone)]
pub struct QueryOutcome {
    pub result: ResultSet,
    pub stats: SearchStats,
    pub millis: f64,
}

/// Runs every query once per (ef, topn) pair with `topn <= ef`.
pub fn sweep(
    searcher: &dyn Searcher,
    queries: &Dataset,
    truth: &GroundTruth,
    config: &SweepConfig,
) -> Result<EvalReport> {
    if config.metric != truth.metric {
        return Err(Error::usage(format!(
            "evaluation metric {} does not match ground truth metric {}",
            config.metric, truth.metric
        )));
    }
    if truth.lists.len() != queries.len() {
        return Err(Error::usage(format!(
            "ground truth has {} queries, query set has {}",
            truth.lists.len(),
            queries.len()
        )));
    }
    let mut rows = Vec::new();
    for &ef in &config.efs {
        for &topn in &config.topns {
            if topn > ef {
                continue;
            }
            let params = SearchParams {
                ef,
                topn,
                entry_samples: config.entry_samples,
                rerank: config.rerank,
                seed: config.seed,
            };
            let outcomes = run_queries(searcher, queries, &params)?;
            rows.push(summarize(&outcomes, truth, &params, config.metric));
        }
    }
    Ok(EvalReport {
        rows,
        graph_quality: None,
    })
}

pub fn run_queries(
    searcher: &dyn Searcher,
    queries: &Dataset,
    params: &SearchParams,
) -> Result<Vec<QueryOutcome>> {
    params.validate()?;
    (0..queries.len())
        .into_par_iter()
        .map(|q| {
            let real = queries.reals().map(|r| r.row(q));
            let t = Instant::now();
            let (result, stats) = searcher.search(queries.code(q), real, params)?;
            let millis = t.elapsed().as_secs_f64() * 1e3;
            Ok(QueryOutcome {
                result,
                stats,
                millis,
            })
        })
        .collect()
}

pub fn summarize(
    outcomes: &[QueryOutcome],
    truth: &GroundTruth,
    params: &SearchParams,
    metric: Metric,
) -> EvalRow {
    let q = outcomes.len().max(1) as f64;
    let mean = |f: &dyn Fn(&QueryOutcome) -> f64| outcomes.iter().map(f).sum::<f64>() / q;
    let mut times: Vec<f64> = outcomes.iter().map(|o| o.millis).collect();
    times.sort_by(f64::total_cmp);
    let p50 = match times.len() {
        0 => 0.0,
        n if n % 2 == 1 => times[n / 2],
        n => (times[n / 2 - 1] + times[n / 2]) / 2.0,
    };
    let recall_mean = outcomes
        .iter()
        .zip(&truth.lists)
        .map(|(o, t)| recall(o.result.labels(), t, params.topn))
        .sum::<f64>()
        / q;
    EvalRow {
        ef: params.ef,
        topn: params.topn,
        metric: metric.to_string(),
        rerank: params.rerank,
        recall_mean,
        time_ms_mean: mean(&|o| o.millis),
        time_ms_p50: p50,
        hamming_evals_mean_long: mean(&|o| o.stats.hamming_long as f64),
        hamming_evals_mean_short: mean(&|o| o.stats.hamming_short as f64),
        l2_evals_mean: mean(&|o| o.stats.l2 as f64),
    }
}

/// Exact Hamming k-NN lists for every point, in dataset order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExactKnn {
    pub k: usize,
    pub lists: Vec<Vec<Neighbor>>,
}

pub fn exact_knn(data: &Dataset, k: usize) -> ExactKnn {
    let lists = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let code = data.code(i);
            let mut heap: BinaryHeap<Neighbor> = BinaryHeap::with_capacity(k + 1);
            for j in 0..data.len() {
                if j == i {
                    continue;
                }
                let d = hamming_words(code, data.code(j));
                if heap.len() < k {
                    heap.push(Neighbor::new(data.label(j), d));
                } else if let Some(top) = heap.peek() {
                    if d < top.dist || (d == top.dist && data.label(j) < top.label) {
                        heap.pop();
                        heap.push(Neighbor::new(data.label(j), d));
                    }
                }
            }
            heap.into_sorted_vec()
        })
        .collect();
    ExactKnn { k, lists }
}

/// Mean over nodes of `|stored top-k ∩ true top-k| / k`.
pub fn graph_quality(graph: &KnnGraph, data: &Dataset, truth: &ExactKnn) -> Result<f64> {
    let k = truth.k;
    if k == 0 || k > graph.k_max() {
        return Err(Error::usage(format!(
            "quality k {k} outside 1..={}",
            graph.k_max()
        )));
    }
    if truth.lists.len() != data.len() {
        return Err(Error::usage("exact lists do not match the dataset"));
    }
    if data.len() < 2 {
        return Ok(1.0);
    }
    let total: f64 = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let want = &truth.lists[i];
            let have: HashSet<Label> = graph
                .neighbors(data.label(i))
                .map(|l| l.labels().take(k).collect())
                .unwrap_or_default();
            let hit = want.iter().filter(|n| have.contains(&n.label)).count();
            hit as f64 / want.len().max(1) as f64
        })
        .sum();
    Ok(total / data.len() as f64)
}
