//! Local, deterministic map-shuffle-reduce execution.
//!
//! A stage maps input splits in parallel, shuffles every emitted record to
//! the worker that owns its key (placement balanced over key-group sizes),
//! then reduces each key group exactly once. Payloads inside a group are
//! presented sorted by their bytes, and the stage output is ordered by group
//! key, so results do not depend on the worker count or on scheduling.
//!
//! Map output beyond the memory budget is sorted and spilled to temporary
//! files; reducers merge memory and file runs transparently.

mod balance;
mod records;
mod spill;

pub use balance::{balance_groups, LoadBalanceInput, Placement};
pub use records::{Emitter, KvRecord, Records};

use std::collections::HashMap;
use std::path::PathBuf;

use rayon::prelude::*;
use tracing::debug;

use crate::error::{Error, Result};
use spill::Run;

/// Default shuffle memory budget: 1 GiB across all map splits.
pub const DEFAULT_MEMORY_BUDGET: usize = 1 << 30;

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub workers: usize,
    /// Shuffle bytes held in memory before map output is spilled.
    pub memory_budget: usize,
    pub spill_dir: Option<PathBuf>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            workers: std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1),
            memory_budget: DEFAULT_MEMORY_BUDGET,
            spill_dir: None,
        }
    }
}

/// Exact per-stage record counters.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StageCounters {
    pub input: u64,
    /// Records emitted by mappers.
    pub emitted: u64,
    /// Records delivered to reducers; equals `emitted` for every stage.
    pub shuffled: u64,
    pub groups: u64,
    pub output: u64,
    pub spill_runs: u64,
    pub spilled_records: u64,
}

/// How a stage was laid out over the workers.
#[derive(Debug, Clone)]
pub struct StagePlan {
    pub workers: usize,
    pub placement: Placement,
    pub counters: StageCounters,
}

#[derive(Debug, Clone)]
pub struct StageOutput {
    pub records: Records,
    pub plan: StagePlan,
}

/// Optional constraint on the keys a reducer may emit.
pub type KeyDomain<'a> = &'a (dyn Fn(u64) -> bool + Sync);

pub struct Engine {
    config: EngineConfig,
    pool: rayon::ThreadPool,
}

impl Engine {
    pub fn new(config: EngineConfig) -> Result<Self> {
        if config.workers == 0 {
            return Err(Error::usage("worker count must be at least 1"));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| Error::pipeline(format!("cannot start worker pool: {e}")))?;
        Ok(Engine { config, pool })
    }

    pub fn with_workers(workers: usize) -> Result<Self> {
        Self::new(EngineConfig {
            workers,
            ..EngineConfig::default()
        })
    }

    pub fn workers(&self) -> usize {
        self.config.workers
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    /// Runs a closure on the engine's worker pool.
    pub fn install<T: Send>(&self, f: impl FnOnce() -> T + Send) -> T {
        self.pool.install(f)
    }

    /// Map + shuffle + reduce.
    pub fn run_stage<M, R>(
        &self,
        name: &str,
        input: &Records,
        mapper: M,
        reducer: R,
        output_keys: Option<KeyDomain<'_>>,
    ) -> Result<StageOutput>
    where
        M: Fn(u64, &[u8], &mut Emitter) -> Result<()> + Sync,
        R: Fn(u64, &[&[u8]], &mut Emitter) -> Result<()> + Sync,
    {
        self.pool
            .install(|| self.run_stage_inner(name, input, &mapper, &reducer, output_keys))
    }

    /// Shuffle + reduce over records produced by an earlier stage.
    pub fn run_reduce<R>(
        &self,
        name: &str,
        input: &Records,
        reducer: R,
        output_keys: Option<KeyDomain<'_>>,
    ) -> Result<StageOutput>
    where
        R: Fn(u64, &[&[u8]], &mut Emitter) -> Result<()> + Sync,
    {
        let identity = |k: u64, v: &[u8], out: &mut Emitter| {
            out.emit(k, v);
            Ok(())
        };
        self.run_stage(name, input, identity, reducer, output_keys)
    }

    /// Map-only stage; output keeps input order.
    pub fn run_map<M>(&self, name: &str, input: &Records, mapper: M) -> Result<StageOutput>
    where
        M: Fn(u64, &[u8], &mut Emitter) -> Result<()> + Sync,
    {
        self.pool.install(|| {
            let splits = split_ranges(input.len(), self.config.workers);
            let outs: Vec<Records> = splits
                .par_iter()
                .map(|range| {
                    let mut em = Emitter::default();
                    for i in range.clone() {
                        let (k, v) = input.get(i);
                        mapper(k, v, &mut em)?;
                    }
                    Ok(em.out)
                })
                .collect::<Result<_>>()?;
            let mut records = Records::new();
            for o in &outs {
                records.extend_from(o, 0..o.len());
            }
            let n = records.len() as u64;
            debug!(stage = name, input = input.len(), output = n, "map-only stage");
            Ok(StageOutput {
                records,
                plan: StagePlan {
                    workers: self.config.workers,
                    placement: Placement {
                        assignment: Vec::new(),
                        loads: vec![0; self.config.workers],
                    },
                    counters: StageCounters {
                        input: input.len() as u64,
                        emitted: n,
                        output: n,
                        ..StageCounters::default()
                    },
                },
            })
        })
    }

    fn run_stage_inner(
        &self,
        name: &str,
        input: &Records,
        mapper: &(dyn Fn(u64, &[u8], &mut Emitter) -> Result<()> + Sync),
        reducer: &(dyn Fn(u64, &[&[u8]], &mut Emitter) -> Result<()> + Sync),
        output_keys: Option<KeyDomain<'_>>,
    ) -> Result<StageOutput> {
        let workers = self.config.workers;
        let split_budget = (self.config.memory_budget / workers).max(1);
        let spill_dir = self.config.spill_dir.as_deref();

        // map: each split yields sorted runs plus its key histogram
        let splits = split_ranges(input.len(), workers);
        let mapped: Vec<(Vec<Run>, HashMap<u64, u64>, u64)> = splits
            .par_iter()
            .map(|range| {
                let mut runs = Vec::new();
                let mut sizes: HashMap<u64, u64> = HashMap::new();
                let mut emitted = 0u64;
                let mut em = Emitter::default();
                for i in range.clone() {
                    let (k, v) = input.get(i);
                    let before = em.out.len();
                    mapper(k, v, &mut em)?;
                    for j in before..em.out.len() {
                        *sizes.entry(em.out.key(j)).or_default() += 1;
                    }
                    emitted += (em.out.len() - before) as u64;
                    if em.out.footprint() > split_budget {
                        em.out.sort();
                        runs.push(Run::spill(&em.out, spill_dir)?);
                        em.out.clear();
                    }
                }
                if !em.out.is_empty() {
                    em.out.sort();
                    runs.push(Run::Memory(em.out));
                }
                Ok((runs, sizes, emitted))
            })
            .collect::<Result<_>>()?;

        let mut counters = StageCounters {
            input: input.len() as u64,
            ..StageCounters::default()
        };
        let mut sizes: HashMap<u64, u64> = HashMap::new();
        let mut runs = Vec::new();
        for (r, s, e) in mapped {
            counters.emitted += e;
            for (k, c) in s {
                *sizes.entry(k).or_default() += c;
            }
            for run in r {
                if let Run::File { records, .. } = &run {
                    counters.spill_runs += 1;
                    counters.spilled_records += records;
                }
                runs.push(run);
            }
        }

        let placement = balance_groups(&LoadBalanceInput {
            groups: sizes.into_iter().collect(),
            workers,
        });
        counters.groups = placement.assignment.len() as u64;

        // reduce: worker w merges all runs, keeping only the groups it owns
        let per_worker: Vec<(Records, Vec<(u64, usize, usize)>, u64)> = (0..workers)
            .into_par_iter()
            .map(|w| reduce_worker(w, &runs, &placement, reducer, output_keys))
            .collect::<Result<_>>()?;

        for (_, _, shuffled) in &per_worker {
            counters.shuffled += shuffled;
        }
        if counters.shuffled != counters.emitted {
            return Err(Error::pipeline(format!(
                "stage {name}: {} records emitted but {} shuffled",
                counters.emitted, counters.shuffled
            )));
        }

        // concatenate group outputs in ascending key order
        let mut order: Vec<(u64, usize, usize, usize)> = per_worker
            .iter()
            .enumerate()
            .flat_map(|(w, (_, groups, _))| groups.iter().map(move |&(k, s, e)| (k, w, s, e)))
            .collect();
        order.sort_unstable_by_key(|&(k, ..)| k);
        let mut records = Records::new();
        for (_, w, s, e) in order {
            records.extend_from(&per_worker[w].0, s..e);
        }
        counters.output = records.len() as u64;
        debug!(
            stage = name,
            input = counters.input,
            emitted = counters.emitted,
            groups = counters.groups,
            output = counters.output,
            spill_runs = counters.spill_runs,
            max_load = placement.max_load(),
            "stage done"
        );
        Ok(StageOutput {
            records,
            plan: StagePlan {
                workers,
                placement,
                counters,
            },
        })
    }
}

type WorkerOutput = (Records, Vec<(u64, usize, usize)>, u64);

fn reduce_worker(
    worker: usize,
    runs: &[Run],
    placement: &Placement,
    reducer: &(dyn Fn(u64, &[&[u8]], &mut Emitter) -> Result<()> + Sync),
    output_keys: Option<KeyDomain<'_>>,
) -> Result<WorkerOutput> {
    let owned = |k: u64| placement.worker_of(k) == Some(worker);
    let mut cursors = runs.iter().map(|r| r.cursor()).collect::<Result<Vec<_>>>()?;
    let skip_foreign = |c: &mut Box<dyn spill::Cursor + '_>| -> Result<()> {
        while let Some(k) = c.peek() {
            if owned(k) {
                break;
            }
            c.advance_group(None)?;
        }
        Ok(())
    };
    for c in cursors.iter_mut() {
        skip_foreign(c)?;
    }

    let mut em = Emitter::default();
    let mut groups = Vec::new();
    let mut group = Records::new();
    let mut shuffled = 0u64;
    while let Some(key) = cursors.iter().filter_map(|c| c.peek()).min() {
        group.clear();
        for c in cursors.iter_mut() {
            if c.peek() == Some(key) {
                c.advance_group(Some(&mut group))?;
                skip_foreign(c)?;
            }
        }
        shuffled += group.len() as u64;
        let mut values: Vec<&[u8]> = group.iter().map(|(_, v)| v).collect();
        values.sort_unstable();
        let start = em.out.len();
        reducer(key, &values, &mut em)?;
        if let Some(domain) = output_keys {
            for i in start..em.out.len() {
                let k = em.out.key(i);
                if !domain(k) {
                    return Err(Error::pipeline(format!(
                        "reducer for key {key} emitted key {k} outside the declared output domain"
                    )));
                }
            }
        }
        groups.push((key, start, em.out.len()));
    }
    Ok((em.out, groups, shuffled))
}

fn split_ranges(n: usize, parts: usize) -> Vec<std::ops::Range<usize>> {
    let parts = parts.max(1);
    (0..parts)
        .map(|p| (n * p / parts)..(n * (p + 1) / parts))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn engine(workers: usize, budget: usize) -> Engine {
        Engine::new(EngineConfig {
            workers,
            memory_budget: budget,
            spill_dir: None,
        })
        .unwrap()
    }

    fn words_input() -> Records {
        let text = "the quick brown fox jumps over the lazy dog the end fox";
        text.split(' ')
            .enumerate()
            .map(|(i, w)| KvRecord::new(i as u64, w.as_bytes()))
            .collect()
    }

    fn word_key(w: &[u8]) -> u64 {
        // first four bytes are unique for this text
        w.iter().take(4).fold(0u64, |a, &b| a * 256 + b as u64)
    }

    fn word_count(e: &Engine) -> StageOutput {
        e.run_stage(
            "wc",
            &words_input(),
            |_, v, out| {
                out.emit(word_key(v), v);
                Ok(())
            },
            |k, vals, out| {
                let mut v = vals[0].to_vec();
                v.extend_from_slice(&(vals.len() as u32).to_le_bytes());
                out.emit(k, &v);
                Ok(())
            },
            None,
        )
        .unwrap()
    }

    #[test]
    fn word_count_matches_sequential_run() {
        let out = word_count(&engine(3, 1 << 20));
        let mut oracle: BTreeMap<&str, u32> = BTreeMap::new();
        for w in "the quick brown fox jumps over the lazy dog the end fox".split(' ') {
            *oracle.entry(w).or_default() += 1;
        }
        let got: BTreeMap<String, u32> = out
            .records
            .iter()
            .map(|(_, v)| {
                let (w, c) = v.split_at(v.len() - 4);
                (
                    String::from_utf8(w.to_vec()).unwrap(),
                    u32::from_le_bytes(c.try_into().unwrap()),
                )
            })
            .collect();
        let oracle: BTreeMap<String, u32> =
            oracle.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        assert_eq!(got, oracle);
        assert_eq!(out.plan.counters.emitted, 12);
        assert_eq!(out.plan.counters.shuffled, 12);
    }

    #[test]
    fn identity_stage_preserves_multiset() {
        let input: Records = (0..500u64)
            .map(|i| KvRecord::new(i % 37, (i * 7919 % 1000).to_le_bytes()))
            .collect();
        let out = engine(4, 1 << 20)
            .run_reduce(
                "id",
                &input,
                |k, vals, out| {
                    for v in vals {
                        out.emit(k, v);
                    }
                    Ok(())
                },
                None,
            )
            .unwrap();
        let mut a = input.to_vec();
        let mut b = out.records.to_vec();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn output_identical_across_workers_and_spills() {
        let input: Records = (0..3000u64)
            .map(|i| KvRecord::new(i, (i * 2654435761 % 977).to_le_bytes()))
            .collect();
        let run = |w: usize, budget: usize| {
            engine(w, budget)
                .run_stage(
                    "mod",
                    &input,
                    |_, v, out| {
                        let x = u64::from_le_bytes(v.try_into().unwrap());
                        out.emit(x % 53, v);
                        out.emit(x % 7 + 1000, &[1, 2, 3]);
                        Ok(())
                    },
                    |k, vals, out| {
                        let mut bytes = Vec::new();
                        for v in vals {
                            bytes.extend_from_slice(v);
                        }
                        out.emit(k, &bytes);
                        Ok(())
                    },
                    None,
                )
                .unwrap()
        };
        let base = run(1, 1 << 30);
        assert_eq!(base.plan.counters.spill_runs, 0);
        for (w, budget) in [(8, 1 << 30), (4, 2048), (1, 512), (3, 100)] {
            let other = run(w, budget);
            assert_eq!(other.records, base.records, "W={w} budget={budget}");
            assert_eq!(other.plan.counters.shuffled, other.plan.counters.emitted);
            if budget < 4096 {
                assert!(other.plan.counters.spill_runs > 0);
            }
        }
    }

    #[test]
    fn reducer_key_outside_domain_is_error() {
        let input: Records = (0..10u64).map(|i| KvRecord::new(i, [0u8])).collect();
        let domain = |k: u64| k < 10;
        let err = engine(2, 1 << 20)
            .run_reduce(
                "bad",
                &input,
                |k, _, out| {
                    out.emit(k + 5, &[]);
                    Ok(())
                },
                Some(&domain),
            )
            .unwrap_err();
        assert!(matches!(err, Error::Pipeline(_)));
    }

    #[test]
    fn map_only_keeps_order() {
        let input: Records = (0..100u64).map(|i| KvRecord::new(100 - i, [i as u8])).collect();
        let out = engine(7, 1 << 20)
            .run_map("m", &input, |k, v, out| {
                out.emit(k, v);
                Ok(())
            })
            .unwrap();
        assert_eq!(out.records, input);
    }
}
