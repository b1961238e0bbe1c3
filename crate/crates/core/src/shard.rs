//! Multi-shard builds and query fan-out.
//!
//! Centers are trained once on a global sample and shared by every shard.
//! Points are split by a seeded label hash; each shard then runs probe,
//! propagation and pruning on its own points.
//!
//! Index directory layout:
//! - `manifest.txt`: versioned `key = value` text (see [`ShardManifest`])
//! - `centers.bdk`
//! - `shard-NNN/codes.bdg`, `shard-NNN/graph.bdg`, `shard-NNN/reals.bdr`
//!   (reals only when the input carried them)

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use tracing::info;

use crate::bitcore::io::{read_dataset, write_dataset};
use crate::bitcore::{Dataset, Label};
use crate::bkmeans::{default_sample_size, downsample, train, CenterSet, Training};
use crate::config::BuildConfig;
use crate::error::{Error, Result};
use crate::graph::KnnGraph;
use crate::graph_build::build_base_graph;
use crate::pipeline::{Engine, StageCounters};
use crate::propagation::{propagate, RoundStats};
use crate::pruner::prune_graph;
use crate::search::{Hit, ResultSet, SearchIndex, SearchParams, SearchStats, Searcher};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const MANIFEST_HEADER: &str = "bdg-manifest 1";
const CENTERS_FILE: &str = "centers.bdk";

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Partitions `data` into `shards` parts: points are ordered by a seeded
/// hash of their label and dealt round-robin, so sizes differ by at most one.
/// Each part keeps the original point order.
pub fn split_dataset(data: &Dataset, shards: usize, seed: u64) -> Result<Vec<Dataset>> {
    if shards == 0 {
        return Err(Error::usage("shard count must be at least 1"));
    }
    if shards > data.len() {
        return Err(Error::usage(format!(
            "{shards} shards for {} points",
            data.len()
        )));
    }
    if shards == 1 {
        return Ok(vec![data.clone()]);
    }
    let mut order: Vec<(u64, Label, usize)> = (0..data.len())
        .map(|i| (splitmix64(data.label(i).0 ^ seed), data.label(i), i))
        .collect();
    order.sort_unstable();
    let mut parts = vec![Vec::with_capacity(data.len() / shards + 1); shards];
    for (rank, &(_, _, i)) in order.iter().enumerate() {
        parts[rank % shards].push(i);
    }
    Ok(parts
        .into_iter()
        .map(|mut p| {
            p.sort_unstable();
            data.select(&p)
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct ShardReport {
    pub points: usize,
    pub base_comparisons: u64,
    pub rounds: Vec<RoundStats>,
    pub prune: StageCounters,
    pub build_time: Duration,
    pub propagate_time: Duration,
    pub prune_time: Duration,
}

#[derive(Debug, Clone)]
pub struct BuiltShard {
    pub data: Dataset,
    pub graph: KnnGraph,
    pub report: ShardReport,
}

#[derive(Debug, Clone)]
pub struct BuiltIndex {
    pub training: Training,
    pub shards: Vec<BuiltShard>,
    pub cluster_time: Duration,
}

pub fn train_centers(data: &Dataset, config: &BuildConfig) -> Result<Training> {
    let size = match config.sample_size {
        0 => default_sample_size(data.len(), config.m),
        s => s.min(data.len()),
    };
    let sample = downsample(data, size, config.seed)?;
    train(&sample, config.m, config.max_iters, config.seed)
}

/// Builds one shard's graph: probe, propagate, prune.
pub fn build_shard(
    engine: &Engine,
    data: &Dataset,
    centers: &CenterSet,
    config: &BuildConfig,
) -> Result<BuiltShard> {
    let t = Instant::now();
    let base = build_base_graph(engine, data, centers, &config.build_params())?;
    let build_time = t.elapsed();
    let t = Instant::now();
    let prop = propagate(engine, &base.graph, data, &config.propagation())?;
    let propagate_time = t.elapsed();
    let t = Instant::now();
    let (graph, prune) = prune_graph(engine, &prop.graph, data, &config.prune())?;
    let prune_time = t.elapsed();
    Ok(BuiltShard {
        data: data.clone(),
        graph,
        report: ShardReport {
            points: data.len(),
            base_comparisons: base.comparisons,
            rounds: prop.rounds,
            prune,
            build_time,
            propagate_time,
            prune_time,
        },
    })
}

pub fn build_index(engine: &Engine, data: &Dataset, config: &BuildConfig) -> Result<BuiltIndex> {
    config.validate()?;
    let t = Instant::now();
    let training = engine.install(|| train_centers(data, config))?;
    let cluster_time = t.elapsed();
    info!(
        m = config.m,
        iterations = training.iterations,
        secs = cluster_time.as_secs_f64(),
        "centers trained"
    );
    let parts = split_dataset(data, config.shards, config.seed)?;
    let centers = &training.centers;
    let shards = if config.concurrent_shards && parts.len() > 1 {
        engine.install(|| {
            parts
                .par_iter()
                .map(|p| build_shard(engine, p, centers, config))
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        parts
            .iter()
            .map(|p| build_shard(engine, p, centers, config))
            .collect::<Result<Vec<_>>>()?
    };
    for (i, s) in shards.iter().enumerate() {
        info!(
            shard = i,
            points = s.report.points,
            build_secs = s.report.build_time.as_secs_f64(),
            propagate_secs = s.report.propagate_time.as_secs_f64(),
            prune_secs = s.report.prune_time.as_secs_f64(),
            "shard built"
        );
    }
    Ok(BuiltIndex {
        training,
        shards,
        cluster_time,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardEntry {
    pub codes: String,
    pub graph: String,
    pub reals: Option<String>,
    pub points: usize,
    pub label_min: u64,
    pub label_max: u64,
}

/// Parsed `manifest.txt`. Paths are relative to `dir`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardManifest {
    pub dir: PathBuf,
    pub seed: u64,
    pub centers: String,
    pub shards: Vec<ShardEntry>,
    /// Build configuration, verbatim.
    pub config: Vec<(String, String)>,
    /// sha256 per relative path.
    pub hashes: BTreeMap<String, String>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl ShardManifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{MANIFEST_HEADER}");
        let _ = writeln!(s, "shards = {}", self.shards.len());
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "centers = {}", self.centers);
        for (k, v) in &self.config {
            let _ = writeln!(s, "config.{k} = {v}");
        }
        for (i, e) in self.shards.iter().enumerate() {
            let _ = writeln!(s, "shard.{i}.codes = {}", e.codes);
            let _ = writeln!(s, "shard.{i}.graph = {}", e.graph);
            if let Some(r) = &e.reals {
                let _ = writeln!(s, "shard.{i}.reals = {r}");
            }
            let _ = writeln!(s, "shard.{i}.points = {}", e.points);
            let _ = writeln!(s, "shard.{i}.label_min = {}", e.label_min);
            let _ = writeln!(s, "shard.{i}.label_max = {}", e.label_max);
        }
        for (path, h) in &self.hashes {
            let _ = writeln!(s, "sha256.{path} = {h}");
        }
        s
    }

    pub fn from_text(text: &str, dir: &Path) -> Result<Self> {
        let bad = |m: String| Error::Manifest(m);
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_HEADER) {
            return Err(bad(format!("missing header {MANIFEST_HEADER:?}")));
        }
        let mut kv = BTreeMap::new();
        let mut config = Vec::new();
        let mut hashes = BTreeMap::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| bad(format!("malformed line {line:?}")))?;
            if let Some(c) = k.strip_prefix("config.") {
                config.push((c.to_string(), v.to_string()));
            } else if let Some(p) = k.strip_prefix("sha256.") {
                hashes.insert(p.to_string(), v.to_string());
            } else {
                kv.insert(k.to_string(), v.to_string());
            }
        }
        let get = |k: &str| {
            kv.get(k)
                .cloned()
                .ok_or_else(|| Error::Manifest(format!("missing key {k}")))
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Manifest(format!("bad number for {k}")))
        };
        let count = num("shards")? as usize;
        let mut shards = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            shards.push(ShardEntry {
                codes: get(&format!("shard.{i}.codes"))?,
                graph: get(&format!("shard.{i}.graph"))?,
                reals: kv.get(&format!("shard.{i}.reals")).cloned(),
                points: num(&format!("shard.{i}.points"))? as usize,
                label_min: num(&format!("shard.{i}.label_min"))?,
                label_max: num(&format!("shard.{i}.label_max"))?,
            });
        }
        Ok(ShardManifest {
            dir: dir.to_path_buf(),
            seed: num("seed")?,
            centers: get("centers")?,
            shards,
            config,
            hashes,
        })
    }

    /// Reads `manifest.txt` from an index directory, or a manifest file
    /// directly.
    pub fn read(path: &Path) -> Result<Self> {
        let (file, dir) = if path.is_dir() {
            (path.join(MANIFEST_FILE), path.to_path_buf())
        } else {
            (
                path.to_path_buf(),
                path.parent().unwrap_or(Path::new(".")).to_path_buf(),
            )
        };
        let text = fs::read_to_string(&file)
            .map_err(|e| Error::Manifest(format!("{}: {e}", file.display())))?;
        Self::from_text(&text, &dir)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    /// Re-hashes every listed file.
    pub fn verify(&self) -> Result<()> {
        let mut listed = vec![self.centers.clone()];
        for e in &self.shards {
            listed.push(e.codes.clone());
            listed.push(e.graph.clone());
            listed.extend(e.reals.clone());
        }
        for rel in listed {
            let want = self
                .hashes
                .get(&rel)
                .ok_or_else(|| Error::Manifest(format!("no hash recorded for {rel}")))?;
            let got = sha256_file(&self.path(&rel))?;
            if &got != want {
                return Err(Error::Manifest(format!("{rel}: hash mismatch")));
            }
        }
        Ok(())
    }

    pub fn centers(&self) -> Result<CenterSet> {
        CenterSet::read(&self.path(&self.centers))
    }
}

/// Writes a built index into `out`, which must not exist yet. Files are
/// written to a sibling temporary directory that is renamed into place on
/// success and removed on failure.
pub fn write_index(built: &BuiltIndex, config: &BuildConfig, out: &Path) -> Result<ShardManifest> {
    if out.exists() {
        return Err(Error::usage(format!("{} already exists", out.display())));
    }
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent)?;
    let tmp = tempfile::Builder::new()
        .prefix(".bdg-build-")
        .tempdir_in(&parent)?;
    let manifest = write_files(built, config, tmp.path())?;
    let staged = tmp.keep();
    if let Err(e) = fs::rename(&staged, out) {
        let _ = fs::remove_dir_all(&staged);
        return Err(e.into());
    }
    Ok(ShardManifest {
        dir: out.to_path_buf(),
        ..manifest
    })
}

fn write_files(built: &BuiltIndex, config: &BuildConfig, dir: &Path) -> Result<ShardManifest> {
    let mut hashes = BTreeMap::new();
    let mut record = |rel: &str| -> Result<()> {
        hashes.insert(rel.to_string(), sha256_file(&dir.join(rel))?);
        Ok(())
    };
    built.training.centers.write(&dir.join(CENTERS_FILE))?;
    record(CENTERS_FILE)?;
    let mut shards = Vec::with_capacity(built.shards.len());
    for (i, s) in built.shards.iter().enumerate() {
        let sub = format!("shard-{i:03}");
        fs::create_dir(dir.join(&sub))?;
        let codes = format!("{sub}/codes.bdg");
        let graph = format!("{sub}/graph.bdg");
        let reals = s.data.reals().map(|_| format!("{sub}/reals.bdr"));
        write_dataset(
            &s.data,
            &dir.join(&codes),
            reals.as_ref().map(|r| dir.join(r)).as_deref(),
        )?;
        s.graph.write(&dir.join(&graph))?;
        record(&codes)?;
        record(&graph)?;
        if let Some(r) = &reals {
            record(r)?;
        }
        let labels = s.data.labels();
        shards.push(ShardEntry {
            codes,
            graph,
            reals,
            points: labels.len(),
            label_min: labels.iter().min().map_or(0, |l| l.0),
            label_max: labels.iter().max().map_or(0, |l| l.0),
        });
    }
    let manifest = ShardManifest {
        dir: dir.to_path_buf(),
        seed: config.seed,
        centers: CENTERS_FILE.to_string(),
        shards,
        config: crate::config::KEYS
            .iter()
            .map(|k| (k.to_string(), config.get(k).unwrap()))
            .collect(),
        hashes,
    };
    crate::codec::write_file(&dir.join(MANIFEST_FILE), manifest.to_text().as_bytes())?;
    Ok(manifest)
}

/// Loaded shards answering queries by broadcast and merge.
#[derive(Debug, Clone)]
pub struct ShardSet {
    shards: Vec<SearchIndex>,
}

impl ShardSet {
    pub fn new(shards: Vec<SearchIndex>) -> Result<Self> {
        if shards.is_empty() {
            return Err(Error::index("no shards"));
        }
        Ok(ShardSet { shards })
    }

    pub fn from_built(built: &BuiltIndex) -> Result<Self> {
        Self::new(
            built
                .shards
                .iter()
                .map(|s| SearchIndex::new(s.graph.clone(), s.data.clone()))
                .collect::<Result<_>>()?,
        )
    }

    pub fn load(manifest: &ShardManifest, verify: bool) -> Result<Self> {
        if verify {
            manifest.verify()?;
        }
        let shards = manifest
            .shards
            .iter()
            .map(|e| {
                let must_exist = |rel: &str| {
                    let p = manifest.path(rel);
                    if p.is_file() {
                        Ok(p)
                    } else {
                        Err(Error::Manifest(format!("missing shard file {}", p.display())))
                    }
                };
                let codes = must_exist(&e.codes)?;
                let graph = must_exist(&e.graph)?;
                let reals = e.reals.as_deref().map(must_exist).transpose()?;
                let data = read_dataset(&codes, reals.as_deref())?;
                SearchIndex::new(KnnGraph::read(&graph)?, data)
            })
            .collect::<Result<_>>()?;
        Self::new(shards)
    }

    pub fn shards(&self) -> &[SearchIndex] {
        &self.shards
    }
}

impl Searcher for ShardSet {
    fn search(
        &self,
        query: &[u64],
        query_real: Option<&[f32]>,
        params: &SearchParams,
    ) -> Result<(ResultSet, SearchStats)> {
        let mut stats = SearchStats::default();
        let mut results = Vec::with_capacity(self.shards.len());
        for s in &self.shards {
            let (r, st) = s.search(query, query_real, params)?;
            stats.add(&st);
            results.push(r);
        }
        let merged = merge_results(&results, params.topn)?;
        stats.truncated = merged.hits.len() < params.topn;
        Ok((merged, stats))
    }
}

/// Top `topn` of the union of per-shard results by (distance, label).
pub fn merge_results(results: &[ResultSet], topn: usize) -> Result<ResultSet> {
    let metric = results
        .first()
        .map(|r| r.metric)
        .ok_or_else(|| Error::index("nothing to merge"))?;
    if results.iter().any(|r| r.metric != metric) {
        return Err(Error::index("shard results use different metrics"));
    }
    let mut hits: Vec<Hit> = results.iter().flat_map(|r| r.hits.iter().copied()).collect();
    hits.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.label.cmp(&b.label)));
    hits.truncate(topn);
    Ok(ResultSet { metric, hits })
}
