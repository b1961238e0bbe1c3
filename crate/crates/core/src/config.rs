//! Flat `key = value` build configuration.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::bkmeans::DEFAULT_MAX_ITERS;
use crate::error::{Error, Result};
use crate::graph_build::{BuildParams, DEFAULT_COARSE_NUM, DEFAULT_ENTRY_SAMPLES, DEFAULT_K};
use crate::pipeline::{EngineConfig, DEFAULT_MEMORY_BUDGET};
use crate::propagation::{PropagationParams, DEFAULT_ROUNDS};
use crate::pruner::{PruneParams, DEFAULT_MAX_DEGREE};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuildConfig {
    pub m: usize,
    pub coarse_num: u64,
    pub k: usize,
    pub rounds: usize,
    pub filter: bool,
    pub max_degree: usize,
    pub occlusion: bool,
    pub shards: usize,
    pub seed: u64,
    pub workers: usize,
    pub memory_budget: usize,
    pub max_iters: usize,
    /// 0 picks the default sample size.
    pub sample_size: usize,
    pub entry_samples: usize,
    pub group_budget: u64,
    pub concurrent_shards: bool,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            m: 8192,
            coarse_num: DEFAULT_COARSE_NUM,
            k: DEFAULT_K,
            rounds: DEFAULT_ROUNDS,
            filter: true,
            max_degree: DEFAULT_MAX_DEGREE,
            occlusion: true,
            shards: 1,
            seed: 0,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            memory_budget: DEFAULT_MEMORY_BUDGET,
            max_iters: DEFAULT_MAX_ITERS,
            sample_size: 0,
            entry_samples: DEFAULT_ENTRY_SAMPLES,
            group_budget: BuildParams::default().group_budget,
            concurrent_shards: true,
        }
    }
}

pub const KEYS: [&str; 16] = [
    "m",
    "coarse_num",
    "k",
    "rounds",
    "filter",
    "max_degree",
    "occlusion",
    "shards",
    "seed",
    "workers",
    "memory_budget",
    "max_iters",
    "sample_size",
    "entry_samples",
    "group_budget",
    "concurrent_shards",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::usage(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::usage(format!("invalid value {value:?} for {key}"))),
    }
}

impl BuildConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "m" => self.m = parse(key, value)?,
            "coarse_num" => self.coarse_num = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "rounds" => self.rounds = parse(key, value)?,
            "filter" => self.filter = parse_bool(key, value)?,
            "max_degree" => self.max_degree = parse(key, value)?,
            "occlusion" => self.occlusion = parse_bool(key, value)?,
            "shards" => self.shards = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "workers" => self.workers = parse(key, value)?,
            "memory_budget" => self.memory_budget = parse(key, value)?,
            "max_iters" => self.max_iters = parse(key, value)?,
            "sample_size" => self.sample_size = parse(key, value)?,
            "entry_samples" => self.entry_samples = parse(key, value)?,
            "group_budget" => self.group_budget = parse(key, value)?,
            "concurrent_shards" => self.concurrent_shards = parse_bool(key, value)?,
            _ => return Err(Error::usage(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "m" => self.m.to_string(),
            "coarse_num" => self.coarse_num.to_string(),
            "k" => self.k.to_string(),
            "rounds" => self.rounds.to_string(),
            "filter" => self.filter.to_string(),
            "max_degree" => self.max_degree.to_string(),
            "occlusion" => self.occlusion.to_string(),
            "shards" => self.shards.to_string(),
            "seed" => self.seed.to_string(),
            "workers" => self.workers.to_string(),
            "memory_budget" => self.memory_budget.to_string(),
            "max_iters" => self.max_iters.to_string(),
            "sample_size" => self.sample_size.to_string(),
            "entry_samples" => self.entry_samples.to_string(),
            "group_budget" => self.group_budget.to_string(),
            "concurrent_shards" => self.concurrent_shards.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of the current values. Blank lines
    /// and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::usage(format!("config line {}: expected key = value", no + 1))
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = BuildConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Every key in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let _ = writeln!(s, "{key} = {}", self.get(key).unwrap());
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let positive: [(&str, u64); 10] = [
            ("m", self.m as u64),
            ("coarse_num", self.coarse_num),
            ("k", self.k as u64),
            ("rounds", self.rounds as u64),
            ("max_degree", self.max_degree as u64),
            ("shards", self.shards as u64),
            ("workers", self.workers as u64),
            ("memory_budget", self.memory_budget as u64),
            ("max_iters", self.max_iters as u64),
            ("entry_samples", self.entry_samples as u64),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::usage(format!("{key} must be at least 1")));
            }
        }
        Ok(())
    }

    pub fn engine(&self) -> EngineConfig {
        EngineConfig {
            workers: self.workers,
            memory_budget: self.memory_budget,
            ..EngineConfig::default()
        }
    }

    pub fn build_params(&self) -> BuildParams {
        BuildParams {
            k: self.k,
            coarse_num: self.coarse_num,
            entry_samples: self.entry_samples,
            seed: self.seed,
            group_budget: self.group_budget,
        }
    }

    pub fn propagation(&self) -> PropagationParams {
        PropagationParams {
            rounds: self.rounds,
            filter_enabled: self.filter,
        }
    }

    pub fn prune(&self) -> PruneParams {
        PruneParams {
            max_degree: self.max_degree,
            occlusion: self.occlusion,
        }
    }
}
