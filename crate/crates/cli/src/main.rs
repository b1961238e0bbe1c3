//! `bdg`: build and query binary k-NN graph indexes.

use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use bdg_core::binarizer::HyperplaneCoder;
use bdg_core::bitcore::io::{read_codes, read_dataset, read_reals, read_reals_csv, write_dataset};
use bdg_core::bitcore::Dataset;
use bdg_core::bkmeans::{default_sample_size, downsample, train};
use bdg_core::config::BuildConfig;
use bdg_core::eval::{brute_force_topn, run_queries, sweep, SweepConfig};
use bdg_core::pipeline::Engine;
use bdg_core::reference::{generate, ReferenceConfig};
use bdg_core::search::{Metric, SearchParams};
use bdg_core::shard::{build_index, write_index, ShardManifest, ShardSet};
use bdg_core::{Error, Result};
use clap::{Args, Parser, Subcommand};
use tracing::info;

#[derive(Parser)]
#[command(name = "bdg", version, about = "Binary-code k-NN graph index", args_override_self = true)]
struct Cli {
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat `key = value` build configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic base and query set.
    GenReference(GenReference),
    /// Encode real vectors into binary codes.
    Binarize(Binarize),
    /// Train binary k-means centers on a code file.
    Cluster(Cluster),
    /// Build an index directory.
    Build(Build),
    /// Query an index; writes one CSV row per result.
    Search(Search),
    /// Recall and timing sweep; writes the report CSV.
    Eval(Eval),
}

#[derive(Args)]
struct GenReference {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 1_000)]
    queries: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 64)]
    components: usize,
    #[arg(long, default_value_t = 128)]
    bits: usize,
    #[arg(long, default_value_t = 0.75)]
    spread: f64,
}

#[derive(Args)]
struct Binarize {
    /// Real vectors: `.bdr` or `.csv` (`label,v1,...,vD`).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write the real vectors next to the codes (`.bdr`).
    #[arg(long)]
    reals_out: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    bits: usize,
    /// Reuse a fitted coder instead of fitting one.
    #[arg(long)]
    coder: Option<PathBuf>,
    /// Where to save the fitted coder.
    #[arg(long)]
    coder_out: Option<PathBuf>,
}

#[derive(Args)]
struct Cluster {
    #[arg(long)]
    codes: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    sample_size: Option<usize>,
}

#[derive(Args)]
struct Build {
    #[arg(long)]
    codes: PathBuf,
    #[arg(long)]
    reals: Option<PathBuf>,
    /// Index directory to create; must not exist.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    coarse_num: Option<u64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    no_propagation_filter: bool,
    #[arg(long)]
    max_degree: Option<usize>,
    #[arg(long)]
    no_occlusion: bool,
    #[arg(long)]
    shards: Option<usize>,
    #[arg(long)]
    entry_samples: Option<usize>,
    #[arg(long)]
    memory_budget: Option<usize>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    sample_size: Option<usize>,
}

#[derive(Args)]
struct IndexArgs {
    /// Index directory.
    #[arg(long, required_unless_present = "manifest")]
    index: Option<PathBuf>,
    /// Manifest file inside an index directory.
    #[arg(long, conflicts_with = "index")]
    manifest: Option<PathBuf>,
    /// Re-hash index files against the manifest before loading.
    #[arg(long)]
    verify: bool,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    query_reals: Option<PathBuf>,
    #[arg(long)]
    rerank: bool,
    /// Entry samples compared per query (default: all stored).
    #[arg(long)]
    entry_samples: Option<usize>,
    /// Output CSV (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Search {
    #[command(flatten)]
    index: IndexArgs,
    #[arg(long, default_value_t = 512)]
    ef: usize,
    #[arg(long, default_value_t = 60)]
    topn: usize,
}

#[derive(Args)]
struct Eval {
    #[command(flatten)]
    index: IndexArgs,
    #[arg(long, value_delimiter = ',', default_value = "64,128,256,512,1024")]
    ef: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "60")]
    topn: Vec<usize>,
    /// Ground-truth metric: hamming or l2.
    #[arg(long, default_value = "hamming")]
    metric: String,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) => 2,
        Error::Format(_) | Error::Manifest(_) | Error::Index(_) => 3,
        Error::Pipeline(_) => 4,
        Error::Io(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(io::stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn base_config(cli: &Cli) -> Result<BuildConfig> {
    let mut config = match &cli.config {
        Some(p) => BuildConfig::from_text(
            &fs::read_to_string(p).map_err(|e| Error::usage(format!("{}: {e}", p.display())))?,
        )?,
        None => BuildConfig::default(),
    };
    if let Some(w) = cli.workers {
        config.workers = w;
    }
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    let mut config = base_config(&cli)?;
    match cli.command {
        Command::GenReference(a) => gen_reference(a, &config),
        Command::Binarize(a) => binarize(a, &config),
        Command::Cluster(a) => {
            set_opt(&mut config, "m", a.m)?;
            set_opt(&mut config, "max_iters", a.max_iters)?;
            set_opt(&mut config, "sample_size", a.sample_size)?;
            cluster(a, &config)
        }
        Command::Build(a) => {
            set_opt(&mut config, "m", a.m)?;
            set_opt(&mut config, "coarse_num", a.coarse_num)?;
            set_opt(&mut config, "k", a.k)?;
            set_opt(&mut config, "rounds", a.rounds)?;
            set_opt(&mut config, "max_degree", a.max_degree)?;
            set_opt(&mut config, "shards", a.shards)?;
            set_opt(&mut config, "entry_samples", a.entry_samples)?;
            set_opt(&mut config, "memory_budget", a.memory_budget)?;
            set_opt(&mut config, "max_iters", a.max_iters)?;
            set_opt(&mut config, "sample_size", a.sample_size)?;
            if a.no_propagation_filter {
                config.filter = false;
            }
            if a.no_occlusion {
                config.occlusion = false;
            }
            build(a, &config)
        }
        Command::Search(a) => search(a, &config),
        Command::Eval(a) => eval(a, &config),
    }
}

fn set_opt<T: ToString>(config: &mut BuildConfig, key: &str, v: Option<T>) -> Result<()> {
    match v {
        Some(v) => config.set(key, &v.to_string()),
        None => Ok(()),
    }
}

fn engine(config: &BuildConfig) -> Result<Engine> {
    if config.workers == 0 {
        return Err(Error::usage("workers must be at least 1"));
    }
    Engine::new(config.engine())
}

fn gen_reference(a: GenReference, config: &BuildConfig) -> Result<()> {
    let rc = ReferenceConfig {
        n: a.n,
        queries: a.queries,
        dim: a.dim,
        components: a.components,
        d_bits: a.bits,
        spread: a.spread,
        seed: config.seed,
        ..ReferenceConfig::default()
    };
    let set = engine(config)?.install(|| generate(&rc))?;
    fs::create_dir_all(&a.out)?;
    write_dataset(&set.base, &a.out.join("base.bdg"), Some(&a.out.join("base.bdr")))?;
    write_dataset(
        &set.queries,
        &a.out.join("queries.bdg"),
        Some(&a.out.join("queries.bdr")),
    )?;
    set.coder.write(&a.out.join("coder.bdc"))?;
    let desc = format!(
        "n = {}\nqueries = {}\ndim = {}\ncomponents = {}\nbits = {}\ncenter_scale = {}\nspread = {}\nseed = {}\n",
        rc.n, rc.queries, rc.dim, rc.components, rc.d_bits, rc.center_scale, rc.spread, rc.seed
    );
    fs::write(a.out.join("reference.txt"), desc)?;
    info!(out = %a.out.display(), n = rc.n, queries = rc.queries, "reference set written");
    Ok(())
}

fn binarize(a: Binarize, config: &BuildConfig) -> Result<()> {
    let table = if a.input.extension().is_some_and(|e| e == "csv") {
        read_reals_csv(&a.input)?
    } else {
        read_reals(&a.input)?
    };
    let coder = match &a.coder {
        Some(p) => HyperplaneCoder::read(p)?,
        None => HyperplaneCoder::fit_table(&table, a.bits, config.seed)?,
    };
    let data = engine(config)?.install(|| coder.encode_table(&table))?;
    write_dataset(&data, &a.out, a.reals_out.as_deref())?;
    if let Some(p) = &a.coder_out {
        coder.write(p)?;
    }
    info!(points = data.len(), bits = data.d_bits(), "codes written");
    Ok(())
}

fn cluster(a: Cluster, config: &BuildConfig) -> Result<()> {
    config.validate()?;
    let data = read_codes(&a.codes)?;
    let size = match config.sample_size {
        0 => default_sample_size(data.len(), config.m),
        s => s.min(data.len()),
    };
    let t = Instant::now();
    let training = engine(config)?.install(|| {
        let sample = downsample(&data, size, config.seed)?;
        train(&sample, config.m, config.max_iters, config.seed)
    })?;
    training.centers.write(&a.out)?;
    info!(
        secs = t.elapsed().as_secs_f64(),
        iterations = training.iterations,
        converged = training.converged,
        "centers written"
    );
    let mut out = io::stdout().lock();
    writeln!(out, "iteration,objective")?;
    for (i, o) in training.objectives.iter().enumerate() {
        writeln!(out, "{i},{o}")?;
    }
    Ok(())
}

fn build(a: Build, config: &BuildConfig) -> Result<()> {
    config.validate()?;
    if a.out.exists() {
        return Err(Error::usage(format!("{} already exists", a.out.display())));
    }
    let data = read_dataset(&a.codes, a.reals.as_deref())?;
    let engine = engine(config)?;
    let t = Instant::now();
    let built = build_index(&engine, &data, config)?;
    let manifest = write_index(&built, config, &a.out)?;
    info!(
        secs = t.elapsed().as_secs_f64(),
        cluster_secs = built.cluster_time.as_secs_f64(),
        shards = manifest.shards.len(),
        out = %a.out.display(),
        "index built"
    );
    Ok(())
}

fn load_index(a: &IndexArgs) -> Result<ShardSet> {
    let path = a
        .manifest
        .as_ref()
        .or(a.index.as_ref())
        .ok_or_else(|| Error::usage("--index or --manifest is required"))?;
    let manifest = ShardManifest::read(path)?;
    ShardSet::load(&manifest, a.verify)
}

fn load_queries(a: &IndexArgs) -> Result<Dataset> {
    let q = read_dataset(&a.queries, a.query_reals.as_deref())?;
    if a.rerank && q.reals().is_none() {
        return Err(Error::usage("--rerank needs --query-reals"));
    }
    Ok(q)
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(io::BufWriter::new(fs::File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn search(a: Search, config: &BuildConfig) -> Result<()> {
    let params = SearchParams {
        ef: a.ef,
        topn: a.topn,
        entry_samples: a.index.entry_samples,
        rerank: a.index.rerank,
        seed: config.seed,
    };
    params.validate()?;
    let set = load_index(&a.index)?;
    let queries = load_queries(&a.index)?;
    let outcomes = engine(config)?.install(|| run_queries(&set, &queries, &params))?;
    let mut out = output(&a.index.out)?;
    writeln!(
        out,
        "query_label,rank,result_label,distance,hamming_evals_long,hamming_evals_short,l2_evals"
    )?;
    for (q, o) in outcomes.iter().enumerate() {
        for (rank, hit) in o.result.hits.iter().enumerate() {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                queries.label(q),
                rank + 1,
                hit.label,
                hit.distance,
                o.stats.hamming_long,
                o.stats.hamming_short,
                o.stats.l2
            )?;
        }
    }
    out.flush()?;
    Ok(())
}

fn eval(a: Eval, config: &BuildConfig) -> Result<()> {
    let metric: Metric = a.metric.parse()?;
    let set = load_index(&a.index)?;
    let queries = load_queries(&a.index)?;
    let engine = engine(config)?;
    let base = union(&set)?;
    let topn = a.topn.iter().copied().max().unwrap_or(60);
    let truth = engine.install(|| brute_force_topn(&queries, &base, metric, topn))?;
    let sc = SweepConfig {
        efs: a.ef.clone(),
        topns: a.topn.clone(),
        rerank: a.index.rerank,
        metric,
        entry_samples: a.index.entry_samples,
        seed: config.seed,
    };
    let report = engine.install(|| sweep(&set, &queries, &truth, &sc))?;
    if report.rows.is_empty() {
        return Err(Error::usage("no (ef, topn) pair with topn <= ef"));
    }
    report.write_csv(output(&a.index.out)?)
}

/// All shard points as one dataset, for exact ground truth.
fn union(set: &ShardSet) -> Result<Dataset> {
    let shards = set.shards();
    if shards.len() == 1 {
        return Ok(shards[0].data().clone());
    }
    let first = shards[0].data();
    let mut labels = Vec::new();
    let mut words = Vec::new();
    for s in shards {
        labels.extend_from_slice(s.data().labels());
        words.extend_from_slice(s.data().words());
    }
    let data = Dataset::new(first.d_bits(), labels.clone(), words)?;
    match shards.iter().map(|s| s.data().reals()).collect::<Option<Vec<_>>>() {
        Some(tables) => {
            let dim = tables[0].dim();
            let values = tables.iter().flat_map(|t| t.values().iter().copied()).collect();
            data.with_reals(bdg_core::RealTable::new(dim, labels, values)?)
        }
        None => Ok(data),
    }
}
