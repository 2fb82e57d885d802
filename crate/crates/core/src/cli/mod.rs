//! Command-line front end.

pub mod bench;
pub mod generate;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::ingest::{enqueue, run_workers, write_rate_csv, IngestConfig, RunOptions, SourceTables, WriterConfig};
use crate::kvstore::{ScanCost, Store, StoreConfig};
use crate::query::{run_strategy, BatchParams, HitRates, PlannerConfig, Query, QueryContext, ResultRow, Strategy};
use crate::schema::ShardConfig;
use bench::{Milestones, ResponsivenessRow};
use generate::{generate, GeneratorSpec, DEFAULT_START};

#[derive(Debug, Parser)]
#[command(name = "eventpipe", version, about = "Sharded event store: ingest, query and benchmarks")]
pub struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic web-proxy events as JSON lines.
    Generate(GenerateArgs),
    /// Create the event, index and aggregate tables for a source.
    Init(InitArgs),
    /// Ingest JSON-lines files with parallel workers.
    Ingest(IngestArgs),
    /// Run a query file under one strategy.
    Query(QueryArgs),
    /// Run the responsiveness and/or ingest-scaling benchmarks.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 100_000)]
    pub events: u64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output file, or directory when --files > 1.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub files: usize,
    #[arg(long, default_value_t = 1000)]
    pub domains: usize,
    #[arg(long, default_value_t = 1.2)]
    pub zipf: f64,
    /// First timestamp, epoch millis.
    #[arg(long, default_value_t = DEFAULT_START)]
    pub start: u64,
    #[arg(long, default_value_t = 3_600_000)]
    pub span_ms: u64,
    /// Non-timestamp fields per event.
    #[arg(long, default_value_t = 6)]
    pub fields: usize,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub shards: u32,
    #[arg(long, default_value = "webproxy")]
    pub source: String,
}

#[derive(Debug, Args, Clone)]
pub struct StoreArgs {
    /// Memtable size that triggers a flush, in bytes.
    #[arg(long, default_value_t = 4 << 20)]
    pub flush_threshold: usize,
    /// Frozen memtables allowed per tablet before writers block.
    #[arg(long, default_value_t = 4)]
    pub pending_flushes: usize,
    /// Flush capacity in bytes/sec shared by the store (0 = unlimited).
    #[arg(long, default_value_t = 0)]
    pub drain_rate: u64,
}

impl StoreArgs {
    fn config(&self) -> StoreConfig {
        StoreConfig {
            flush_threshold_bytes: self.flush_threshold,
            pending_flush_limit: self.pending_flushes,
            flush_drain_bytes_per_sec: (self.drain_rate > 0).then_some(self.drain_rate),
            ..StoreConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub workers: usize,
    /// Expected shard count; checked against the event table.
    #[arg(long)]
    pub shards: Option<u32>,
    #[arg(long, default_value = "webproxy")]
    pub source: String,
    /// Per-client send cap in bytes/sec (0 = unlimited).
    #[arg(long, default_value_t = 0)]
    pub client_rate: u64,
    /// Stop reading input after this many seconds.
    #[arg(long)]
    pub max_seconds: Option<f64>,
    /// Where to write the stats JSON (default: stdout).
    #[arg(long)]
    pub stats_out: Option<PathBuf>,
    /// Where to write the per-second rate CSV.
    #[arg(long)]
    pub rate_out: Option<PathBuf>,
    #[command(flatten)]
    pub store: StoreArgs,
    /// Files or directories of .jsonl files.
    #[arg(required = true)]
    pub paths: Vec<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct BatchArgs {
    /// Density ratio threshold for index intersection.
    #[arg(long = "w", default_value_t = 10.0)]
    pub w: f64,
    /// Batch growth factor.
    #[arg(long = "c", default_value_t = 1.5)]
    pub c: f64,
    /// Minimum target batch runtime, seconds.
    #[arg(long, default_value_t = 1.0)]
    pub tmin: f64,
    /// Maximum target batch runtime, seconds.
    #[arg(long, default_value_t = 30.0)]
    pub tmax: f64,
}

impl BatchArgs {
    fn params(&self) -> BatchParams {
        BatchParams {
            c: self.c,
            t_min: self.tmin,
            t_max: self.tmax,
            ..BatchParams::default()
        }
    }
}

#[derive(Debug, Args, Clone)]
pub struct CostArgs {
    /// Simulated read cost per examined entry, microseconds.
    #[arg(long)]
    pub entry_cost_us: Option<u64>,
    /// Simulated read cost per range opened, microseconds.
    #[arg(long)]
    pub seek_cost_us: Option<u64>,
    /// Entries per scan buffer released to the client.
    #[arg(long, default_value_t = 1000)]
    pub buffer_entries: usize,
}

impl CostArgs {
    fn cost(&self, default_us: u64) -> ScanCost {
        ScanCost {
            buffer_entries: self.buffer_entries,
            per_entry: Duration::from_micros(self.entry_cost_us.unwrap_or(default_us)),
            per_seek: Duration::from_micros(self.seek_cost_us.unwrap_or(default_us)),
        }
    }
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub data_dir: PathBuf,
    /// JSON query document.
    #[arg(long)]
    pub query: PathBuf,
    #[arg(long, default_value = "batched-index", value_parser = parse_strategy)]
    pub strategy: Strategy,
    #[command(flatten)]
    pub batch: BatchArgs,
    #[command(flatten)]
    pub cost: CostArgs,
    /// Result rows as JSON lines (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Append a responsiveness row to this CSV.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Label for the report row.
    #[arg(long, default_value = "q")]
    pub label: String,
    /// Per-table hit rates (default: <data-dir>/hitrates.json).
    #[arg(long)]
    pub stats_file: Option<PathBuf>,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BenchKind {
    Responsiveness,
    Ingest,
    All,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_enum, default_value_t = BenchKind::Responsiveness)]
    pub kind: BenchKind,
    /// Directory for reports.
    #[arg(long)]
    pub out: PathBuf,
    /// Scratch directory for corpora and stores (default: <out>/work).
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 100_000)]
    pub events: u64,
    #[arg(long, default_value_t = 20)]
    pub domains: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub shards: u32,
    /// Ingest clients for loading the responsiveness corpus.
    #[arg(long, default_value_t = 8)]
    pub workers: usize,
    #[arg(long, default_value_t = 3)]
    pub runs: usize,
    #[command(flatten)]
    pub batch: BatchArgs,
    #[command(flatten)]
    pub cost: CostArgs,
    /// Worker counts for the ingest-scaling sweep.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
    pub scaling_workers: Vec<usize>,
    /// Per-client send cap for the scaling sweep, bytes/sec.
    #[arg(long, default_value_t = 512 << 10)]
    pub client_rate: u64,
    /// Store flush capacity for the scaling sweep, bytes/sec.
    #[arg(long, default_value_t = 3 << 20)]
    pub drain_rate: u64,
    /// Seconds per scaling point.
    #[arg(long, default_value_t = 35)]
    pub duration: u64,
}

pub fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    run(cli.command)
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate(a) => cmd_generate(a),
        Command::Init(a) => cmd_init(a),
        Command::Ingest(a) => cmd_ingest(a),
        Command::Query(a) => cmd_query(a),
        Command::Bench(a) => cmd_bench(a),
    }
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let spec = GeneratorSpec {
        event_count: a.events,
        t_start: a.start,
        t_stop: a.start + a.span_ms.max(1) - 1,
        domains: a.domains,
        zipf_s: a.zipf,
        field_count: a.fields,
        seed: a.seed,
    };
    let stats = generate(&spec, &a.out, a.files)?;
    println!(
        "{}",
        serde_json::json!({"events": stats.events, "bytes": stats.bytes, "files": stats.files})
    );
    Ok(())
}

fn db_path(data_dir: &Path) -> PathBuf {
    data_dir.join("db")
}

fn cmd_init(a: InitArgs) -> Result<()> {
    let shards = ShardConfig::new(a.shards)?;
    let store = Store::open(db_path(&a.data_dir), StoreConfig::default())?;
    let t = SourceTables::create(&store, &a.source, shards)?;
    println!("{}", serde_json::json!({"event": t.event, "index": t.index, "aggregate": t.aggregate, "shards": a.shards}));
    Ok(())
}

fn shards_of(store: &Store, event_table: &str) -> Result<ShardConfig> {
    let t = store
        .table(event_table)
        .with_context(|| format!("table {event_table} missing; run `init` first"))?;
    Ok(ShardConfig::new(t.tablet_count() as u32)?)
}

fn expand_inputs(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "jsonl"))
                .collect();
            files.sort();
            out.extend(files);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn cmd_ingest(a: IngestArgs) -> Result<()> {
    let store = Store::open(db_path(&a.data_dir), a.store.config())?;
    let shards = shards_of(&store, &SourceTables::for_source(&a.source).event)?;
    if let Some(n) = a.shards {
        if n != shards.shard_count() as u32 {
            bail!("--shards {n} does not match the event table's {} shards", shards.shard_count());
        }
    }
    let jobs = expand_inputs(&a.paths)?
        .iter()
        .map(|p| enqueue(p, &a.source, a.workers))
        .collect::<Result<Vec<_>, _>>()?;
    let cfg = IngestConfig {
        shards,
        writer: WriterConfig {
            client_bytes_per_sec: (a.client_rate > 0).then_some(a.client_rate),
            ..WriterConfig::default()
        },
    };
    let opts = RunOptions {
        max_duration: a.max_seconds.map(Duration::from_secs_f64),
    };
    let report = run_workers(&store, jobs, a.workers, &cfg, opts)?;
    store.flush_all()?;
    let json = serde_json::to_string_pretty(&report.stats)?;
    match &a.stats_out {
        Some(p) => std::fs::write(p, json)?,
        None => println!("{json}"),
    }
    if let Some(p) = &a.rate_out {
        write_rate_csv(&report.series, BufWriter::new(File::create(p)?))?;
    }
    Ok(())
}

fn cmd_query(a: QueryArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.query).with_context(|| format!("reading {}", a.query.display()))?;
    let query = Query::from_json(&text)?;
    let cfg = StoreConfig {
        scan_cost: a.cost.cost(0),
        ..StoreConfig::default()
    };
    let store = Store::open(db_path(&a.data_dir), cfg)?;
    let shards = shards_of(&store, &query.table)?;
    let ctx = QueryContext::new(&store, &query.table, shards)?.with_planner(PlannerConfig {
        w: a.batch.w,
        indexed_fields: None,
    });
    let stats_path = a.stats_file.clone().unwrap_or_else(|| a.data_dir.join("hitrates.json"));
    let mut rates = HitRates::load(&stats_path)?;
    let params = a.batch.params();
    let b0 = rates.initial_batch_ms(&query.table, params.k0);

    let mut out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    let mut m = Milestones::default();
    let t0 = Instant::now();
    let outcome = run_strategy(&ctx, &query, a.strategy, params, b0, &mut |r: ResultRow| {
        m.rows += 1;
        let at = Some(t0.elapsed().as_secs_f64());
        match m.rows {
            1 => m.first_s = at,
            100 => m.r100_s = at,
            1000 => m.r1000_s = at,
            _ => {}
        }
        serde_json::to_writer(&mut out, &r.to_json()).map_err(io::Error::from)?;
        out.write_all(b"\n")?;
        Ok(())
    })?;
    m.total_s = t0.elapsed().as_secs_f64();
    out.flush()?;
    drop(out);

    rates.observe(&query.table, m.rows, query.t_start, query.t_stop);
    rates.save(&stats_path)?;
    let row = ResponsivenessRow {
        query: a.label.clone(),
        domain: String::new(),
        strategy: a.strategy,
        mode: outcome.mode,
        batches: outcome.batches.batches,
        milestones: m,
        per_batch: outcome.batches.per_batch,
    };
    match &a.report {
        Some(p) => {
            let fresh = !p.exists();
            let mut buf = Vec::new();
            bench::write_report_csv(std::slice::from_ref(&row), &mut buf)?;
            let text = String::from_utf8(buf)?;
            let body = if fresh { text.as_str() } else { text.split_once('\n').map_or("", |x| x.1) };
            std::fs::OpenOptions::new().create(true).append(true).open(p)?.write_all(body.as_bytes())?;
        }
        None => {
            let mut buf = Vec::new();
            bench::write_report_csv(std::slice::from_ref(&row), &mut buf)?;
            eprint!("{}", String::from_utf8(buf)?);
        }
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out)?;
    let work = a.data_dir.clone().unwrap_or_else(|| a.out.join("work"));
    let shards = ShardConfig::new(a.shards)?;
    if matches!(a.kind, BenchKind::Responsiveness | BenchKind::All) {
        let cfg = bench::ResponsivenessConfig {
            gen: GeneratorSpec {
                event_count: a.events,
                domains: a.domains,
                seed: a.seed,
                ..GeneratorSpec::default()
            },
            workers: a.workers,
            shards,
            w: a.batch.w,
            params: a.batch.params(),
            scan_cost: a.cost.cost(20),
            runs: a.runs,
            ..bench::ResponsivenessConfig::default()
        };
        let dir = work.join("responsiveness");
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        let report = bench::run_responsiveness(&cfg, &dir)?;
        bench::write_report_csv(&report.median_rows(), BufWriter::new(File::create(a.out.join("responsiveness.csv"))?))?;
        std::fs::write(a.out.join("responsiveness.json"), serde_json::to_string_pretty(&report)?)?;
        bench::write_report_csv(&report.median_rows(), io::stdout().lock())?;
        if !report.equivalent {
            bail!("strategies returned different result sets");
        }
    }
    if matches!(a.kind, BenchKind::Ingest | BenchKind::All) {
        let cfg = bench::IngestScalingConfig {
            worker_counts: a.scaling_workers.clone(),
            client_bytes_per_sec: a.client_rate,
            drain_bytes_per_sec: a.drain_rate,
            duration: Duration::from_secs(a.duration),
            shards,
            seed: a.seed,
            ..bench::IngestScalingConfig::default()
        };
        let dir = work.join("ingest");
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        let points = bench::run_ingest_scaling(&cfg, &dir)?;
        bench::write_scaling_csv(&points, BufWriter::new(File::create(a.out.join("ingest_scaling.csv"))?))?;
        bench::write_scaling_series(&points, &a.out)?;
        bench::write_scaling_csv(&points, io::stdout().lock())?;
    }
    Ok(())
}
