//! Benchmark harnesses: query responsiveness under the four strategies and
//! ingest rate as a function of client count.

use std::collections::BTreeMap;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{ensure, Context, Result};
use serde::Serialize;

use super::generate::{generate, GenerateStats, GeneratorSpec};
use crate::ingest::{
    enqueue, partition_for, run_workers, steady_state, write_rate_csv, IngestConfig, RateSample, RunOptions,
    SourceTables, WriterConfig,
};
use crate::kvstore::{ScanCost, Store, StoreConfig};
use crate::query::{
    run_strategy, BatchParams, BatchRecord, FilterTree, HitRates, PlanMode, PlannerConfig, Query, QueryContext, ResultRow,
    Strategy,
};
use crate::schema::ShardConfig;

pub const SOURCE: &str = "webproxy";
pub const REPORT_HEADER: &str = "query,strategy,first_s,r100_s,r1000_s,total_s";

/// Latency milestones of one query execution, in seconds from submission.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Milestones {
    pub first_s: Option<f64>,
    pub r100_s: Option<f64>,
    pub r1000_s: Option<f64>,
    pub total_s: f64,
    pub rows: u64,
}

impl Milestones {
    /// Milestones that were reached never decrease.
    pub fn is_monotone(&self) -> bool {
        let reached: Vec<f64> = [self.first_s, self.r100_s, self.r1000_s]
            .into_iter()
            .flatten()
            .chain([self.total_s])
            .collect();
        reached.windows(2).all(|w| w[0] <= w[1])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResponsivenessRow {
    pub query: String,
    pub domain: String,
    pub strategy: Strategy,
    pub mode: PlanMode,
    pub batches: usize,
    pub milestones: Milestones,
    pub per_batch: Vec<BatchRecord>,
}

fn secs(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

pub fn write_report_csv(rows: &[ResponsivenessRow], mut w: impl Write) -> io::Result<()> {
    writeln!(w, "{REPORT_HEADER}")?;
    for r in rows {
        let m = &r.milestones;
        writeln!(
            w,
            "{},{},{},{},{},{:.6}",
            r.query,
            r.strategy,
            secs(m.first_s),
            secs(m.r100_s),
            secs(m.r1000_s),
            m.total_s
        )?;
    }
    Ok(())
}

/// Runs `query` with `strategy`, timing the 1st, 100th and 1000th rows.
/// Returns the milestones and the sorted event rows produced.
pub fn measure(
    ctx: &QueryContext<'_>,
    query: &Query,
    strategy: Strategy,
    params: BatchParams,
    b0: u64,
) -> Result<(Milestones, PlanMode, Vec<BatchRecord>, Vec<ResultRow>)> {
    let mut m = Milestones::default();
    let mut rows = Vec::new();
    let t0 = Instant::now();
    let outcome = run_strategy(ctx, query, strategy, params, b0, &mut |r: ResultRow| {
        let at = Some(t0.elapsed().as_secs_f64());
        rows.push(r);
        match rows.len() {
            1 => m.first_s = at,
            100 => m.r100_s = at,
            1000 => m.r1000_s = at,
            _ => {}
        }
        Ok(())
    })?;
    m.total_s = t0.elapsed().as_secs_f64();
    m.rows = rows.len() as u64;
    rows.sort();
    Ok((m, outcome.mode, outcome.batches.per_batch, rows))
}

#[derive(Clone, Debug)]
pub struct ResponsivenessConfig {
    pub gen: GeneratorSpec,
    pub files: usize,
    pub workers: usize,
    pub shards: ShardConfig,
    pub w: f64,
    pub params: BatchParams,
    pub scan_cost: ScanCost,
    pub runs: usize,
}

impl Default for ResponsivenessConfig {
    fn default() -> Self {
        Self {
            gen: GeneratorSpec {
                // a small vocabulary keeps the rarest domain near a thousand events
                domains: 20,
                ..GeneratorSpec::default()
            },
            files: 8,
            workers: 8,
            shards: ShardConfig::default(),
            w: 10.0,
            params: BatchParams::default(),
            scan_cost: ScanCost {
                buffer_entries: 1000,
                per_entry: Duration::from_micros(20),
                per_seek: Duration::from_micros(20),
            },
            runs: 3,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchQuery {
    pub label: String,
    pub domain: String,
    pub generated_rows: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ResponsivenessReport {
    pub queries: Vec<BenchQuery>,
    pub hit_rate: f64,
    pub initial_batch_ms: u64,
    /// One entry per run, each with a row per (query, strategy).
    pub runs: Vec<Vec<ResponsivenessRow>>,
    /// Every strategy returned the same rows for each query in every run.
    pub equivalent: bool,
}

impl ResponsivenessReport {
    /// Per (query, strategy) medians across runs.
    pub fn median_rows(&self) -> Vec<ResponsivenessRow> {
        let Some(first) = self.runs.first() else {
            return Vec::new();
        };
        let median = |mut v: Vec<f64>| -> Option<f64> {
            if v.is_empty() {
                return None;
            }
            v.sort_by(f64::total_cmp);
            Some(v[v.len() / 2])
        };
        first
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let all: Vec<&Milestones> = self.runs.iter().map(|r| &r[i].milestones).collect();
                let pick = |f: fn(&Milestones) -> Option<f64>| {
                    let v: Vec<f64> = all.iter().filter_map(|m| f(m)).collect();
                    if v.len() == all.len() {
                        median(v)
                    } else {
                        None
                    }
                };
                ResponsivenessRow {
                    milestones: Milestones {
                        first_s: pick(|m| m.first_s),
                        r100_s: pick(|m| m.r100_s),
                        r1000_s: pick(|m| m.r1000_s),
                        total_s: pick(|m| Some(m.total_s)).unwrap_or(0.0),
                        rows: row.milestones.rows,
                    },
                    ..row.clone()
                }
            })
            .collect()
    }
}

/// Generates a corpus under `dir`, ingests it with `workers` clients and
/// returns the open store.
pub fn build_corpus(
    dir: &Path,
    gen: &GeneratorSpec,
    files: usize,
    workers: usize,
    shards: ShardConfig,
    store_cfg: StoreConfig,
) -> Result<(Store, GenerateStats)> {
    let corpus = dir.join("corpus");
    let stats = generate(gen, &corpus, files.max(2)).context("generating corpus")?;
    let store = Store::open(dir.join("db"), store_cfg)?;
    SourceTables::create(&store, SOURCE, shards)?;
    let jobs = stats
        .files
        .iter()
        .map(|p| enqueue(p, SOURCE, workers))
        .collect::<Result<Vec<_>, _>>()?;
    let cfg = IngestConfig {
        shards,
        writer: WriterConfig::default(),
    };
    let report = run_workers(&store, jobs, workers, &cfg, RunOptions::default())?;
    ensure!(report.stats.failed_files.is_empty(), "ingest failures: {:?}", report.stats.failed_files);
    store.flush_all()?;
    Ok((store, stats))
}

/// Picks the most popular, median and least popular domains that occur.
pub fn stratum_queries(stats: &GenerateStats, gen: &GeneratorSpec) -> Vec<(BenchQuery, Query)> {
    let ranked = stats.ranked_domains();
    if ranked.is_empty() {
        return Vec::new();
    }
    let picks = [("A", 0), ("B", ranked.len() / 2), ("C", ranked.len() - 1)];
    picks
        .into_iter()
        .map(|(label, i)| {
            let (domain, n) = ranked[i].clone();
            let q = Query::new(format!("event_{SOURCE}"), gen.t_start, gen.t_stop)
                .with_filter(FilterTree::eq("domain", domain.clone()));
            (
                BenchQuery {
                    label: label.to_string(),
                    domain,
                    generated_rows: n,
                },
                q,
            )
        })
        .collect()
}

/// The three-stratum query matrix. A warm-up pass records the table's hit
/// rate, which then fixes the first batch size for every measured run.
pub fn run_responsiveness(cfg: &ResponsivenessConfig, dir: &Path) -> Result<ResponsivenessReport> {
    let store_cfg = StoreConfig {
        scan_cost: cfg.scan_cost,
        ..StoreConfig::unthrottled()
    };
    let (store, stats) = build_corpus(dir, &cfg.gen, cfg.files, cfg.workers, cfg.shards, store_cfg)?;
    let queries = stratum_queries(&stats, &cfg.gen);
    ensure!(!queries.is_empty(), "corpus has no events");
    let table = format!("event_{SOURCE}");
    let ctx = QueryContext::new(&store, &table, cfg.shards)?.with_planner(PlannerConfig {
        w: cfg.w,
        indexed_fields: None,
    });

    let mut rates = HitRates::default();
    for (_, q) in &queries {
        let b0 = rates.initial_batch_ms(&table, cfg.params.k0);
        let (m, ..) = measure(&ctx, q, Strategy::BatchedIndex, cfg.params, b0)?;
        rates.observe(&table, m.rows, q.t_start, q.t_stop);
    }
    let b0 = rates.initial_batch_ms(&table, cfg.params.k0);

    let mut runs = Vec::new();
    let mut equivalent = true;
    let mut reference: BTreeMap<String, Vec<ResultRow>> = BTreeMap::new();
    for run in 0..cfg.runs.max(1) {
        let mut rows = Vec::new();
        for (bq, q) in &queries {
            for strategy in Strategy::ALL {
                let (m, mode, per_batch, result) = measure(&ctx, q, strategy, cfg.params, b0)?;
                let batches = per_batch.len();
                log::info!(
                    "run {run} query {} {strategy}: {} rows, first {:?}s, total {:.3}s, {batches} batches",
                    bq.label,
                    m.rows,
                    m.first_s,
                    m.total_s
                );
                match reference.get(&bq.label) {
                    Some(expected) if *expected != result => equivalent = false,
                    Some(_) => {}
                    None => {
                        if result.len() as u64 != bq.generated_rows {
                            equivalent = false;
                        }
                        reference.insert(bq.label.clone(), result);
                    }
                }
                rows.push(ResponsivenessRow {
                    query: bq.label.clone(),
                    domain: bq.domain.clone(),
                    strategy,
                    mode,
                    batches,
                    milestones: m,
                    per_batch,
                });
            }
        }
        runs.push(rows);
    }
    Ok(ResponsivenessReport {
        queries: queries.into_iter().map(|(b, _)| b).collect(),
        hit_rate: rates.get(&table).unwrap_or(0.0),
        initial_batch_ms: b0,
        runs,
        equivalent,
    })
}

#[derive(Clone, Debug)]
pub struct IngestScalingConfig {
    pub worker_counts: Vec<usize>,
    /// Send-rate cap of each client, in entry bytes per second.
    pub client_bytes_per_sec: u64,
    /// Flush capacity shared by the whole store.
    pub drain_bytes_per_sec: u64,
    pub flush_threshold_bytes: usize,
    pub pending_flush_limit: usize,
    pub writer_max_entries: usize,
    pub duration: Duration,
    pub warmup_secs: usize,
    pub shards: ShardConfig,
    pub events_per_file: u64,
    pub seed: u64,
}

impl Default for IngestScalingConfig {
    fn default() -> Self {
        Self {
            worker_counts: vec![1, 2, 4, 8, 16],
            client_bytes_per_sec: 512 << 10,
            drain_bytes_per_sec: 3 << 20,
            flush_threshold_bytes: 1 << 20,
            pending_flush_limit: 1,
            writer_max_entries: 1000,
            duration: Duration::from_secs(35),
            warmup_secs: 5,
            shards: ShardConfig::default(),
            events_per_file: 40_000,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ScalingPoint {
    pub workers: usize,
    pub mean_entries_per_sec: f64,
    pub variance: f64,
    pub mean_bytes_per_sec: f64,
    pub blocked_millis: u64,
    pub series: Vec<RateSample>,
}

/// Names `n` links to `pool` files so that each queue partition of `n`
/// workers receives exactly one file.
fn one_file_per_partition(pool: &[PathBuf], dir: &Path, n: usize) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut slots: Vec<Option<PathBuf>> = vec![None; n];
    let mut j = 0u64;
    while slots.iter().any(Option::is_none) {
        let candidate = dir.join(format!("batch-{j}.jsonl"));
        let p = partition_for(&candidate, n);
        if slots[p].is_none() {
            let src = &pool[p % pool.len()];
            if std::fs::hard_link(src, &candidate).is_err() {
                std::fs::copy(src, &candidate)?;
            }
            slots[p] = Some(candidate);
        }
        j += 1;
    }
    Ok(slots.into_iter().flatten().collect())
}

/// Measures the steady ingest rate for each worker count against a store
/// with a fixed flush capacity.
pub fn run_ingest_scaling(cfg: &IngestScalingConfig, dir: &Path) -> Result<Vec<ScalingPoint>> {
    let max_workers = cfg.worker_counts.iter().copied().max().unwrap_or(1);
    let gen = GeneratorSpec {
        event_count: cfg.events_per_file * max_workers as u64,
        seed: cfg.seed,
        ..GeneratorSpec::default()
    };
    let pool = generate(&gen, &dir.join("pool"), max_workers.max(2))?.files;
    let mut points = Vec::new();
    for &n in &cfg.worker_counts {
        let run_dir = dir.join(format!("w{n}"));
        let files = one_file_per_partition(&pool, &run_dir.join("in"), n)?;
        let store_cfg = StoreConfig {
            flush_threshold_bytes: cfg.flush_threshold_bytes,
            pending_flush_limit: cfg.pending_flush_limit,
            flush_drain_bytes_per_sec: Some(cfg.drain_bytes_per_sec),
            flush_threads: 1,
            ..StoreConfig::default()
        };
        let store = Store::open(run_dir.join("db"), store_cfg)?;
        SourceTables::create(&store, SOURCE, cfg.shards)?;
        let jobs = files
            .iter()
            .map(|p| enqueue(p, SOURCE, n))
            .collect::<Result<Vec<_>, _>>()?;
        let ingest_cfg = IngestConfig {
            shards: cfg.shards,
            writer: WriterConfig {
                max_entries: cfg.writer_max_entries,
                client_bytes_per_sec: Some(cfg.client_bytes_per_sec),
                ..WriterConfig::default()
            },
        };
        let report = run_workers(
            &store,
            jobs,
            n,
            &ingest_cfg,
            RunOptions {
                max_duration: Some(cfg.duration),
            },
        )?;
        drop(store);
        // samples after the stop flag carry the end-of-file aggregate flush
        let live = &report.series[..report.series.len().min(cfg.duration.as_secs() as usize)];
        let (mean, variance) = steady_state(live, cfg.warmup_secs);
        let count = live.len().saturating_sub(cfg.warmup_secs + 1).max(1);
        let mean_bytes = live
            .iter()
            .skip(cfg.warmup_secs)
            .take(count)
            .map(|s| s.bytes_per_sec)
            .sum::<f64>()
            / count as f64;
        log::info!("{n} workers: mean {mean:.0} entries/s, variance {variance:.3e}");
        points.push(ScalingPoint {
            workers: n,
            mean_entries_per_sec: mean,
            variance,
            mean_bytes_per_sec: mean_bytes,
            blocked_millis: report.stats.blocked_millis,
            series: report.series,
        });
        std::fs::remove_dir_all(&run_dir).ok();
    }
    Ok(points)
}

pub fn write_scaling_csv(points: &[ScalingPoint], mut w: impl Write) -> io::Result<()> {
    writeln!(w, "workers,mean_entries_per_sec,variance,mean_bytes_per_sec,blocked_ms")?;
    for p in points {
        writeln!(
            w,
            "{},{:.1},{:.1},{:.1},{}",
            p.workers, p.mean_entries_per_sec, p.variance, p.mean_bytes_per_sec, p.blocked_millis
        )?;
    }
    Ok(())
}

pub fn write_scaling_series(points: &[ScalingPoint], dir: &Path) -> io::Result<()> {
    for p in points {
        let f = std::fs::File::create(dir.join(format!("rates_w{}.csv", p.workers)))?;
        write_rate_csv(&p.series, io::BufWriter::new(f))?;
    }
    Ok(())
}
