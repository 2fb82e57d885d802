//! Master/worker ingest: files are hashed onto queue partitions, each worker
//! drains one partition, parses JSON lines, pre-aggregates counts per file and
//! writes event, index and aggregate entries through buffered writers.

use std::collections::{HashMap, VecDeque};
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::time::{Duration, Instant};

use bytes::Bytes;
use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use crate::kvstore::{Combiner, Entry, KvError, Store, TableHandle};
use crate::schema::{self, EventRecord, ShardConfig, Timestamp, TOTAL_FIELD};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("worker count must be at least 1")]
    NoWorkers,
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("parse error: {0}")]
pub struct ParseError(pub String);

/// Names of the three tables backing one source type.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceTables {
    pub event: String,
    pub index: String,
    pub aggregate: String,
}

impl SourceTables {
    pub fn for_source(source_type: &str) -> Self {
        Self {
            event: format!("event_{source_type}"),
            index: format!("index_{source_type}"),
            aggregate: format!("agg_{source_type}"),
        }
    }

    /// Creates whichever of the three tables are missing. Event and index
    /// tables get one tablet per shard; the aggregate table is a single
    /// summing tablet.
    pub fn create(store: &Store, source_type: &str, shards: ShardConfig) -> Result<Self, KvError> {
        let t = Self::for_source(source_type);
        for (name, splits, combiner) in [
            (&t.event, shards.split_points(), Combiner::None),
            (&t.index, shards.split_points(), Combiner::None),
            (&t.aggregate, Vec::new(), Combiner::Sum),
        ] {
            match store.create_table(name, splits, combiner) {
                Ok(_) | Err(KvError::DuplicateTable(_)) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(t)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IngestJob {
    pub path: PathBuf,
    pub source_type: String,
    pub queue_partition: usize,
}

pub fn partition_for(path: &Path, worker_count: usize) -> usize {
    let h = twox_hash::XxHash64::oneshot(0, path.to_string_lossy().as_bytes());
    (h % worker_count.max(1) as u64) as usize
}

pub fn enqueue(path: impl AsRef<Path>, source_type: &str, worker_count: usize) -> Result<IngestJob, IngestError> {
    let path = path.as_ref();
    if worker_count == 0 {
        return Err(IngestError::NoWorkers);
    }
    if !path.is_file() {
        return Err(IngestError::FileNotFound(path.to_path_buf()));
    }
    Ok(IngestJob {
        path: path.to_path_buf(),
        source_type: source_type.to_string(),
        queue_partition: partition_for(path, worker_count),
    })
}

/// Jobs grouped by partition; each partition is drained by exactly one worker.
#[derive(Debug, Default)]
pub struct IngestQueue {
    partitions: Vec<VecDeque<IngestJob>>,
}

impl IngestQueue {
    pub fn new(worker_count: usize) -> Self {
        Self {
            partitions: vec![VecDeque::new(); worker_count.max(1)],
        }
    }

    pub fn push(&mut self, job: IngestJob) {
        let p = job.queue_partition % self.partitions.len();
        self.partitions[p].push_back(job);
    }

    pub fn partition_sizes(&self) -> Vec<usize> {
        self.partitions.iter().map(VecDeque::len).collect()
    }

    pub fn into_partitions(self) -> Vec<VecDeque<IngestJob>> {
        self.partitions
    }
}

/// Parses one JSON object with an integer `ts` (millis). Other scalar
/// values are kept as strings; `null` fields are dropped.
pub fn parse_line(line: &[u8]) -> Result<EventRecord, ParseError> {
    let obj: serde_json::Map<String, Value> =
        serde_json::from_slice(line).map_err(|e| ParseError(e.to_string()))?;
    let ts = obj
        .get("ts")
        .ok_or_else(|| ParseError("missing ts".into()))?
        .as_u64()
        .ok_or_else(|| ParseError("ts must be a non-negative integer".into()))?;
    let timestamp = Timestamp::new(ts).map_err(|e| ParseError(e.to_string()))?;
    let mut record = EventRecord::new(timestamp);
    for (k, v) in obj {
        if k == "ts" {
            continue;
        }
        if k.is_empty() || k == TOTAL_FIELD {
            return Err(ParseError(format!("invalid field name {k:?}")));
        }
        let v = match v {
            Value::Null => continue,
            Value::String(s) => s,
            Value::Number(n) => n.to_string(),
            Value::Bool(b) => b.to_string(),
            Value::Array(_) | Value::Object(_) => {
                return Err(ParseError(format!("field {k:?} is not a scalar")))
            }
        };
        record.fields.insert(k, v);
    }
    Ok(record)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct IngestStats {
    pub files: u64,
    pub lines_read: u64,
    pub records_parsed: u64,
    pub parse_errors: u64,
    pub event_entries: u64,
    pub index_entries: u64,
    pub aggregate_entries: u64,
    pub bytes_read: u64,
    pub wall_millis: u64,
    pub blocked_millis: u64,
    pub failed_files: Vec<String>,
}

impl IngestStats {
    pub fn merge(&mut self, other: &IngestStats) {
        self.files += other.files;
        self.lines_read += other.lines_read;
        self.records_parsed += other.records_parsed;
        self.parse_errors += other.parse_errors;
        self.event_entries += other.event_entries;
        self.index_entries += other.index_entries;
        self.aggregate_entries += other.aggregate_entries;
        self.bytes_read += other.bytes_read;
        self.wall_millis += other.wall_millis;
        self.blocked_millis += other.blocked_millis;
        self.failed_files.extend(other.failed_files.iter().cloned());
    }

    pub fn total_entries(&self) -> u64 {
        self.event_entries + self.index_entries + self.aggregate_entries
    }
}

/// Client-side write buffering. A buffer is sent when it reaches
/// `max_entries` or `max_bytes`. `client_bytes_per_sec` caps each worker's
/// send rate.
#[derive(Clone, Copy, Debug)]
pub struct WriterConfig {
    pub max_entries: usize,
    pub max_bytes: usize,
    pub client_bytes_per_sec: Option<u64>,
}

impl Default for WriterConfig {
    fn default() -> Self {
        Self {
            max_entries: 10_000,
            max_bytes: 1 << 20,
            client_bytes_per_sec: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct IngestConfig {
    pub shards: ShardConfig,
    pub writer: WriterConfig,
}

/// Live totals sampled by the rate monitor.
#[derive(Debug, Default)]
pub struct Progress {
    pub entries: AtomicU64,
    pub bytes: AtomicU64,
}

struct Pacer {
    start: Instant,
    sent: u64,
    rate: Option<u64>,
}

impl Pacer {
    fn new(rate: Option<u64>) -> Self {
        Self {
            start: Instant::now(),
            sent: 0,
            rate: rate.filter(|r| *r > 0),
        }
    }

    fn account(&mut self, bytes: usize) {
        self.sent += bytes as u64;
        if let Some(rate) = self.rate {
            let due = Duration::from_secs_f64(self.sent as f64 / rate as f64);
            let elapsed = self.start.elapsed();
            if due > elapsed {
                std::thread::sleep(due - elapsed);
            }
        }
    }
}

struct Client<'a> {
    store: &'a Store,
    cfg: WriterConfig,
    pacer: Pacer,
    progress: &'a Progress,
    blocked: Duration,
}

struct BufferedWriter {
    table: TableHandle,
    buf: Vec<Entry>,
    bytes: usize,
}

impl BufferedWriter {
    fn new(table: TableHandle) -> Self {
        Self {
            table,
            buf: Vec::new(),
            bytes: 0,
        }
    }

    fn push(&mut self, client: &mut Client<'_>, e: Entry) -> Result<(), KvError> {
        self.bytes += e.encoded_len();
        self.buf.push(e);
        if self.buf.len() >= client.cfg.max_entries || self.bytes >= client.cfg.max_bytes {
            self.send(client)?;
        }
        Ok(())
    }

    fn send(&mut self, client: &mut Client<'_>) -> Result<(), KvError> {
        if self.buf.is_empty() {
            return Ok(());
        }
        let batch = std::mem::take(&mut self.buf);
        let (n, bytes) = (batch.len(), std::mem::take(&mut self.bytes));
        let receipt = client.store.put_batch(&self.table, batch)?;
        client.blocked += receipt.blocked;
        client.progress.entries.fetch_add(n as u64, Ordering::Relaxed);
        client.progress.bytes.fetch_add(bytes as u64, Ordering::Relaxed);
        client.pacer.account(bytes);
        Ok(())
    }
}

/// Ingests one file into its source's tables.
pub fn ingest_file(store: &Store, job: &IngestJob, cfg: &IngestConfig) -> Result<IngestStats, IngestError> {
    let progress = Progress::default();
    let mut client = Client {
        store,
        cfg: cfg.writer,
        pacer: Pacer::new(cfg.writer.client_bytes_per_sec),
        progress: &progress,
        blocked: Duration::ZERO,
    };
    ingest_with(&mut client, job, cfg.shards, &AtomicBool::new(false))
}

fn ingest_with(
    client: &mut Client<'_>,
    job: &IngestJob,
    shards: ShardConfig,
    stop: &AtomicBool,
) -> Result<IngestStats, IngestError> {
    let start = Instant::now();
    let blocked_before = client.blocked;
    let file = File::open(&job.path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => IngestError::FileNotFound(job.path.clone()),
        _ => IngestError::Io(e),
    })?;
    let tables = SourceTables::for_source(&job.source_type);
    let mut events = BufferedWriter::new(client.store.table(&tables.event)?);
    let mut index = BufferedWriter::new(client.store.table(&tables.index)?);
    let mut aggregates = BufferedWriter::new(client.store.table(&tables.aggregate)?);

    let mut stats = IngestStats {
        files: 1,
        ..IngestStats::default()
    };
    let mut counts: HashMap<(String, String), u64> = HashMap::new();
    let mut reader = BufReader::with_capacity(1 << 16, file);
    let mut line = Vec::with_capacity(512);
    loop {
        line.clear();
        let n = reader.read_until(b'\n', &mut line)?;
        if n == 0 || stop.load(Ordering::Relaxed) {
            break;
        }
        stats.bytes_read += n as u64;
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        stats.lines_read += 1;
        let record = match parse_line(&line) {
            Ok(r) => r,
            Err(e) => {
                log::debug!("{}: {e}", job.path.display());
                stats.parse_errors += 1;
                continue;
            }
        };
        stats.records_parsed += 1;
        let key = schema::encode_event_key(&record, shards);
        for e in schema::encode_event_entries(&record, &key) {
            events.push(client, e)?;
            stats.event_entries += 1;
        }
        for e in schema::encode_index_entries(&record, &key) {
            index.push(client, e)?;
            stats.index_entries += 1;
        }
        for k in schema::aggregate_keys(&record, shards) {
            *counts.entry((k.row(), k.colq())).or_default() += 1;
        }
    }
    let mut cells: Vec<_> = counts.into_iter().collect();
    cells.sort();
    stats.aggregate_entries = cells.len() as u64;
    for ((row, colq), n) in cells {
        aggregates.push(client, Entry::new(row, colq, Bytes::from(n.to_string())))?;
    }
    events.send(client)?;
    index.send(client)?;
    aggregates.send(client)?;
    stats.wall_millis = start.elapsed().as_millis() as u64;
    stats.blocked_millis = (client.blocked - blocked_before).as_millis() as u64;
    Ok(stats)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RateSample {
    pub second: u64,
    pub entries_per_sec: f64,
    pub bytes_per_sec: f64,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Stop reading new lines once this much time has passed.
    pub max_duration: Option<Duration>,
}

#[derive(Clone, Debug, Default)]
pub struct RunReport {
    pub stats: IngestStats,
    pub series: Vec<RateSample>,
}

/// Runs `worker_count` workers over `jobs`, one queue partition each.
pub fn run_workers(
    store: &Store,
    jobs: Vec<IngestJob>,
    worker_count: usize,
    cfg: &IngestConfig,
    opts: RunOptions,
) -> Result<RunReport, IngestError> {
    if worker_count == 0 {
        return Err(IngestError::NoWorkers);
    }
    let mut queue = IngestQueue::new(worker_count);
    for job in jobs {
        queue.push(job);
    }
    let progress = Progress::default();
    let stop = AtomicBool::new(false);
    let start = Instant::now();
    let (done_tx, done_rx) = crossbeam_channel::bounded::<()>(0);

    let (per_worker, series) = std::thread::scope(|s| {
        let monitor = s.spawn(|| sample_rates(&progress, start, &done_rx, opts.max_duration, &stop));
        let handles: Vec<_> = queue
            .into_partitions()
            .into_iter()
            .map(|jobs| {
                let (progress, stop) = (&progress, &stop);
                s.spawn(move || {
                    let mut client = Client {
                        store,
                        cfg: cfg.writer,
                        pacer: Pacer::new(cfg.writer.client_bytes_per_sec),
                        progress,
                        blocked: Duration::ZERO,
                    };
                    let mut stats = IngestStats::default();
                    for job in jobs {
                        match ingest_with(&mut client, &job, cfg.shards, stop) {
                            Ok(s) => stats.merge(&s),
                            Err(e) => {
                                log::warn!("ingest of {} failed: {e}", job.path.display());
                                stats.files += 1;
                                stats.failed_files.push(format!("{}: {e}", job.path.display()));
                            }
                        }
                    }
                    stats
                })
            })
            .collect();
        let per_worker: Vec<IngestStats> = handles
            .into_iter()
            .map(|h| h.join().expect("ingest worker panicked"))
            .collect();
        drop(done_tx);
        (per_worker, monitor.join().expect("rate monitor panicked"))
    });

    let mut stats = IngestStats::default();
    for s in &per_worker {
        stats.merge(s);
    }
    stats.wall_millis = start.elapsed().as_millis() as u64;
    Ok(RunReport { stats, series })
}

fn sample_rates(
    progress: &Progress,
    start: Instant,
    done: &crossbeam_channel::Receiver<()>,
    max_duration: Option<Duration>,
    stop: &AtomicBool,
) -> Vec<RateSample> {
    let mut series = Vec::new();
    let (mut last_e, mut last_b) = (0u64, 0u64);
    let mut tick = start;
    loop {
        let next = tick + Duration::from_secs(1);
        let finished = !matches!(
            done.recv_deadline(next),
            Err(crossbeam_channel::RecvTimeoutError::Timeout)
        );
        let now = Instant::now();
        let span = now.duration_since(tick).as_secs_f64();
        let e = progress.entries.load(Ordering::Relaxed);
        let b = progress.bytes.load(Ordering::Relaxed);
        if !finished || span >= 0.1 {
            series.push(RateSample {
                second: series.len() as u64,
                entries_per_sec: (e - last_e) as f64 / span,
                bytes_per_sec: (b - last_b) as f64 / span,
            });
        }
        if finished {
            return series;
        }
        (last_e, last_b, tick) = (e, b, now);
        if max_duration.is_some_and(|d| now.duration_since(start) >= d) {
            stop.store(true, Ordering::Relaxed);
        }
    }
}

pub fn write_rate_csv(series: &[RateSample], mut w: impl Write) -> io::Result<()> {
    writeln!(w, "second,entries_per_sec,bytes_per_sec")?;
    for s in series {
        writeln!(w, "{},{:.1},{:.1}", s.second, s.entries_per_sec, s.bytes_per_sec)?;
    }
    Ok(())
}

/// Mean and population variance of the entries/sec series after `warmup`
/// seconds, ignoring a trailing partial sample.
pub fn steady_state(series: &[RateSample], warmup: usize) -> (f64, f64) {
    let body: Vec<f64> = series
        .iter()
        .skip(warmup)
        .take(series.len().saturating_sub(warmup + 1))
        .map(|s| s.entries_per_sec)
        .collect();
    if body.is_empty() {
        return (0.0, 0.0);
    }
    let n = body.len() as f64;
    let mean = body.iter().sum::<f64>() / n;
    let var = body.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}
