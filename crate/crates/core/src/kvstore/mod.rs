//! A tablet-partitioned sorted key-value engine.
//!
//! Tables are split into tablets by row. Each tablet buffers writes in a
//! memtable that is frozen once it crosses the flush threshold and handed to
//! a background flusher, which persists it as an immutable sorted run at a
//! configurable drain rate. Writers block while a tablet has more than
//! `pending_flush_limit` frozen memtables queued.
//!
//! Reads merge the memtable, frozen memtables and runs of each tablet and
//! pass the result through the iterator stack in [`iter`]: combiner,
//! whole-row filter, projection.

mod entry;
mod iter;
mod run;
mod tablet;

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use bytes::Bytes;
use crossbeam_channel::{Receiver, Sender};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use entry::{Combiner, Entry, RowRange};
pub use run::{SortedRun, RUN_HEADER_LEN, RUN_MAGIC, RUN_VERSION};

use iter::TabletScan;
use tablet::{FlushTask, Tablet};

#[derive(Debug, Error)]
pub enum KvError {
    #[error("table {0} already exists")]
    DuplicateTable(String),
    #[error("table {0} not found")]
    TableNotFound(String),
    #[error("split points must be strictly increasing")]
    UnsortedSplits,
    #[error("invalid table name {0:?}")]
    InvalidTableName(String),
    #[error("malformed entry: {0}")]
    MalformedEntry(String),
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("column projection must not be empty")]
    EmptyProjection,
    #[error("corrupt run file {path}: {reason}")]
    CorruptRun { path: PathBuf, reason: String },
    #[error("flush failed: {0}")]
    FlushFailed(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("table metadata: {0}")]
    Meta(#[from] serde_json::Error),
}

pub type Result<T, E = KvError> = std::result::Result<T, E>;

/// Emulated tablet-server read path. Results are released to the client in
/// buffers of `buffer_entries`; each buffer costs `per_entry` for every entry
/// examined plus `per_seek` for every range opened.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanCost {
    pub buffer_entries: usize,
    pub per_entry: Duration,
    pub per_seek: Duration,
}

impl Default for ScanCost {
    fn default() -> Self {
        Self {
            buffer_entries: 1000,
            per_entry: Duration::ZERO,
            per_seek: Duration::ZERO,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StoreConfig {
    pub flush_threshold_bytes: usize,
    pub pending_flush_limit: usize,
    /// Simulated bytes/sec per flusher thread; `None` writes as fast as the disk allows.
    pub flush_drain_bytes_per_sec: Option<u64>,
    pub flush_threads: usize,
    pub scan_threads: usize,
    pub scan_cost: ScanCost,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            flush_threshold_bytes: 4 << 20,
            pending_flush_limit: 4,
            flush_drain_bytes_per_sec: Some(16 << 20),
            flush_threads: 1,
            scan_threads: 16,
            scan_cost: ScanCost::default(),
        }
    }
}

impl StoreConfig {
    /// Defaults with flush pacing disabled.
    pub fn unthrottled() -> Self {
        Self {
            flush_drain_bytes_per_sec: None,
            ..Self::default()
        }
    }
}

/// Whole-row predicate evaluated inside the tablet scan.
pub trait RowFilter: Send + Sync {
    fn accept(&self, row: &[u8], cells: &[Entry]) -> bool;
}

impl<F> RowFilter for F
where
    F: Fn(&[u8], &[Entry]) -> bool + Send + Sync,
{
    fn accept(&self, row: &[u8], cells: &[Entry]) -> bool {
        self(row, cells)
    }
}

#[derive(Clone)]
pub struct ScanSpec {
    pub table: String,
    pub range: RowRange,
    pub projection: Option<BTreeSet<Bytes>>,
    pub filter: Option<Arc<dyn RowFilter>>,
}

impl ScanSpec {
    pub fn new(table: impl Into<String>, range: RowRange) -> Self {
        Self {
            table: table.into(),
            range,
            projection: None,
            filter: None,
        }
    }

    pub fn with_projection<I, B>(mut self, cols: I) -> Self
    where
        I: IntoIterator<Item = B>,
        B: Into<Bytes>,
    {
        self.projection = Some(cols.into_iter().map(Into::into).collect());
        self
    }

    pub fn with_filter(mut self, filter: Arc<dyn RowFilter>) -> Self {
        self.filter = Some(filter);
        self
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WriteReceipt {
    pub entries_written: usize,
    pub blocked: Duration,
}

impl WriteReceipt {
    pub fn blocked_millis(&self) -> u64 {
        self.blocked.as_millis() as u64
    }
}

#[derive(Serialize, Deserialize)]
struct TableMeta {
    name: String,
    /// Hex-encoded split rows.
    splits: Vec<String>,
    combiner: Combiner,
}

const META_FILE: &str = "table.json";

pub struct Table {
    name: String,
    splits: Vec<Bytes>,
    combiner: Combiner,
    tablets: Vec<Arc<Tablet>>,
}

pub type TableHandle = Arc<Table>;

impl Table {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn splits(&self) -> &[Bytes] {
        &self.splits
    }

    pub fn combiner(&self) -> Combiner {
        self.combiner
    }

    pub fn tablet_count(&self) -> usize {
        self.tablets.len()
    }

    pub fn tablet_for(&self, row: &[u8]) -> usize {
        self.splits.partition_point(|s| s.as_ref() <= row)
    }

    /// Number of persisted runs per tablet.
    pub fn run_counts(&self) -> Vec<usize> {
        self.tablets.iter().map(|t| t.run_count()).collect()
    }

    pub fn memtable_bytes(&self) -> usize {
        self.tablets.iter().map(|t| t.memtable_bytes()).sum()
    }

    /// Splits `ranges` by tablet, coalescing within each tablet.
    fn route(&self, ranges: &[RowRange]) -> Vec<(Arc<Tablet>, Vec<RowRange>)> {
        let mut out = Vec::new();
        for t in &self.tablets {
            let clipped: Vec<RowRange> = ranges
                .iter()
                .filter_map(|r| r.clip(&t.lo, t.hi.as_deref()))
                .collect();
            if !clipped.is_empty() {
                out.push((t.clone(), entry::coalesce(clipped)));
            }
        }
        out
    }
}

type Job = Box<dyn FnOnce() + Send>;

struct Workers<T> {
    tx: Option<Sender<T>>,
    handles: Vec<JoinHandle<()>>,
}

impl<T: Send + 'static> Workers<T> {
    fn spawn(name: &str, n: usize, work: impl Fn(T) + Send + Sync + Clone + 'static) -> Self {
        let (tx, rx): (Sender<T>, Receiver<T>) = crossbeam_channel::unbounded();
        let handles = (0..n.max(1))
            .map(|i| {
                let rx = rx.clone();
                let work = work.clone();
                std::thread::Builder::new()
                    .name(format!("{name}-{i}"))
                    .spawn(move || {
                        for item in rx {
                            work(item);
                        }
                    })
                    .expect("spawn worker thread")
            })
            .collect();
        Self {
            tx: Some(tx),
            handles,
        }
    }

    fn submit(&self, item: T) {
        if let Some(tx) = &self.tx {
            // Receivers live as long as `self`.
            let _ = tx.send(item);
        }
    }
}

impl<T> Drop for Workers<T> {
    fn drop(&mut self) {
        self.tx.take();
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

fn run_flush(task: FlushTask, drain_rate: Option<u64>) {
    if let Some(rate) = drain_rate.filter(|r| *r > 0) {
        // The memtable stays pending for the simulated write time.
        std::thread::sleep(Duration::from_secs_f64(task.bytes as f64 / rate as f64));
    }
    task.tablet.complete_flush(task.seq, &task.map);
}

pub struct Store {
    root: PathBuf,
    config: StoreConfig,
    tables: RwLock<HashMap<String, TableHandle>>,
    flusher: Workers<FlushTask>,
    scanners: Workers<Job>,
}

impl Store {
    /// Opens (or creates) a store rooted at `root`, loading any existing tables.
    pub fn open(root: impl AsRef<Path>, config: StoreConfig) -> Result<Store> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root)?;
        let drain = config.flush_drain_bytes_per_sec;
        let store = Store {
            flusher: Workers::spawn("flush", config.flush_threads, move |t| run_flush(t, drain)),
            scanners: Workers::spawn("scan", config.scan_threads, |job: Job| job()),
            root,
            config,
            tables: RwLock::new(HashMap::new()),
        };
        let mut dirs: Vec<_> = fs::read_dir(&store.root)?
            .filter_map(|d| d.ok())
            .map(|d| d.path())
            .filter(|p| p.join(META_FILE).is_file())
            .collect();
        dirs.sort();
        for dir in dirs {
            let table = store.load_table(&dir)?;
            store.tables.write().insert(table.name.clone(), table);
        }
        Ok(store)
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn load_table(&self, dir: &Path) -> Result<TableHandle> {
        let meta: TableMeta = serde_json::from_slice(&fs::read(dir.join(META_FILE))?)?;
        let splits = meta
            .splits
            .iter()
            .map(|s| {
                hex::decode(s)
                    .map(Bytes::from)
                    .map_err(|e| KvError::CorruptRun {
                        path: dir.join(META_FILE),
                        reason: e.to_string(),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut runs: HashMap<usize, Vec<Arc<SortedRun>>> = HashMap::new();
        for f in fs::read_dir(dir)? {
            let path = f?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
                continue;
            };
            if let Some((tablet, seq)) = SortedRun::parse_file_name(name) {
                runs.entry(tablet)
                    .or_default()
                    .push(Arc::new(SortedRun::load(&path, seq)?));
            }
        }
        Ok(Arc::new(build_table(
            meta.name,
            splits,
            meta.combiner,
            dir,
            |i| runs.remove(&i).unwrap_or_default(),
        )))
    }

    pub fn create_table(
        &self,
        name: &str,
        splits: Vec<Bytes>,
        combiner: Combiner,
    ) -> Result<TableHandle> {
        if name.is_empty()
            || !name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
            || name.starts_with('.')
        {
            return Err(KvError::InvalidTableName(name.to_string()));
        }
        if splits.windows(2).any(|w| w[0] >= w[1]) {
            return Err(KvError::UnsortedSplits);
        }
        let mut tables = self.tables.write();
        if tables.contains_key(name) {
            return Err(KvError::DuplicateTable(name.to_string()));
        }
        let dir = self.root.join(name);
        fs::create_dir_all(&dir)?;
        let meta = TableMeta {
            name: name.to_string(),
            splits: splits.iter().map(hex::encode).collect(),
            combiner,
        };
        fs::write(dir.join(META_FILE), serde_json::to_vec_pretty(&meta)?)?;
        let table = Arc::new(build_table(name.to_string(), splits, combiner, &dir, |_| {
            Vec::new()
        }));
        tables.insert(name.to_string(), table.clone());
        Ok(table)
    }

    pub fn table(&self, name: &str) -> Result<TableHandle> {
        self.tables
            .read()
            .get(name)
            .cloned()
            .ok_or_else(|| KvError::TableNotFound(name.to_string()))
    }

    pub fn table_names(&self) -> Vec<String> {
        let mut names: Vec<_> = self.tables.read().keys().cloned().collect();
        names.sort();
        names
    }

    pub fn put_batch(&self, table: &Table, entries: Vec<Entry>) -> Result<WriteReceipt> {
        for e in &entries {
            e.validate()?;
            table.combiner.check_value(&e.value)?;
        }
        let n = entries.len();
        let mut groups: Vec<Vec<Entry>> = vec![Vec::new(); table.tablets.len()];
        for e in entries {
            groups[table.tablet_for(&e.row)].push(e);
        }
        let mut blocked = Duration::ZERO;
        for (tablet, group) in table.tablets.iter().zip(groups) {
            if !group.is_empty() {
                blocked += tablet.insert(group, &self.config, &|t| self.flusher.submit(t));
            }
        }
        Ok(WriteReceipt {
            entries_written: n,
            blocked,
        })
    }

    /// Persists every memtable of `table` and waits for the flusher.
    pub fn flush(&self, table: &Table) -> Result<()> {
        for t in &table.tablets {
            if let Some(task) = t.freeze_now() {
                self.flusher.submit(task);
            }
        }
        for t in &table.tablets {
            t.wait_drained()?;
        }
        Ok(())
    }

    pub fn flush_all(&self) -> Result<()> {
        let tables: Vec<_> = self.tables.read().values().cloned().collect();
        for t in tables {
            self.flush(&t)?;
        }
        Ok(())
    }

    /// Ordered scan of one row range.
    pub fn scan(&self, spec: ScanSpec) -> Result<ScanStream> {
        let table = self.table(&spec.table)?;
        if spec.projection.as_ref().is_some_and(|p| p.is_empty()) {
            return Err(KvError::EmptyProjection);
        }
        Ok(ScanStream {
            pending: table.route(std::slice::from_ref(&spec.range)).into(),
            projection: spec.projection.map(Arc::new),
            filter: spec.filter,
            cost: self.config.scan_cost,
            current: None,
            buf: Vec::new().into_iter(),
        })
    }

    /// Unordered scan of several ranges. Tablets are scanned in parallel and
    /// their buffers arrive as produced; entries of one row are always
    /// delivered together and each `(row, colq)` appears once.
    pub fn batch_scan(
        &self,
        table: &Table,
        ranges: &[RowRange],
        projection: Option<BTreeSet<Bytes>>,
        filter: Option<Arc<dyn RowFilter>>,
    ) -> Result<BatchScanStream> {
        let (tx, rx) = crossbeam_channel::unbounded();
        self.batch_scan_into(table, ranges, projection, filter, tx)?;
        Ok(BatchScanStream {
            rx,
            buf: Vec::new().into_iter(),
        })
    }

    /// Like [`Store::batch_scan`] but sends buffers to `tx`, so several
    /// scans can share one consumer. The channel disconnects once every
    /// sender, including the caller's, is dropped.
    pub fn batch_scan_into(
        &self,
        table: &Table,
        ranges: &[RowRange],
        projection: Option<BTreeSet<Bytes>>,
        filter: Option<Arc<dyn RowFilter>>,
        tx: Sender<Vec<Entry>>,
    ) -> Result<()> {
        if ranges.is_empty() {
            return Err(KvError::InvalidRange("batch scan needs at least one range".into()));
        }
        if projection.as_ref().is_some_and(|p| p.is_empty()) {
            return Err(KvError::EmptyProjection);
        }
        let projection = projection.map(Arc::new);
        let cost = self.config.scan_cost;
        for (tablet, ranges) in table.route(ranges) {
            let tx = tx.clone();
            let projection = projection.clone();
            let filter = filter.clone();
            self.scanners.submit(Box::new(move || {
                let scan = tablet.open_scan(&ranges, projection, filter, cost);
                for buf in scan {
                    if tx.send(buf).is_err() {
                        break;
                    }
                }
            }));
        }
        Ok(())
    }
}

fn build_table(
    name: String,
    splits: Vec<Bytes>,
    combiner: Combiner,
    dir: &Path,
    mut runs_for: impl FnMut(usize) -> Vec<Arc<SortedRun>>,
) -> Table {
    let tablets = (0..=splits.len())
        .map(|i| {
            let lo = if i == 0 { Bytes::new() } else { splits[i - 1].clone() };
            let hi = splits.get(i).cloned();
            Arc::new(Tablet::new(i, lo, hi, dir.to_path_buf(), combiner, runs_for(i)))
        })
        .collect();
    Table {
        name,
        splits,
        combiner,
        tablets,
    }
}

/// Entries of one range in `(row, colq)` order.
pub struct ScanStream {
    pending: VecDeque<(Arc<Tablet>, Vec<RowRange>)>,
    projection: Option<Arc<BTreeSet<Bytes>>>,
    filter: Option<Arc<dyn RowFilter>>,
    cost: ScanCost,
    current: Option<TabletScan>,
    buf: std::vec::IntoIter<Entry>,
}

impl Iterator for ScanStream {
    type Item = Entry;

    fn next(&mut self) -> Option<Entry> {
        loop {
            if let Some(e) = self.buf.next() {
                return Some(e);
            }
            if let Some(scan) = &mut self.current {
                if let Some(b) = scan.next() {
                    self.buf = b.into_iter();
                    continue;
                }
                self.current = None;
            }
            let (tablet, ranges) = self.pending.pop_front()?;
            self.current = Some(tablet.open_scan(
                &ranges,
                self.projection.clone(),
                self.filter.clone(),
                self.cost,
            ));
        }
    }
}

/// Entries of several ranges in no particular order across tablets.
pub struct BatchScanStream {
    rx: Receiver<Vec<Entry>>,
    buf: std::vec::IntoIter<Entry>,
}

impl BatchScanStream {
    /// Next buffer as delivered by a tablet; never splits a row.
    pub fn next_buffer(&mut self) -> Option<Vec<Entry>> {
        let rest: Vec<Entry> = std::mem::take(&mut self.buf).collect();
        if !rest.is_empty() {
            return Some(rest);
        }
        self.rx.recv().ok()
    }
}

impl Iterator for BatchScanStream {
    type Item = Entry;

    fn next(&mut self) -> Option<Entry> {
        loop {
            if let Some(e) = self.buf.next() {
                return Some(e);
            }
            self.buf = self.rx.recv().ok()?.into_iter();
        }
    }
}
