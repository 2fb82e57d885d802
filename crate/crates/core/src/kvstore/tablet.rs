use std::collections::BTreeMap;
use std::ops::Bound;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use bytes::Bytes;
use parking_lot::{Condvar, Mutex};

use super::iter::{MergeIter, TabletScan};
use super::run::SortedRun;
use super::{Combiner, Entry, KvError, RowFilter, RowRange, ScanCost, StoreConfig};
use std::collections::BTreeSet;

pub(crate) type MemMap = BTreeMap<(Bytes, Bytes), Bytes>;

#[derive(Default)]
struct Memtable {
    map: MemMap,
    size: usize,
}

struct TabletState {
    active: Memtable,
    /// Frozen memtables waiting for the flusher, ascending by sequence.
    frozen: Vec<(u64, Arc<MemMap>)>,
    /// Ascending by sequence.
    runs: Vec<Arc<SortedRun>>,
    next_seq: u64,
    flush_error: Option<String>,
}

pub(crate) struct FlushTask {
    pub(crate) tablet: Arc<Tablet>,
    pub(crate) seq: u64,
    pub(crate) map: Arc<MemMap>,
    pub(crate) bytes: usize,
}

/// A contiguous partition `[lo, hi)` of a table's row space.
pub(crate) struct Tablet {
    pub(crate) index: usize,
    pub(crate) lo: Bytes,
    pub(crate) hi: Option<Bytes>,
    dir: PathBuf,
    combiner: Combiner,
    state: Mutex<TabletState>,
    drained: Condvar,
}

impl Tablet {
    pub(crate) fn new(
        index: usize,
        lo: Bytes,
        hi: Option<Bytes>,
        dir: PathBuf,
        combiner: Combiner,
        mut runs: Vec<Arc<SortedRun>>,
    ) -> Self {
        runs.sort_by_key(|r| r.seq);
        let next_seq = runs.last().map_or(1, |r| r.seq + 1);
        Self {
            index,
            lo,
            hi,
            dir,
            combiner,
            state: Mutex::new(TabletState {
                active: Memtable::default(),
                frozen: Vec::new(),
                runs,
                next_seq,
                flush_error: None,
            }),
            drained: Condvar::new(),
        }
    }

    /// Inserts entries, blocking while too many flushes are pending.
    /// Returns the time spent blocked.
    pub(crate) fn insert(
        self: &Arc<Self>,
        entries: Vec<Entry>,
        config: &StoreConfig,
        submit: &dyn Fn(FlushTask),
    ) -> Duration {
        let mut blocked = Duration::ZERO;
        let mut st = self.state.lock();
        for e in entries {
            if st.frozen.len() > config.pending_flush_limit {
                let start = Instant::now();
                while st.frozen.len() > config.pending_flush_limit {
                    self.drained.wait(&mut st);
                }
                blocked += start.elapsed();
            }
            let size = e.encoded_len();
            match st.active.map.entry((e.row, e.colq)) {
                std::collections::btree_map::Entry::Occupied(mut o) => {
                    let old = o.get().len();
                    match self.combiner {
                        Combiner::Sum => self.combiner.merge_into(o.get_mut(), &e.value),
                        Combiner::None => *o.get_mut() = e.value,
                    }
                    let new = o.get().len();
                    st.active.size = st.active.size + new - old;
                }
                std::collections::btree_map::Entry::Vacant(v) => {
                    v.insert(e.value);
                    st.active.size += size;
                }
            }
            if st.active.size >= config.flush_threshold_bytes {
                if let Some(task) = self.freeze(&mut st) {
                    submit(task);
                }
            }
        }
        blocked
    }

    fn freeze(self: &Arc<Self>, st: &mut TabletState) -> Option<FlushTask> {
        if st.active.map.is_empty() {
            return None;
        }
        let mem = std::mem::take(&mut st.active);
        let seq = st.next_seq;
        st.next_seq += 1;
        let map = Arc::new(mem.map);
        st.frozen.push((seq, map.clone()));
        Some(FlushTask {
            tablet: self.clone(),
            seq,
            map,
            bytes: mem.size,
        })
    }

    pub(crate) fn freeze_now(self: &Arc<Self>) -> Option<FlushTask> {
        let mut st = self.state.lock();
        self.freeze(&mut st)
    }

    /// Persists a frozen memtable and swaps it for the resulting run.
    pub(crate) fn complete_flush(&self, seq: u64, map: &MemMap) {
        let entries: Vec<Entry> = map
            .iter()
            .map(|((row, colq), value)| Entry {
                row: row.clone(),
                colq: colq.clone(),
                value: value.clone(),
            })
            .collect();
        let path = self.dir.join(SortedRun::file_name(self.index, seq));
        let (run, err) = match SortedRun::write(&path, seq, entries.clone()) {
            Ok(run) => (run, None),
            Err(e) => {
                log::error!("flush of {} failed: {e}", path.display());
                let run = SortedRun {
                    seq,
                    path: PathBuf::new(),
                    entries,
                };
                (run, Some(e.to_string()))
            }
        };
        let mut st = self.state.lock();
        let pos = st.runs.partition_point(|r| r.seq < seq);
        st.runs.insert(pos, Arc::new(run));
        st.frozen.retain(|(s, _)| *s != seq);
        if err.is_some() {
            st.flush_error = err;
        }
        self.drained.notify_all();
    }

    pub(crate) fn wait_drained(&self) -> Result<(), KvError> {
        let mut st = self.state.lock();
        while !st.frozen.is_empty() {
            self.drained.wait(&mut st);
        }
        match st.flush_error.take() {
            Some(reason) => Err(KvError::FlushFailed(reason)),
            None => Ok(()),
        }
    }

    pub(crate) fn run_count(&self) -> usize {
        self.state.lock().runs.len()
    }

    pub(crate) fn memtable_bytes(&self) -> usize {
        self.state.lock().active.size
    }

    /// Takes a consistent snapshot of `ranges` (sorted, disjoint, within this
    /// tablet) and returns the scan over it.
    pub(crate) fn open_scan(
        &self,
        ranges: &[RowRange],
        projection: Option<Arc<BTreeSet<Bytes>>>,
        filter: Option<Arc<dyn RowFilter>>,
        cost: ScanCost,
    ) -> TabletScan {
        let st = self.state.lock();
        let mut sources: Vec<Vec<Entry>> = Vec::with_capacity(1 + st.frozen.len() + st.runs.len());
        sources.push(collect_map(&st.active.map, ranges));
        for (_, map) in st.frozen.iter().rev() {
            sources.push(collect_map(map, ranges));
        }
        for run in st.runs.iter().rev() {
            let mut v = Vec::new();
            for r in ranges {
                v.extend_from_slice(run.range(r));
            }
            sources.push(v);
        }
        drop(st);
        sources.retain(|s| !s.is_empty());
        TabletScan::new(
            MergeIter::new(sources, self.combiner),
            ranges.len(),
            filter,
            projection,
            cost,
        )
    }
}

fn collect_map(map: &MemMap, ranges: &[RowRange]) -> Vec<Entry> {
    let mut out = Vec::new();
    for r in ranges {
        let lo = Bound::Included((r.start().clone(), Bytes::new()));
        let hi = match r.end() {
            Some(end) => Bound::Excluded((end.clone(), Bytes::new())),
            None => Bound::Unbounded,
        };
        out.extend(map.range((lo, hi)).map(|((row, colq), value)| Entry {
            row: row.clone(),
            colq: colq.clone(),
            value: value.clone(),
        }));
    }
    out
}
