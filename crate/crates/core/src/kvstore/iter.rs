//! Server-side iterator stack: k-way merge, combiner, whole-row filter,
//! column projection, and buffered delivery.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};
use std::sync::Arc;
use std::time::Duration;

use bytes::Bytes;

use super::{Combiner, Entry, RowFilter, ScanCost};

struct HeapItem {
    entry: Entry,
    source: usize,
}

impl PartialEq for HeapItem {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for HeapItem {}
impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapItem {
    // Reversed: BinaryHeap is a max-heap and we want the smallest key, with
    // the lowest (newest) source first among equal keys.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .entry
            .key_cmp(&self.entry)
            .then_with(|| other.source.cmp(&self.source))
    }
}

/// Merges sorted sources into one sorted, combined stream. Sources are
/// ordered newest first; with no combiner the newest value wins.
pub(crate) struct MergeIter {
    sources: Vec<std::vec::IntoIter<Entry>>,
    heap: BinaryHeap<HeapItem>,
    combiner: Combiner,
}

impl MergeIter {
    pub(crate) fn new(sources: Vec<Vec<Entry>>, combiner: Combiner) -> Self {
        let mut sources: Vec<_> = sources.into_iter().map(Vec::into_iter).collect();
        let mut heap = BinaryHeap::with_capacity(sources.len());
        for (source, it) in sources.iter_mut().enumerate() {
            if let Some(entry) = it.next() {
                heap.push(HeapItem { entry, source });
            }
        }
        Self {
            sources,
            heap,
            combiner,
        }
    }

    fn refill(&mut self, source: usize) {
        if let Some(entry) = self.sources[source].next() {
            self.heap.push(HeapItem { entry, source });
        }
    }
}

impl Iterator for MergeIter {
    type Item = Entry;

    fn next(&mut self) -> Option<Entry> {
        let HeapItem { mut entry, source } = self.heap.pop()?;
        self.refill(source);
        while let Some(top) = self.heap.peek() {
            if !top.entry.same_key(&entry) {
                break;
            }
            let HeapItem { entry: dup, source } = self.heap.pop().unwrap();
            self.combiner.merge_into(&mut entry.value, &dup.value);
            self.refill(source);
        }
        Some(entry)
    }
}

/// Groups a sorted entry stream into whole rows.
pub(crate) struct RowGroups<I: Iterator<Item = Entry>> {
    inner: std::iter::Peekable<I>,
}

impl<I: Iterator<Item = Entry>> RowGroups<I> {
    pub(crate) fn new(inner: I) -> Self {
        Self {
            inner: inner.peekable(),
        }
    }
}

impl<I: Iterator<Item = Entry>> Iterator for RowGroups<I> {
    type Item = Vec<Entry>;

    fn next(&mut self) -> Option<Vec<Entry>> {
        let first = self.inner.next()?;
        let mut row = vec![first];
        while let Some(e) = self.inner.peek() {
            if e.row != row[0].row {
                break;
            }
            row.push(self.inner.next().unwrap());
        }
        Some(row)
    }
}

/// Produces the result of one tablet's scan as a sequence of buffers. A
/// buffer is released once it holds `buffer_entries` results or the tablet
/// is exhausted, and never splits a row. Simulated read cost is charged
/// when each buffer is released.
pub(crate) struct TabletScan {
    rows: RowGroups<MergeIter>,
    filter: Option<Arc<dyn RowFilter>>,
    projection: Option<Arc<BTreeSet<Bytes>>>,
    cost: ScanCost,
    owed: Duration,
    done: bool,
}

impl TabletScan {
    pub(crate) fn new(
        merged: MergeIter,
        seeks: usize,
        filter: Option<Arc<dyn RowFilter>>,
        projection: Option<Arc<BTreeSet<Bytes>>>,
        cost: ScanCost,
    ) -> Self {
        Self {
            rows: RowGroups::new(merged),
            filter,
            projection,
            owed: cost.per_seek * seeks as u32,
            cost,
            done: false,
        }
    }

    fn settle(&mut self) {
        if !self.owed.is_zero() {
            std::thread::sleep(self.owed);
            self.owed = Duration::ZERO;
        }
    }
}

impl Iterator for TabletScan {
    type Item = Vec<Entry>;

    fn next(&mut self) -> Option<Vec<Entry>> {
        if self.done {
            return None;
        }
        let mut buf = Vec::new();
        let limit = self.cost.buffer_entries.max(1);
        while buf.len() < limit {
            let Some(row) = self.rows.next() else {
                self.done = true;
                break;
            };
            self.owed += self.cost.per_entry * row.len() as u32;
            if let Some(f) = &self.filter {
                if !f.accept(&row[0].row, &row) {
                    continue;
                }
            }
            match &self.projection {
                Some(cols) => buf.extend(row.into_iter().filter(|e| cols.contains(&e.colq))),
                None => buf.extend(row),
            }
        }
        self.settle();
        if buf.is_empty() {
            None
        } else {
            Some(buf)
        }
    }
}
