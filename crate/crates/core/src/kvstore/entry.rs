use std::cmp::Ordering;
use std::fmt;

use bytes::Bytes;
use serde::{Deserialize, Serialize};

use super::KvError;

/// One sorted key-value record. Ordering is `(row, colq)` on raw bytes.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Entry {
    pub row: Bytes,
    pub colq: Bytes,
    pub value: Bytes,
}

impl Entry {
    pub fn new(row: impl Into<Bytes>, colq: impl Into<Bytes>, value: impl Into<Bytes>) -> Self {
        Self {
            row: row.into(),
            colq: colq.into(),
            value: value.into(),
        }
    }

    pub fn key_cmp(&self, other: &Entry) -> Ordering {
        self.row
            .cmp(&other.row)
            .then_with(|| self.colq.cmp(&other.colq))
    }

    pub fn same_key(&self, other: &Entry) -> bool {
        self.row == other.row && self.colq == other.colq
    }

    /// Payload size used for memtable accounting and flush pacing.
    pub fn encoded_len(&self) -> usize {
        self.row.len() + self.colq.len() + self.value.len()
    }

    pub(crate) fn validate(&self) -> Result<(), KvError> {
        if self.row.is_empty() {
            return Err(KvError::MalformedEntry("empty row".into()));
        }
        if self.colq.is_empty() {
            return Err(KvError::MalformedEntry("empty column qualifier".into()));
        }
        Ok(())
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key_cmp(other).then_with(|| self.value.cmp(&other.value))
    }
}

impl fmt::Debug for Entry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} => {}",
            String::from_utf8_lossy(&self.row),
            String::from_utf8_lossy(&self.colq),
            String::from_utf8_lossy(&self.value)
        )
    }
}

/// Half-open row range `[start, end)`. `end == None` means unbounded.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RowRange {
    start: Bytes,
    end: Option<Bytes>,
}

impl RowRange {
    pub fn new(start: impl Into<Bytes>, end: Option<Bytes>) -> Result<Self, KvError> {
        let start = start.into();
        if let Some(end) = &end {
            if *end < start {
                return Err(KvError::InvalidRange(format!(
                    "start {:?} is after end {:?}",
                    String::from_utf8_lossy(&start),
                    String::from_utf8_lossy(end)
                )));
            }
        }
        Ok(Self { start, end })
    }

    pub fn bounded(start: impl Into<Bytes>, end: impl Into<Bytes>) -> Result<Self, KvError> {
        Self::new(start, Some(end.into()))
    }

    pub fn all() -> Self {
        Self {
            start: Bytes::new(),
            end: None,
        }
    }

    /// The range holding exactly one row.
    pub fn exact(row: impl AsRef<[u8]>) -> Self {
        let row = row.as_ref();
        let mut end = Vec::with_capacity(row.len() + 1);
        end.extend_from_slice(row);
        end.push(0);
        Self {
            start: Bytes::copy_from_slice(row),
            end: Some(Bytes::from(end)),
        }
    }

    /// All rows beginning with `prefix`.
    pub fn prefix(prefix: impl AsRef<[u8]>) -> Self {
        let prefix = prefix.as_ref();
        let mut end = prefix.to_vec();
        while let Some(last) = end.pop() {
            if last < 0xff {
                end.push(last + 1);
                return Self {
                    start: Bytes::copy_from_slice(prefix),
                    end: Some(Bytes::from(end)),
                };
            }
        }
        Self {
            start: Bytes::copy_from_slice(prefix),
            end: None,
        }
    }

    pub fn start(&self) -> &Bytes {
        &self.start
    }

    pub fn end(&self) -> Option<&Bytes> {
        self.end.as_ref()
    }

    pub fn contains(&self, row: &[u8]) -> bool {
        row >= self.start.as_ref() && self.end.as_ref().is_none_or(|e| row < e.as_ref())
    }

    pub fn is_empty(&self) -> bool {
        self.end.as_ref().is_some_and(|e| *e <= self.start)
    }

    /// Intersection with `[lo, hi)`, `None` when empty.
    pub(crate) fn clip(&self, lo: &[u8], hi: Option<&[u8]>) -> Option<RowRange> {
        let start = if self.start.as_ref() >= lo {
            self.start.clone()
        } else {
            Bytes::copy_from_slice(lo)
        };
        let end = match (self.end.as_ref(), hi) {
            (None, None) => None,
            (Some(e), None) => Some(e.clone()),
            (None, Some(h)) => Some(Bytes::copy_from_slice(h)),
            (Some(e), Some(h)) => Some(if e.as_ref() <= h {
                e.clone()
            } else {
                Bytes::copy_from_slice(h)
            }),
        };
        let r = RowRange { start, end };
        (!r.is_empty()).then_some(r)
    }
}

/// Sorts ranges and merges any that overlap or touch.
pub(crate) fn coalesce(mut ranges: Vec<RowRange>) -> Vec<RowRange> {
    ranges.retain(|r| !r.is_empty());
    ranges.sort_by(|a, b| a.start.cmp(&b.start));
    let mut out: Vec<RowRange> = Vec::with_capacity(ranges.len());
    for r in ranges {
        if let Some(last) = out.last_mut() {
            match &last.end {
                None => continue,
                Some(e) if r.start <= *e => {
                    last.end = match (&last.end, &r.end) {
                        (Some(a), Some(b)) => Some(a.max(b).clone()),
                        _ => None,
                    };
                    continue;
                }
                _ => {}
            }
        }
        out.push(r);
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combiner {
    /// Last write wins.
    #[default]
    None,
    /// Values are decimal integers and duplicates are summed.
    Sum,
}

impl Combiner {
    pub(crate) fn merge_into(self, acc: &mut Bytes, newer_or_older: &Bytes) {
        if let Combiner::Sum = self {
            let a = parse_count(acc);
            let b = parse_count(newer_or_older);
            *acc = Bytes::from(a.saturating_add(b).to_string());
        }
    }

    pub(crate) fn check_value(self, value: &[u8]) -> Result<(), KvError> {
        match self {
            Combiner::None => Ok(()),
            Combiner::Sum => std::str::from_utf8(value)
                .ok()
                .and_then(|s| s.parse::<i64>().ok())
                .map(|_| ())
                .ok_or_else(|| {
                    KvError::MalformedEntry(format!(
                        "summing table requires a decimal integer value, got {:?}",
                        String::from_utf8_lossy(value)
                    ))
                }),
        }
    }
}

fn parse_count(v: &[u8]) -> i64 {
    std::str::from_utf8(v)
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(0)
}
