//! Persisted sorted runs.
//!
//! A run file is a 16-byte header followed by length-prefixed records in
//! `(row, colq)` order:
//!
//! ```text
//! header:  magic "EPRN" | version u32 | entry count u64
//! record:  row_len u32 | row | colq_len u32 | colq | value_len u32 | value
//! ```
//!
//! All integers are little-endian.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use bytes::Bytes;

use super::{Entry, KvError, RowRange};

pub const RUN_MAGIC: [u8; 4] = *b"EPRN";
pub const RUN_VERSION: u32 = 1;
pub const RUN_HEADER_LEN: usize = 16;

/// An immutable sorted run, kept resident after it is written or loaded.
#[derive(Debug)]
pub struct SortedRun {
    pub(crate) seq: u64,
    pub(crate) path: PathBuf,
    pub(crate) entries: Vec<Entry>,
}

impl SortedRun {
    pub fn file_name(tablet: usize, seq: u64) -> String {
        format!("{tablet}-{seq}.run")
    }

    /// Parses `<tablet-index>-<sequence>.run`.
    pub fn parse_file_name(name: &str) -> Option<(usize, u64)> {
        let stem = name.strip_suffix(".run")?;
        let (tablet, seq) = stem.split_once('-')?;
        Some((tablet.parse().ok()?, seq.parse().ok()?))
    }

    pub fn write(path: &Path, seq: u64, entries: Vec<Entry>) -> Result<SortedRun, KvError> {
        let tmp = path.with_extension("run.tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(&RUN_MAGIC)?;
            w.write_all(&RUN_VERSION.to_le_bytes())?;
            w.write_all(&(entries.len() as u64).to_le_bytes())?;
            for e in &entries {
                for part in [&e.row, &e.colq, &e.value] {
                    w.write_all(&(part.len() as u32).to_le_bytes())?;
                    w.write_all(part)?;
                }
            }
            w.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(SortedRun {
            seq,
            path: path.to_path_buf(),
            entries,
        })
    }

    pub fn load(path: &Path, seq: u64) -> Result<SortedRun, KvError> {
        let corrupt = |reason: &str| KvError::CorruptRun {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut r = BufReader::new(File::open(path)?);
        let mut header = [0u8; RUN_HEADER_LEN];
        r.read_exact(&mut header)
            .map_err(|_| corrupt("short header"))?;
        if header[0..4] != RUN_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != RUN_VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let count = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
        let mut entries = Vec::with_capacity(count);
        let read_part = |r: &mut BufReader<File>| -> Result<Bytes, KvError> {
            let mut len = [0u8; 4];
            r.read_exact(&mut len).map_err(|_| corrupt("truncated record"))?;
            let mut buf = vec![0u8; u32::from_le_bytes(len) as usize];
            r.read_exact(&mut buf).map_err(|_| corrupt("truncated record"))?;
            Ok(Bytes::from(buf))
        };
        for _ in 0..count {
            let row = read_part(&mut r)?;
            let colq = read_part(&mut r)?;
            let value = read_part(&mut r)?;
            entries.push(Entry { row, colq, value });
        }
        if entries.windows(2).any(|w| w[0].key_cmp(&w[1]).is_ge()) {
            return Err(corrupt("entries out of order"));
        }
        Ok(SortedRun {
            seq,
            path: path.to_path_buf(),
            entries,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub(crate) fn range(&self, range: &RowRange) -> &[Entry] {
        let lo = self
            .entries
            .partition_point(|e| e.row.as_ref() < range.start().as_ref());
        let hi = match range.end() {
            Some(end) => self.entries.partition_point(|e| e.row.as_ref() < end.as_ref()),
            None => self.entries.len(),
        };
        &self.entries[lo..hi.max(lo)]
    }
}
