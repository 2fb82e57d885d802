//! Helpers shared by the integration tests.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use bytes::Bytes;
use rand::seq::IndexedRandom;
use rand::Rng;

use eventpipe::cli::bench::{build_corpus, SOURCE};
use eventpipe::cli::generate::{GenerateStats, GeneratorSpec};
use eventpipe::ingest::{parse_line, SourceTables};
use eventpipe::kvstore::{RowRange, ScanSpec, Store, StoreConfig};
use eventpipe::query::{CmpOp, FilterTree, ResultRow, SinkError};
use eventpipe::schema::{encode_event_key, EventRecord, ShardConfig};

pub const EVENT_TABLE: &str = "event_webproxy";

pub struct Corpus {
    pub dir: tempfile::TempDir,
    pub store: Store,
    pub stats: GenerateStats,
    pub records: Vec<EventRecord>,
    pub shards: ShardConfig,
}

/// Generates `events` events over one hour and ingests them with `workers`
/// clients into an unthrottled store.
pub fn corpus(events: u64, domains: usize, workers: usize, seed: u64) -> Corpus {
    let dir = tempfile::tempdir().unwrap();
    let gen = GeneratorSpec {
        event_count: events,
        domains,
        seed,
        ..GeneratorSpec::default()
    };
    let shards = ShardConfig::default();
    let (store, stats) =
        build_corpus(dir.path(), &gen, 8, workers, shards, StoreConfig::unthrottled()).unwrap();
    let records = read_records(&stats.files);
    assert_eq!(records.len() as u64, events);
    Corpus {
        dir,
        store,
        stats,
        records,
        shards,
    }
}

pub fn read_records(files: &[PathBuf]) -> Vec<EventRecord> {
    let mut out = Vec::new();
    for f in files {
        for line in std::fs::read(f).unwrap().split(|&b| b == b'\n') {
            if !line.is_empty() {
                out.push(parse_line(line).unwrap());
            }
        }
    }
    out
}

/// Every `(row, colq, value)` of a table, in key order.
pub fn dump(store: &Store, table: &str) -> Vec<(Bytes, Bytes, Bytes)> {
    store
        .scan(ScanSpec::new(table, RowRange::all()))
        .unwrap()
        .map(|e| (e.row, e.colq, e.value))
        .collect()
}

pub fn dump_source(store: &Store) -> Vec<Vec<(Bytes, Bytes, Bytes)>> {
    let t = SourceTables::for_source(SOURCE);
    [t.event, t.index, t.aggregate].iter().map(|n| dump(store, n)).collect()
}

/// A sink collecting rows into `out`.
pub fn collector(out: &mut Vec<ResultRow>) -> impl FnMut(ResultRow) -> Result<(), SinkError> + '_ {
    move |r| {
        out.push(r);
        Ok(())
    }
}

/// Expected rows for a filter evaluated by `oracle` over the raw records.
pub fn brute_force(
    records: &[EventRecord],
    shards: ShardConfig,
    start: u64,
    stop: u64,
    oracle: impl Fn(&BTreeMap<String, String>) -> bool,
) -> Vec<ResultRow> {
    let mut rows: Vec<ResultRow> = records
        .iter()
        .filter(|r| (start..=stop).contains(&r.timestamp.millis()) && oracle(&r.fields))
        .map(|r| ResultRow {
            event_row: encode_event_key(r, shards).encode(),
            ts: r.timestamp.millis(),
            fields: r.fields.clone(),
        })
        .collect();
    rows.sort();
    rows.dedup();
    rows
}

/// Filter model kept separate from the library's tree so the oracle does
/// not share its evaluator.
#[derive(Clone, Debug)]
pub enum Cond {
    Eq(String, String),
    Ne(String, String),
    Lt(String, f64),
    Gt(String, f64),
    Prefix(String, String),
    And(Vec<Cond>),
    Or(Vec<Cond>),
    Not(Box<Cond>),
}

impl Cond {
    pub fn eval(&self, rec: &BTreeMap<String, String>) -> bool {
        let num = |f: &str| rec.get(f).and_then(|v| v.parse::<f64>().ok());
        match self {
            Cond::Eq(f, v) => rec.get(f) == Some(v),
            Cond::Ne(f, v) => rec.get(f).is_some_and(|x| x != v),
            Cond::Lt(f, x) => num(f).is_some_and(|n| n < *x),
            Cond::Gt(f, x) => num(f).is_some_and(|n| n > *x),
            Cond::Prefix(f, p) => rec.get(f).is_some_and(|v| v.starts_with(p.as_str())),
            Cond::And(c) => c.iter().all(|c| c.eval(rec)),
            Cond::Or(c) => c.iter().any(|c| c.eval(rec)),
            Cond::Not(c) => !c.eval(rec),
        }
    }

    pub fn to_tree(&self) -> FilterTree {
        match self {
            Cond::Eq(f, v) => FilterTree::eq(f, v),
            Cond::Ne(f, v) => FilterTree::cmp(f, CmpOp::Ne, v),
            Cond::Lt(f, x) => FilterTree::cmp(f, CmpOp::Lt, x.to_string()),
            Cond::Gt(f, x) => FilterTree::cmp(f, CmpOp::Gt, x.to_string()),
            Cond::Prefix(f, p) => FilterTree::regex(f, &format!("^{}", regex::escape(p))).unwrap(),
            Cond::And(c) => FilterTree::and(c.iter().map(Cond::to_tree).collect()).unwrap(),
            Cond::Or(c) => FilterTree::or(c.iter().map(Cond::to_tree).collect()).unwrap(),
            Cond::Not(c) => FilterTree::not(c.to_tree()),
        }
    }
}

/// Values seen per field, for drawing conditions that actually match.
pub struct Vocab(BTreeMap<String, Vec<String>>);

impl Vocab {
    pub fn new(records: &[EventRecord]) -> Self {
        let mut m: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for r in records {
            for (k, v) in &r.fields {
                m.entry(k.clone()).or_default().insert(v.clone());
            }
        }
        Vocab(m.into_iter().map(|(k, v)| (k, v.into_iter().collect())).collect())
    }

    /// An equality that usually matches something; now and then one on an
    /// absent value or field.
    pub fn eq(&self, rng: &mut impl Rng) -> Cond {
        match rng.random_range(0..20) {
            0 => Cond::Eq("domain".into(), "absent.example.org".into()),
            1 => Cond::Eq("nosuch".into(), "x".into()),
            _ => {
                let field = ["domain", "domain", "status", "url", "dstIp"].choose(rng).unwrap();
                let v = self.0[*field].choose(rng).unwrap().clone();
                Cond::Eq(field.to_string(), v)
            }
        }
    }

    fn leaf(&self, rng: &mut impl Rng) -> Cond {
        match rng.random_range(0..6) {
            0 | 1 => self.eq(rng),
            2 => Cond::Ne("status".into(), "200".into()),
            3 => Cond::Lt("bytes".into(), rng.random_range(200..200_000) as f64),
            4 => Cond::Gt("bytes".into(), rng.random_range(200..200_000) as f64),
            _ => Cond::Prefix("url".into(), ["/api/", "/img/", "/js/item1"].choose(rng).unwrap().to_string()),
        }
    }

    pub fn random(&self, rng: &mut impl Rng, depth: u32) -> Cond {
        if depth == 0 || rng.random_bool(0.35) {
            return self.leaf(rng);
        }
        let n = rng.random_range(2..=3);
        let kids = (0..n).map(|_| self.random(rng, depth - 1)).collect();
        match rng.random_range(0..5) {
            0 | 1 => Cond::And(kids),
            2 | 3 => Cond::Or(kids),
            _ => Cond::Not(Box::new(self.random(rng, depth - 1))),
        }
    }

    /// Trees shaped to reach each planner mode: bare equality, a union of
    /// equalities, a conjunction containing equalities, or anything.
    pub fn shaped(&self, rng: &mut impl Rng, shape: usize) -> Cond {
        match shape % 4 {
            0 => self.eq(rng),
            1 => Cond::Or((0..rng.random_range(2..=4)).map(|_| self.eq(rng)).collect()),
            2 => {
                let mut kids = vec![self.eq(rng)];
                for _ in 0..rng.random_range(1..=3) {
                    kids.push(if rng.random_bool(0.5) { self.eq(rng) } else { self.random(rng, 1) });
                }
                Cond::And(kids)
            }
            _ => self.random(rng, 3),
        }
    }
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}
