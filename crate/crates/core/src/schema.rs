//! Row-key layouts for the event, index and aggregate tables.
//!
//! ```text
//! event      row  SSS|RRRRRRRRRRRRR|HHHHHHHH          colq field      value v
//! index      row  SSS|field|value|RRRRRRRRRRRRR|HHHHHHHH  colq event row  value ""
//! aggregate  row  SSS|field|value                    colq bucket     value count
//! ```
//!
//! `SSS` is the zero-padded shard, `R…` the reversed millisecond timestamp
//! (so newer events sort first within a shard) and `H…` eight hex digits of
//! the record hash. Field names and values are percent-escaped so `|` never
//! appears inside a component.

use std::collections::BTreeMap;
use std::fmt;

use bytes::Bytes;
use thiserror::Error;

use crate::kvstore::{Entry, RowRange};

pub const MAX_MILLIS: u64 = 9_999_999_999_999;
pub const SHARD_WIDTH: usize = 3;
pub const MAX_SHARDS: u16 = 1000;
pub const HOUR_MILLIS: u64 = 3_600_000;
/// Reserved aggregate field counting every record.
pub const TOTAL_FIELD: &str = "__total__";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SchemaError {
    #[error("timestamp {0} outside [0, {MAX_MILLIS}]")]
    TimestampOutOfRange(u64),
    #[error("shard count {0} outside [1, {MAX_SHARDS}]")]
    InvalidShardCount(u32),
    #[error("malformed key {0:?}")]
    MalformedKey(String),
    #[error("time range start {start} after stop {stop}")]
    InvalidTimeRange { start: u64, stop: u64 },
}

/// Milliseconds since the epoch, 13 decimal digits at most.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(u64);

impl Timestamp {
    pub const MIN: Timestamp = Timestamp(0);
    pub const MAX: Timestamp = Timestamp(MAX_MILLIS);

    pub fn new(millis: u64) -> Result<Self, SchemaError> {
        if millis > MAX_MILLIS {
            return Err(SchemaError::TimestampOutOfRange(millis));
        }
        Ok(Self(millis))
    }

    pub fn millis(self) -> u64 {
        self.0
    }

    pub fn hour_bucket(self) -> Timestamp {
        Timestamp(self.0 - self.0 % HOUR_MILLIS)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub fn reverse_timestamp(t: Timestamp) -> String {
    format!("{:013}", MAX_MILLIS - t.0)
}

fn parse_reversed(s: &str) -> Option<Timestamp> {
    if s.len() != 13 || !s.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    Some(Timestamp(MAX_MILLIS - s.parse::<u64>().ok()?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ShardId(u16);

impl ShardId {
    pub fn index(self) -> u16 {
        self.0
    }

    fn parse(s: &str) -> Option<ShardId> {
        if s.len() != SHARD_WIDTH || !s.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        s.parse().ok().map(ShardId)
    }
}

impl fmt::Display for ShardId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:03}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShardConfig {
    shard_count: u16,
}

impl ShardConfig {
    pub fn new(shard_count: u32) -> Result<Self, SchemaError> {
        if !(1..=MAX_SHARDS as u32).contains(&shard_count) {
            return Err(SchemaError::InvalidShardCount(shard_count));
        }
        Ok(Self {
            shard_count: shard_count as u16,
        })
    }

    pub fn shard_count(self) -> u16 {
        self.shard_count
    }

    pub fn shards(self) -> impl Iterator<Item = ShardId> {
        (0..self.shard_count).map(ShardId)
    }

    /// Split points `001|` … `N-1|`, one tablet per shard.
    pub fn split_points(self) -> Vec<Bytes> {
        (1..self.shard_count)
            .map(|i| Bytes::from(format!("{:03}|", i)))
            .collect()
    }

    fn pick(self, hash: u64) -> ShardId {
        ShardId((hash % self.shard_count as u64) as u16)
    }
}

impl Default for ShardConfig {
    fn default() -> Self {
        Self { shard_count: 8 }
    }
}

/// A parsed event: a timestamp plus field/value pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventRecord {
    pub timestamp: Timestamp,
    pub fields: BTreeMap<String, String>,
}

impl EventRecord {
    pub fn new(timestamp: Timestamp) -> Self {
        Self {
            timestamp,
            fields: BTreeMap::new(),
        }
    }

    pub fn with(mut self, field: impl Into<String>, value: impl Into<String>) -> Self {
        self.fields.insert(field.into(), value.into());
        self
    }

    /// Timestamp, then `field=value` pairs in field order, joined by `\x1f`.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = self.timestamp.0.to_string().into_bytes();
        for (k, v) in &self.fields {
            out.push(0x1f);
            out.extend_from_slice(k.as_bytes());
            out.push(b'=');
            out.extend_from_slice(v.as_bytes());
        }
        out
    }

    pub fn stable_hash(&self) -> u64 {
        twox_hash::XxHash64::oneshot(0, &self.canonical_bytes())
    }
}

pub fn assign_shard(record: &EventRecord, cfg: ShardConfig) -> ShardId {
    cfg.pick(record.stable_hash())
}

fn hash8(hash: u64) -> String {
    format!("{:08x}", hash >> 32)
}

fn is_hash8(s: &str) -> bool {
    s.len() == 8 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

/// Percent-escapes `|`, `%` and control bytes.
pub fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        if c == '|' || c == '%' || (c as u32) < 0x20 {
            out.push_str(&format!("%{:02X}", c as u32));
        } else {
            out.push(c);
        }
    }
    out
}

pub fn unescape(s: &str) -> Option<String> {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' {
            let hex = s.get(i + 1..i + 3)?;
            out.push(u8::from_str_radix(hex, 16).ok()?);
            i += 3;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    String::from_utf8(out).ok()
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct EventKey {
    pub shard: ShardId,
    pub timestamp: Timestamp,
    pub hash8: String,
}

impl EventKey {
    pub fn encode(&self) -> String {
        format!(
            "{}|{}|{}",
            self.shard,
            reverse_timestamp(self.timestamp),
            self.hash8
        )
    }

    pub fn decode(row: &[u8]) -> Result<EventKey, SchemaError> {
        let malformed = || SchemaError::MalformedKey(String::from_utf8_lossy(row).into_owned());
        let s = std::str::from_utf8(row).map_err(|_| malformed())?;
        let mut parts = s.split('|');
        let (Some(shard), Some(rev), Some(h), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(malformed());
        };
        let shard = ShardId::parse(shard).ok_or_else(malformed)?;
        let timestamp = parse_reversed(rev).ok_or_else(malformed)?;
        if !is_hash8(h) {
            return Err(malformed());
        }
        Ok(EventKey {
            shard,
            timestamp,
            hash8: h.to_string(),
        })
    }
}

pub fn encode_event_key(record: &EventRecord, cfg: ShardConfig) -> EventKey {
    let hash = record.stable_hash();
    EventKey {
        shard: cfg.pick(hash),
        timestamp: record.timestamp,
        hash8: hash8(hash),
    }
}

pub fn decode_event_key(row: &[u8]) -> Result<(ShardId, Timestamp, String), SchemaError> {
    EventKey::decode(row).map(|k| (k.shard, k.timestamp, k.hash8))
}

fn check_time_range(start: Timestamp, stop: Timestamp) -> Result<(), SchemaError> {
    if start > stop {
        return Err(SchemaError::InvalidTimeRange {
            start: start.0,
            stop: stop.0,
        });
    }
    Ok(())
}

/// Rows `prefix + rev(t) + "|…"` for every `t` in `[start, stop]`.
fn reversed_time_range(prefix: &str, start: Timestamp, stop: Timestamp) -> RowRange {
    let lo = format!("{prefix}{}", reverse_timestamp(stop));
    let mut hi = format!("{prefix}{}|", reverse_timestamp(start)).into_bytes();
    hi.push(0xff);
    RowRange::bounded(lo, hi).expect("reversed bounds are ordered")
}

/// Row range holding exactly the shard's events with `t` in `[start, stop]`.
pub fn event_row_range(
    shard: ShardId,
    start: Timestamp,
    stop: Timestamp,
) -> Result<RowRange, SchemaError> {
    check_time_range(start, stop)?;
    Ok(reversed_time_range(&format!("{shard}|"), start, stop))
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct IndexKey {
    pub shard: ShardId,
    pub field: String,
    pub value: String,
    pub timestamp: Timestamp,
    pub hash8: String,
}

impl IndexKey {
    pub fn for_event(event: &EventKey, field: &str, value: &str) -> Self {
        Self {
            shard: event.shard,
            field: field.to_string(),
            value: value.to_string(),
            timestamp: event.timestamp,
            hash8: event.hash8.clone(),
        }
    }

    pub fn encode(&self) -> String {
        format!(
            "{}|{}|{}|{}|{}",
            self.shard,
            escape(&self.field),
            escape(&self.value),
            reverse_timestamp(self.timestamp),
            self.hash8
        )
    }

    pub fn decode(row: &[u8]) -> Result<IndexKey, SchemaError> {
        let malformed = || SchemaError::MalformedKey(String::from_utf8_lossy(row).into_owned());
        let s = std::str::from_utf8(row).map_err(|_| malformed())?;
        let parts: Vec<&str> = s.split('|').collect();
        let [shard, field, value, rev, h] = parts[..] else {
            return Err(malformed());
        };
        if !is_hash8(h) {
            return Err(malformed());
        }
        Ok(IndexKey {
            shard: ShardId::parse(shard).ok_or_else(malformed)?,
            field: unescape(field).ok_or_else(malformed)?,
            value: unescape(value).ok_or_else(malformed)?,
            timestamp: parse_reversed(rev).ok_or_else(malformed)?,
            hash8: h.to_string(),
        })
    }

    /// The event row this index entry points at.
    pub fn event_key(&self) -> EventKey {
        EventKey {
            shard: self.shard,
            timestamp: self.timestamp,
            hash8: self.hash8.clone(),
        }
    }
}

/// Index rows for `field = value` in one shard with `t` in `[start, stop]`.
pub fn index_row_range(
    shard: ShardId,
    field: &str,
    value: &str,
    start: Timestamp,
    stop: Timestamp,
) -> Result<RowRange, SchemaError> {
    check_time_range(start, stop)?;
    let prefix = format!("{shard}|{}|{}|", escape(field), escape(value));
    Ok(reversed_time_range(&prefix, start, stop))
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AggregateKey {
    pub shard: ShardId,
    pub field: String,
    pub value: String,
    pub bucket: Timestamp,
}

impl AggregateKey {
    pub fn new(cfg: ShardConfig, field: &str, value: &str, t: Timestamp) -> Self {
        Self {
            shard: aggregate_shard(field, value, cfg),
            field: field.to_string(),
            value: value.to_string(),
            bucket: t.hour_bucket(),
        }
    }

    pub fn row(&self) -> String {
        aggregate_row(self.shard, &self.field, &self.value)
    }

    pub fn colq(&self) -> String {
        format!("{:013}", self.bucket.0)
    }

    pub fn decode(row: &[u8], colq: &[u8]) -> Result<AggregateKey, SchemaError> {
        let malformed = || {
            SchemaError::MalformedKey(format!(
                "{} / {}",
                String::from_utf8_lossy(row),
                String::from_utf8_lossy(colq)
            ))
        };
        let s = std::str::from_utf8(row).map_err(|_| malformed())?;
        let parts: Vec<&str> = s.split('|').collect();
        let [shard, field, value] = parts[..] else {
            return Err(malformed());
        };
        let c = std::str::from_utf8(colq).map_err(|_| malformed())?;
        if c.len() != 13 || !c.bytes().all(|b| b.is_ascii_digit()) {
            return Err(malformed());
        }
        Ok(AggregateKey {
            shard: ShardId::parse(shard).ok_or_else(malformed)?,
            field: unescape(field).ok_or_else(malformed)?,
            value: unescape(value).ok_or_else(malformed)?,
            bucket: Timestamp::new(c.parse().map_err(|_| malformed())?)?,
        })
    }
}

pub fn aggregate_row(shard: ShardId, field: &str, value: &str) -> String {
    format!("{shard}|{}|{}", escape(field), escape(value))
}

/// All counts for one `(field, value)` live in a single shard so a cell's
/// locally summed count is written once.
pub fn aggregate_shard(field: &str, value: &str, cfg: ShardConfig) -> ShardId {
    let mut buf = Vec::with_capacity(field.len() + value.len() + 1);
    buf.extend_from_slice(field.as_bytes());
    buf.push(0x1f);
    buf.extend_from_slice(value.as_bytes());
    cfg.pick(twox_hash::XxHash64::oneshot(0, &buf))
}

/// One entry per field: `(event row, field, value)`.
pub fn encode_event_entries(record: &EventRecord, key: &EventKey) -> Vec<Entry> {
    let row = Bytes::from(key.encode());
    record
        .fields
        .iter()
        .map(|(f, v)| Entry::new(row.clone(), f.clone(), v.clone()))
        .collect()
}

/// One index entry per field, pointing back at `event`.
pub fn encode_index_entries(record: &EventRecord, event: &EventKey) -> Vec<Entry> {
    let colq = Bytes::from(event.encode());
    record
        .fields
        .iter()
        .map(|(f, v)| Entry::new(IndexKey::for_event(event, f, v).encode(), colq.clone(), Bytes::new()))
        .collect()
}

/// Count contributions: one per field plus the reserved total, each `"1"`.
pub fn encode_aggregate_entries(record: &EventRecord, cfg: ShardConfig) -> Vec<Entry> {
    aggregate_keys(record, cfg)
        .map(|k| Entry::new(k.row(), k.colq(), "1"))
        .collect()
}

pub fn aggregate_keys(
    record: &EventRecord,
    cfg: ShardConfig,
) -> impl Iterator<Item = AggregateKey> + '_ {
    record
        .fields
        .iter()
        .map(move |(f, v)| AggregateKey::new(cfg, f, v, record.timestamp))
        .chain(std::iter::once(AggregateKey::new(
            cfg,
            TOTAL_FIELD,
            "",
            record.timestamp,
        )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn ts(ms: u64) -> Timestamp {
        Timestamp::new(ms).unwrap()
    }

    #[test]
    fn reverse_timestamp_examples() {
        assert_eq!(reverse_timestamp(ts(0)), "9999999999999");
        assert_eq!(reverse_timestamp(ts(9_999_999_999_999)), "0000000000000");
        assert_eq!(reverse_timestamp(ts(1_400_000_000_000)), "8599999999999");
        assert_eq!(
            Timestamp::new(10_000_000_000_000),
            Err(SchemaError::TimestampOutOfRange(10_000_000_000_000))
        );
    }

    #[test]
    fn shard_assignment() {
        let r = EventRecord::new(ts(5)).with("domain", "a.com");
        assert_eq!(assign_shard(&r, ShardConfig::new(1).unwrap()).to_string(), "000");
        let cfg = ShardConfig::new(8).unwrap();
        assert_eq!(assign_shard(&r, cfg), assign_shard(&r.clone(), cfg));
        assert!(ShardConfig::new(0).is_err());
        assert!(ShardConfig::new(1001).is_err());
        assert_eq!(ShardConfig::new(1000).unwrap().shards().last().unwrap().to_string(), "999");
        let splits = cfg.split_points();
        assert_eq!(splits.len(), 7);
        assert_eq!(splits[0], Bytes::from_static(b"001|"));
        assert_eq!(splits[6], Bytes::from_static(b"007|"));
    }

    #[test]
    fn shard_balance_over_random_records() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand::rngs::StdRng::seed_from_u64(11);
        let cfg = ShardConfig::new(8).unwrap();
        let mut counts = [0u32; 8];
        for _ in 0..100_000 {
            let r = EventRecord::new(ts(rng.random_range(0..MAX_MILLIS)))
                .with("srcIp", format!("10.0.{}.{}", rng.random_range(0..256), rng.random_range(0..256)))
                .with("domain", format!("d{}.com", rng.random_range(0..1000)));
            counts[assign_shard(&r, cfg).index() as usize] += 1;
        }
        for c in counts {
            assert!((11_875..=13_125).contains(&c), "{counts:?}");
        }
    }

    #[test]
    fn event_key_layout() {
        let k = EventKey {
            shard: ShardId(3),
            timestamp: ts(0),
            hash8: "a1b2c3d4".into(),
        };
        assert_eq!(k.encode(), "003|9999999999999|a1b2c3d4");
        assert_eq!(
            decode_event_key(b"003|9999999999999|a1b2c3d4").unwrap(),
            (ShardId(3), ts(0), "a1b2c3d4".to_string())
        );
        for bad in [
            &b"badkey"[..],
            b"003|9999999999999",
            b"03|9999999999999|a1b2c3d4",
            b"003|999999999999x|a1b2c3d4",
            b"003|9999999999999|A1B2C3D4",
            b"003|9999999999999|a1b2c3d4|x",
        ] {
            assert!(matches!(EventKey::decode(bad), Err(SchemaError::MalformedKey(_))));
        }
    }

    #[test]
    fn hash_separates_records_differing_in_one_value() {
        let a = EventRecord::new(ts(100)).with("domain", "a.com").with("url", "/x");
        let b = EventRecord::new(ts(100)).with("domain", "a.com").with("url", "/y");
        let cfg = ShardConfig::default();
        assert_ne!(encode_event_key(&a, cfg).hash8, encode_event_key(&b, cfg).hash8);
    }

    #[test]
    fn no_hash_collisions_within_shard_and_millisecond() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand::rngs::StdRng::seed_from_u64(3);
        let cfg = ShardConfig::default();
        let mut seen: HashMap<(ShardId, Timestamp, String), EventRecord> = HashMap::new();
        for i in 0..100_000u32 {
            // Narrow time span so (shard, ts) pairs repeat often.
            let r = EventRecord::new(ts(rng.random_range(0..2000)))
                .with("id", i.to_string())
                .with("domain", "same.com");
            let k = encode_event_key(&r, cfg);
            if let Some(prev) = seen.insert((k.shard, k.timestamp, k.hash8), r.clone()) {
                assert_eq!(prev, r, "distinct records collided");
            }
        }
    }

    #[test]
    fn event_range_examples() {
        assert_eq!(
            event_row_range(ShardId(0), ts(5), ts(4)),
            Err(SchemaError::InvalidTimeRange { start: 5, stop: 4 })
        );
        let cfg = ShardConfig::default();
        let at = |t: u64| encode_event_key(&EventRecord::new(ts(t)).with("a", "b"), cfg);
        let k = at(1000);
        let r = event_row_range(k.shard, ts(1000), ts(1000)).unwrap();
        assert!(r.contains(k.encode().as_bytes()));
        for other in [999, 1001] {
            let mut o = at(other);
            o.shard = k.shard;
            assert!(!r.contains(o.encode().as_bytes()));
        }
        // Edges of the timestamp domain.
        let r = event_row_range(ShardId(1), Timestamp::MIN, Timestamp::MAX).unwrap();
        for t in [0, MAX_MILLIS] {
            let key = EventKey { shard: ShardId(1), timestamp: ts(t), hash8: "ffffffff".into() };
            assert!(r.contains(key.encode().as_bytes()));
        }
    }

    #[test]
    fn escaping_round_trip() {
        assert_eq!(escape("a|b%c\n"), "a%7Cb%25c%0A");
        assert_eq!(unescape("a%7Cb%25c%0A").unwrap(), "a|b%c\n");
        assert_eq!(unescape("%zz"), None);
        assert_eq!(unescape("%4"), None);

        let r = EventRecord::new(ts(7)).with("url", "/a|b?q=%20");
        let ek = encode_event_key(&r, ShardConfig::default());
        let idx = encode_index_entries(&r, &ek);
        let decoded = IndexKey::decode(&idx[0].row).unwrap();
        assert_eq!(decoded.value, "/a|b?q=%20");
        assert_eq!(decoded.event_key(), ek);
    }

    #[test]
    fn derived_entries() {
        let cfg = ShardConfig::default();
        let r = EventRecord::new(ts(1_400_000_123_456))
            .with("domain", "x.com")
            .with("srcIp", "10.0.0.1")
            .with("status", "200");
        let ek = encode_event_key(&r, cfg);
        let ev = encode_event_entries(&r, &ek);
        assert_eq!(ev.len(), 3);
        assert!(ev.iter().all(|e| e.row.as_ref() == ek.encode().as_bytes()));
        let idx = encode_index_entries(&r, &ek);
        assert_eq!(idx.len(), 3);
        for e in &idx {
            assert_eq!(e.colq.as_ref(), ek.encode().as_bytes());
            assert!(e.value.is_empty());
            assert!(e.row.starts_with(format!("{}|", ek.shard).as_bytes()));
        }
        let agg = encode_aggregate_entries(&r, cfg);
        assert_eq!(agg.len(), 4);
        assert!(agg.iter().all(|e| e.value.as_ref() == b"1"));
        assert!(agg.iter().all(|e| e.colq.as_ref() == b"1399996800000"));
        assert!(agg
            .iter()
            .any(|e| e.row.ends_with(format!("|{TOTAL_FIELD}|").as_bytes())));
        let k = AggregateKey::decode(&agg[0].row, &agg[0].colq).unwrap();
        assert_eq!(k.bucket, ts(388_888 * HOUR_MILLIS));
    }

    fn record_strategy() -> impl Strategy<Value = EventRecord> {
        (
            0..=MAX_MILLIS,
            prop::collection::btree_map("[a-zA-Z_|%]{1,8}", "[ -~\\n\\t]{0,12}", 0..5),
        )
            .prop_map(|(t, fields)| EventRecord { timestamp: ts(t), fields })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]

        #[test]
        fn key_round_trips(r in record_strategy(), shards in 1u32..=1000) {
            let cfg = ShardConfig::new(shards).unwrap();
            let ek = encode_event_key(&r, cfg);
            prop_assert_eq!(EventKey::decode(ek.encode().as_bytes()).unwrap(), ek.clone());
            for (f, v) in &r.fields {
                let ik = IndexKey::for_event(&ek, f, v);
                prop_assert_eq!(IndexKey::decode(ik.encode().as_bytes()).unwrap(), ik);
            }
            for ak in aggregate_keys(&r, cfg) {
                prop_assert_eq!(AggregateKey::decode(ak.row().as_bytes(), ak.colq().as_bytes()).unwrap(), ak);
            }
        }

        #[test]
        fn newer_sorts_first(a in 0..=MAX_MILLIS, b in 0..=MAX_MILLIS, shard in 0u16..1000) {
            prop_assume!(a != b);
            let key = |t| EventKey { shard: ShardId(shard), timestamp: ts(t), hash8: "00000000".into() }.encode();
            let (older, newer) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(key(older) > key(newer));
        }
    }
}
