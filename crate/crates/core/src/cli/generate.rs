//! Synthetic web-proxy events with Zipf-distributed domain popularity.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::Serialize;

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorSpec {
    pub event_count: u64,
    pub t_start: u64,
    pub t_stop: u64,
    pub domains: usize,
    pub zipf_s: f64,
    /// Number of non-timestamp fields per event, taken in `FIELD_ORDER`
    /// order; extra fields beyond the standard six are `attrN`.
    pub field_count: usize,
    pub seed: u64,
}

/// 2014-05-13T16:00:00Z, aligned to an hour.
pub const DEFAULT_START: u64 = 1_399_996_800_000;

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            event_count: 100_000,
            t_start: DEFAULT_START,
            t_stop: DEFAULT_START + 3_600_000 - 1,
            domains: 1000,
            zipf_s: 1.2,
            field_count: FIELD_ORDER.len(),
            seed: 1,
        }
    }
}

pub const FIELD_ORDER: [&str; 6] = ["domain", "srcIp", "dstIp", "url", "status", "bytes"];

impl GeneratorSpec {
    pub fn validate(&self) -> io::Result<()> {
        let bad = |m: &str| Err(io::Error::new(io::ErrorKind::InvalidInput, m.to_string()));
        if self.t_start > self.t_stop || self.t_stop > crate::schema::MAX_MILLIS {
            return bad("time span must satisfy start <= stop <= 9999999999999");
        }
        if self.domains == 0 || !(self.zipf_s > 0.0) {
            return bad("need at least one domain and a positive Zipf exponent");
        }
        if self.field_count == 0 {
            return bad("events need at least one field");
        }
        Ok(())
    }
}

/// Name of the domain at popularity rank `rank` (1 = most popular).
pub fn domain_name(rank: usize) -> String {
    format!("site{rank:04}.example.com")
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GenerateStats {
    pub events: u64,
    pub bytes: u64,
    pub files: Vec<PathBuf>,
    /// Event count per domain rank; index 0 is rank 1.
    pub domain_counts: Vec<u64>,
}

impl GenerateStats {
    /// Ranks whose domains actually occur, most popular first.
    pub fn ranked_domains(&self) -> Vec<(String, u64)> {
        let mut v: Vec<(String, u64)> = self
            .domain_counts
            .iter()
            .enumerate()
            .filter(|(_, c)| **c > 0)
            .map(|(i, c)| (domain_name(i + 1), *c))
            .collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        v
    }
}

const STATUSES: [(u16, u32); 5] = [(200, 80), (304, 8), (404, 7), (302, 3), (500, 2)];

struct EventGen {
    rng: ChaCha8Rng,
    zipf: Zipf<f64>,
    spec: GeneratorSpec,
}

impl EventGen {
    fn line(&mut self, ts: u64, counts: &mut [u64]) -> String {
        let rank = (self.zipf.sample(&mut self.rng) as usize).clamp(1, self.spec.domains);
        counts[rank - 1] += 1;
        let rng = &mut self.rng;
        let host: u32 = rng.random_range(0..4096);
        let mut status = 200;
        let mut roll = rng.random_range(0..100);
        for (code, weight) in STATUSES {
            if roll < weight {
                status = code;
                break;
            }
            roll -= weight;
        }
        let mut obj = serde_json::Map::new();
        obj.insert("ts".into(), ts.into());
        for (i, name) in FIELD_ORDER.iter().enumerate().take(self.spec.field_count) {
            let v: serde_json::Value = match i {
                0 => domain_name(rank).into(),
                1 => format!("10.{}.{}.{}", host >> 8, host & 0xff, rng.random_range(1..255)).into(),
                2 => format!("198.51.{}.{}", (rank / 250) % 256, rank % 250 + 1).into(),
                3 => format!("/{}/item{}", ["img", "js", "api", "news", "search"][rng.random_range(0..5)], rng.random_range(0..200)).into(),
                4 => status.into(),
                _ => rng.random_range(200u32..200_000).into(),
            };
            obj.insert((*name).into(), v);
        }
        for i in FIELD_ORDER.len()..self.spec.field_count {
            obj.insert(format!("attr{}", i + 1), format!("v{}", rng.random_range(0..50)).into());
        }
        serde_json::Value::Object(obj).to_string()
    }
}

/// Writes `spec.event_count` events split across `files` files in `dir`
/// (or to `out` itself when `files` is 1). Timestamps are uniform over the
/// span and each file is in time order.
pub fn generate(spec: &GeneratorSpec, out: &Path, files: usize) -> io::Result<GenerateStats> {
    spec.validate()?;
    let files = files.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut stamps: Vec<u64> = (0..spec.event_count)
        .map(|_| rng.random_range(spec.t_start..=spec.t_stop))
        .collect();
    stamps.sort_unstable();
    let zipf = Zipf::new(spec.domains as f64, spec.zipf_s)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e.to_string()))?;
    let mut gen = EventGen {
        rng,
        zipf,
        spec: spec.clone(),
    };

    let paths: Vec<PathBuf> = if files == 1 {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        vec![out.to_path_buf()]
    } else {
        std::fs::create_dir_all(out)?;
        (0..files).map(|i| out.join(format!("part-{i:04}.jsonl"))).collect()
    };
    let mut stats = GenerateStats {
        domain_counts: vec![0; spec.domains],
        ..GenerateStats::default()
    };
    let n = stamps.len();
    for (i, path) in paths.iter().enumerate() {
        let mut w = BufWriter::new(File::create(path)?);
        for &ts in &stamps[i * n / files..(i + 1) * n / files] {
            let line = gen.line(ts, &mut stats.domain_counts);
            w.write_all(line.as_bytes())?;
            w.write_all(b"\n")?;
            stats.bytes += line.len() as u64 + 1;
            stats.events += 1;
        }
        w.flush()?;
    }
    stats.files = paths;
    Ok(stats)
}
