//! Adaptive time-range batching.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::QueryError;

/// Tuning for adaptive batching. Runtimes are in seconds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchParams {
    pub k0: f64,
    pub c: f64,
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for BatchParams {
    fn default() -> Self {
        Self {
            k0: 10.0,
            c: 1.5,
            t_min: 1.0,
            t_max: 30.0,
        }
    }
}

impl BatchParams {
    pub fn validate(&self) -> Result<(), QueryError> {
        let ok = self.k0 >= 1.0 && self.c > 0.0 && self.t_min > 0.0 && self.t_max >= self.t_min;
        if !ok || [self.k0, self.c, self.t_min, self.t_max].iter().any(|x| !x.is_finite()) {
            return Err(QueryError::InvalidState(format!("bad batch parameters {self:?}")));
        }
        Ok(())
    }
}

/// Position and size of the next batch. Times are epoch milliseconds and
/// the batch covers `[p, p + b]` inclusive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchState {
    pub p: u64,
    pub b: u64,
    pub k: f64,
    pub t_stop: u64,
    pub params: BatchParams,
}

/// Minimum time resolution, in milliseconds.
pub const EPSILON_MS: u64 = 1;

impl BatchState {
    pub fn new(params: BatchParams, t_start: u64, t_stop: u64, b0: u64) -> Result<Self, QueryError> {
        params.validate()?;
        if t_start > t_stop {
            return Err(QueryError::InvalidQuery(format!("tStart {t_start} > tStop {t_stop}")));
        }
        if b0 == 0 {
            return Err(QueryError::InvalidState("initial batch size must be positive".into()));
        }
        Ok(Self {
            p: t_start,
            b: b0,
            k: params.k0,
            t_stop,
            params,
        })
    }

    /// The window of the current batch, cut off at `t_stop`.
    pub fn window(&self) -> (u64, u64) {
        (self.p, self.p.saturating_add(self.b).min(self.t_stop))
    }

    pub fn done(&self) -> bool {
        self.p > self.t_stop
    }
}

/// Sizes the next batch from the last one's runtime `t` (seconds) and row
/// count `r`. When nothing was returned the row target is kept and the
/// window grows fourfold.
pub fn update_batch(state: &BatchState, t: f64, r: u64) -> Result<BatchState, QueryError> {
    if state.b == 0 {
        return Err(QueryError::InvalidState("batch size must be positive".into()));
    }
    if !(t > 0.0 && t.is_finite()) {
        return Err(QueryError::InvalidState(format!("batch runtime must be positive, got {t}")));
    }
    let BatchParams { c, t_min, t_max, .. } = state.params;
    let remaining = state.t_stop.saturating_sub(state.p);
    let (k, b) = if r == 0 {
        (state.k, state.b.saturating_mul(4).min(remaining))
    } else {
        let r = r as f64;
        let mut k = c * state.k;
        let estimate = k * (t / r);
        if estimate > t_max {
            k = t_max * (r / t);
        } else if estimate < t_min {
            k = t_min * (r / t);
        }
        let k = k.max(1.0);
        // tolerate float noise just below an integer before flooring
        let b = (k * (state.b as f64 / r) + 1e-9).floor();
        (k, (b.min(u64::MAX as f64) as u64).min(remaining))
    };
    Ok(BatchState {
        p: state.p + state.b + EPSILON_MS,
        b: b.max(1),
        k,
        ..*state
    })
}

/// One executed batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BatchRecord {
    pub start: u64,
    pub stop: u64,
    pub runtime_s: f64,
    pub rows: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct BatchStats {
    pub batches: usize,
    pub rows: u64,
    pub per_batch: Vec<BatchRecord>,
}

/// Drives batches over `[state.p, state.t_stop]` until the position passes
/// `t_stop`. `exec` runs one window and reports `(seconds, rows)`.
pub fn run_batches<F>(mut state: BatchState, mut exec: F) -> Result<BatchStats, QueryError>
where
    F: FnMut(u64, u64) -> Result<(f64, u64), QueryError>,
{
    let mut stats = BatchStats::default();
    while !state.done() {
        let (start, stop) = state.window();
        let (t, r) = exec(start, stop)?;
        stats.batches += 1;
        stats.rows += r;
        stats.per_batch.push(BatchRecord {
            start,
            stop,
            runtime_s: t,
            rows: r,
        });
        if stop >= state.t_stop {
            break;
        }
        state = update_batch(&state, t.max(1e-9), r)?;
    }
    Ok(stats)
}

/// Default first-batch span when a table has no recorded hit rate.
pub const COLD_START_BATCH_MS: u64 = 60_000;

/// Per-table hit rates in rows per second of queried time, smoothed
/// exponentially across queries.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HitRates(BTreeMap<String, f64>);

impl HitRates {
    pub const ALPHA: f64 = 0.5;

    pub fn load(path: &Path) -> Result<Self, QueryError> {
        match std::fs::read(path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| QueryError::InvalidQuery(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(e.into()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), QueryError> {
        let json = serde_json::to_vec_pretty(self).expect("hit rates serialize");
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn get(&self, table: &str) -> Option<f64> {
        self.0.get(table).copied()
    }

    pub fn set(&mut self, table: &str, rate: f64) {
        self.0.insert(table.to_string(), rate);
    }

    /// Folds in a query that returned `rows` over the inclusive span
    /// `[start, stop]`.
    pub fn observe(&mut self, table: &str, rows: u64, start: u64, stop: u64) {
        let secs = (stop.saturating_sub(start) + 1) as f64 / 1000.0;
        let h = rows as f64 / secs;
        let next = match self.get(table) {
            Some(old) => Self::ALPHA * h + (1.0 - Self::ALPHA) * old,
            None => h,
        };
        self.set(table, next);
    }

    /// `k0 / h` in milliseconds, or the cold-start default.
    pub fn initial_batch_ms(&self, table: &str, k0: f64) -> u64 {
        match self.get(table) {
            Some(h) if h > 0.0 && h.is_finite() => ((k0 / h) * 1000.0).round().max(1.0) as u64,
            _ => COLD_START_BATCH_MS,
        }
    }
}
