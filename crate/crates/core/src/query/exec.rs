//! Plan execution against the three tables.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::Arc;
use std::time::Instant;

use bytes::Bytes;
use serde::Serialize;

use super::batch::{run_batches, BatchParams, BatchRecord, BatchState, BatchStats};
use super::filter::{eval_filter, FilterTree};
use super::planner::{plan_with, PlanMode, PlannerConfig, QueryPlan};
use super::{Query, QueryError, ResultRow, RowSink, Strategy};
use crate::ingest::SourceTables;
use crate::kvstore::{Entry, RowFilter, RowRange, ScanSpec, Store, Table};
use crossbeam_channel::Sender;
use crate::schema::{self, ShardConfig, Timestamp, TOTAL_FIELD};

/// Everything needed to run queries against one source's tables.
pub struct QueryContext<'a> {
    pub store: &'a Store,
    pub tables: SourceTables,
    pub shards: ShardConfig,
    pub planner: PlannerConfig,
}

impl<'a> QueryContext<'a> {
    /// `event_table` must be named `event_<source>`.
    pub fn new(store: &'a Store, event_table: &str, shards: ShardConfig) -> Result<Self, QueryError> {
        let source = event_table
            .strip_prefix("event_")
            .filter(|s| !s.is_empty())
            .ok_or_else(|| QueryError::InvalidQuery(format!("{event_table:?} is not an event table")))?;
        Ok(Self {
            store,
            tables: SourceTables::for_source(source),
            shards,
            planner: PlannerConfig::default(),
        })
    }

    pub fn with_planner(mut self, planner: PlannerConfig) -> Self {
        self.planner = planner;
        self
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ExecStats {
    pub rows: u64,
    pub index_lookups: u64,
    pub index_hits: u64,
    /// Event rows requested by key after index lookups.
    pub fetched_rows: u64,
    pub event_scans: u64,
}

fn bucket_sum(ctx: &QueryContext<'_>, row: &str, lo: &str, hi: &str) -> Result<u64, QueryError> {
    let spec = ScanSpec::new(ctx.tables.aggregate.clone(), RowRange::exact(row));
    let mut sum = 0u64;
    for e in ctx.store.scan(spec)? {
        let colq = std::str::from_utf8(&e.colq).unwrap_or("");
        if colq >= lo && colq <= hi {
            sum += std::str::from_utf8(&e.value)
                .ok()
                .and_then(|v| v.parse::<u64>().ok())
                .unwrap_or(0);
        }
    }
    Ok(sum)
}

/// Fraction of events in the hour buckets overlapping `[start, stop]` that
/// have `field = value`.
pub fn estimate_density(
    ctx: &QueryContext<'_>,
    field: &str,
    value: &str,
    start: Timestamp,
    stop: Timestamp,
) -> Result<f64, QueryError> {
    let lo = format!("{:013}", start.hour_bucket().millis());
    let hi = format!("{:013}", stop.hour_bucket().millis());
    let row = |f: &str, v: &str| schema::aggregate_row(schema::aggregate_shard(f, v, ctx.shards), f, v);
    let total = bucket_sum(ctx, &row(TOTAL_FIELD, ""), &lo, &hi)?;
    if total == 0 {
        return Ok(0.0);
    }
    let hits = bucket_sum(ctx, &row(field, value), &lo, &hi)?;
    Ok(hits as f64 / total as f64)
}

/// Event row IDs with `field = value` and a timestamp in `[start, stop]`.
pub fn index_lookup(
    ctx: &QueryContext<'_>,
    field: &str,
    value: &str,
    start: Timestamp,
    stop: Timestamp,
) -> Result<BTreeSet<Bytes>, QueryError> {
    let table = ctx.store.table(&ctx.tables.index)?;
    let ranges = ctx
        .shards
        .shards()
        .map(|s| schema::index_row_range(s, field, value, start, stop))
        .collect::<Result<Vec<_>, _>>()?;
    let mut ids = BTreeSet::new();
    for e in ctx.store.batch_scan(&table, &ranges, None, None)? {
        ids.insert(e.colq);
    }
    Ok(ids)
}

pub fn plan(
    ctx: &QueryContext<'_>,
    filter: Option<&FilterTree>,
    start: Timestamp,
    stop: Timestamp,
) -> Result<QueryPlan, QueryError> {
    plan_with(filter, &ctx.planner, |f, v| estimate_density(ctx, f, v, start, stop))
}

fn server_filter(tree: Option<&FilterTree>) -> Option<Arc<dyn RowFilter>> {
    let tree = tree?.clone();
    Some(Arc::new(move |_row: &[u8], cells: &[Entry]| eval_filter(&tree, cells)))
}

/// Row fetches per tablet start with a single row and grow fourfold up to
/// this many rows per request, so the first rows come back quickly without
/// flooding the scan pool with tiny requests.
pub const FETCH_CHUNK_MAX: usize = 128;

/// Runs `plan` over `[start, stop]`, streaming rows to `sink` as tablets
/// deliver them.
pub fn execute_plan(
    ctx: &QueryContext<'_>,
    plan: &QueryPlan,
    start: Timestamp,
    stop: Timestamp,
    projection: Option<&BTreeSet<String>>,
    sink: &mut dyn RowSink,
) -> Result<ExecStats, QueryError> {
    let mut stats = ExecStats::default();
    let events = ctx.store.table(&ctx.tables.event)?;
    let residual = server_filter(plan.residual.as_ref());
    match plan.mode {
        PlanMode::FullScanFilter => {
            let ranges = ctx
                .shards
                .shards()
                .map(|s| schema::event_row_range(s, start, stop))
                .collect::<Result<Vec<_>, _>>()?;
            stats.event_scans += 1;
            let mut stream = ctx.store.batch_scan(&events, &ranges, None, residual)?;
            while let Some(buf) = stream.next_buffer() {
                stats.rows += emit(&buf, projection, sink)?;
            }
            Ok(stats)
        }
        PlanMode::IndexSingle | PlanMode::IndexUnion => fetch_while_indexing(ctx, plan, start, stop, projection, sink),
        PlanMode::IndexIntersectThenFilter => {
            let mut ids: Option<BTreeSet<Bytes>> = None;
            for c in &plan.index_conditions {
                let found = index_lookup(ctx, &c.field, &c.value, start, stop)?;
                stats.index_lookups += 1;
                stats.index_hits += found.len() as u64;
                let acc = match ids {
                    None => found,
                    Some(acc) => acc.intersection(&found).cloned().collect(),
                };
                let empty = acc.is_empty();
                ids = Some(acc);
                if empty {
                    break;
                }
            }
            let ids = ids.unwrap_or_default();
            if ids.is_empty() {
                return Ok(stats);
            }
            let (tx, rx) = crossbeam_channel::unbounded();
            fetch_rows(ctx, &events, ids, residual, &tx, &mut stats)?;
            drop(tx);
            for buf in rx {
                stats.rows += emit(&buf, projection, sink)?;
            }
            Ok(stats)
        }
    }
}

/// Requests the given event rows, grouped by tablet, in growing chunks.
fn fetch_rows(
    ctx: &QueryContext<'_>,
    events: &Table,
    rows: impl IntoIterator<Item = Bytes>,
    residual: Option<Arc<dyn RowFilter>>,
    tx: &Sender<Vec<Entry>>,
    stats: &mut ExecStats,
) -> Result<(), QueryError> {
    let mut by_tablet: BTreeMap<usize, Vec<RowRange>> = BTreeMap::new();
    for row in rows {
        by_tablet.entry(events.tablet_for(&row)).or_default().push(RowRange::exact(&row));
        stats.fetched_rows += 1;
    }
    for ranges in by_tablet.values() {
        let mut rest = ranges.as_slice();
        let mut size = 1;
        while !rest.is_empty() {
            let (head, tail) = rest.split_at(size.min(rest.len()));
            ctx.store.batch_scan_into(events, head, None, residual.clone(), tx.clone())?;
            stats.event_scans += 1;
            rest = tail;
            size = (size * 4).min(FETCH_CHUNK_MAX);
        }
    }
    Ok(())
}

fn emit(buf: &[Entry], projection: Option<&BTreeSet<String>>, sink: &mut dyn RowSink) -> Result<u64, QueryError> {
    let mut n = 0;
    for row in buf.chunk_by(|a, b| a.row == b.row) {
        sink.accept(reassemble(row, projection)?)?;
        n += 1;
    }
    Ok(n)
}

/// Union plans need no complete key set, so each index buffer's new row IDs
/// are fetched as soon as it arrives while other shards are still being
/// looked up.
fn fetch_while_indexing(
    ctx: &QueryContext<'_>,
    plan: &QueryPlan,
    start: Timestamp,
    stop: Timestamp,
    projection: Option<&BTreeSet<String>>,
    sink: &mut dyn RowSink,
) -> Result<ExecStats, QueryError> {
    let mut stats = ExecStats::default();
    let index = ctx.store.table(&ctx.tables.index)?;
    let events = ctx.store.table(&ctx.tables.event)?;
    let (index_tx, index_rx) = crossbeam_channel::unbounded();
    for c in &plan.index_conditions {
        let ranges = ctx
            .shards
            .shards()
            .map(|s| schema::index_row_range(s, &c.field, &c.value, start, stop))
            .collect::<Result<Vec<_>, _>>()?;
        ctx.store.batch_scan_into(&index, &ranges, None, None, index_tx.clone())?;
        stats.index_lookups += 1;
    }
    drop(index_tx);

    let (row_tx, row_rx) = crossbeam_channel::unbounded::<Vec<Entry>>();
    let mut row_tx = Some(row_tx);
    let mut seen: HashSet<Bytes> = HashSet::new();
    loop {
        let Some(tx) = &row_tx else {
            match row_rx.recv() {
                Ok(buf) => stats.rows += emit(&buf, projection, sink)?,
                Err(_) => break,
            }
            continue;
        };
        crossbeam_channel::select! {
            recv(index_rx) -> msg => match msg {
                Ok(buf) => {
                    stats.index_hits += buf.len() as u64;
                    let fresh: Vec<Bytes> = buf
                        .into_iter()
                        .map(|e| e.colq)
                        .filter(|id| seen.insert(id.clone()))
                        .collect();
                    fetch_rows(ctx, &events, fresh, None, tx, &mut stats)?;
                }
                Err(_) => row_tx = None,
            },
            recv(row_rx) -> msg => {
                if let Ok(buf) = msg {
                    stats.rows += emit(&buf, projection, sink)?;
                }
            }
        }
    }
    Ok(stats)
}

fn reassemble(cells: &[Entry], projection: Option<&BTreeSet<String>>) -> Result<ResultRow, QueryError> {
    let row = &cells[0].row;
    let (_, ts, _) = schema::decode_event_key(row)?;
    let fields: BTreeMap<String, String> = cells
        .iter()
        .map(|e| (String::from_utf8_lossy(&e.colq).into_owned(), String::from_utf8_lossy(&e.value).into_owned()))
        .filter(|(k, _)| projection.is_none_or(|p| p.contains(k)))
        .collect();
    Ok(ResultRow {
        event_row: String::from_utf8_lossy(row).into_owned(),
        ts: ts.millis(),
        fields,
    })
}

fn check_table(ctx: &QueryContext<'_>, query: &Query) -> Result<(Timestamp, Timestamp), QueryError> {
    query.validate()?;
    if query.table != ctx.tables.event {
        return Err(QueryError::InvalidQuery(format!(
            "query targets {} but the context serves {}",
            query.table, ctx.tables.event
        )));
    }
    query.time_range()
}

/// Executes `plan` window by window, sizing each window from the last.
pub fn batched_query_with_plan(
    ctx: &QueryContext<'_>,
    query: &Query,
    plan: &QueryPlan,
    params: BatchParams,
    b0: u64,
    sink: &mut dyn RowSink,
) -> Result<BatchStats, QueryError> {
    let (start, stop) = check_table(ctx, query)?;
    let state = BatchState::new(params, start.millis(), stop.millis(), b0)?;
    run_batches(state, |lo, hi| {
        let t0 = Instant::now();
        let s = execute_plan(
            ctx,
            plan,
            Timestamp::new(lo)?,
            Timestamp::new(hi)?,
            query.projection.as_ref(),
            sink,
        )?;
        Ok((t0.elapsed().as_secs_f64(), s.rows))
    })
}

/// Plans once over the whole range, then runs batches with initial span `b0`
/// milliseconds.
pub fn batched_query(
    ctx: &QueryContext<'_>,
    query: &Query,
    params: BatchParams,
    b0: u64,
    sink: &mut dyn RowSink,
) -> Result<BatchStats, QueryError> {
    let (start, stop) = check_table(ctx, query)?;
    let p = plan(ctx, query.filter.as_ref(), start, stop)?;
    batched_query_with_plan(ctx, query, &p, params, b0, sink)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StrategyOutcome {
    pub mode: PlanMode,
    pub batches: BatchStats,
}

/// Runs `query` under one of the four schemes. Scan strategies ignore the
/// index and filter every event row in range.
pub fn run_strategy(
    ctx: &QueryContext<'_>,
    query: &Query,
    strategy: Strategy,
    params: BatchParams,
    b0: u64,
    sink: &mut dyn RowSink,
) -> Result<StrategyOutcome, QueryError> {
    let (start, stop) = check_table(ctx, query)?;
    let p = if strategy.uses_index() {
        plan(ctx, query.filter.as_ref(), start, stop)?
    } else {
        QueryPlan::full_scan(query.filter.clone())
    };
    let batches = if strategy.batched() {
        batched_query_with_plan(ctx, query, &p, params, b0, sink)?
    } else {
        let t0 = Instant::now();
        let s = execute_plan(ctx, &p, start, stop, query.projection.as_ref(), sink)?;
        BatchStats {
            batches: 1,
            rows: s.rows,
            per_batch: vec![BatchRecord {
                start: start.millis(),
                stop: stop.millis(),
                runtime_s: t0.elapsed().as_secs_f64(),
                rows: s.rows,
            }],
        }
    };
    Ok(StrategyOutcome { mode: p.mode, batches })
}
