//! Query processing over the event, index and aggregate tables.

mod batch;
mod exec;
mod filter;
mod planner;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::kvstore::KvError;
use crate::schema::{SchemaError, Timestamp};

pub use batch::{
    run_batches, update_batch, BatchParams, BatchRecord, BatchState, BatchStats, HitRates, COLD_START_BATCH_MS,
    EPSILON_MS,
};
pub use exec::{
    batched_query, batched_query_with_plan, estimate_density, execute_plan, index_lookup, plan, run_strategy, ExecStats, QueryContext,
    StrategyOutcome,
};
pub use filter::{compare, eval_filter, CmpOp, Fields, FilterTree, Pattern};
pub use planner::{plan_with, IndexCondition, PlanMode, PlannerConfig, QueryPlan};

#[derive(Debug, Error)]
#[error("result sink failed: {0}")]
pub struct SinkError(pub String);

impl From<std::io::Error> for SinkError {
    fn from(e: std::io::Error) -> Self {
        SinkError(e.to_string())
    }
}

#[derive(Debug, Error)]
pub enum QueryError {
    #[error("invalid batch state: {0}")]
    InvalidState(String),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("invalid filter: {0}")]
    InvalidFilter(String),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Sink(#[from] SinkError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// A query over one event table. Times are inclusive epoch milliseconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Query {
    pub table: String,
    pub t_start: u64,
    pub t_stop: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projection: Option<BTreeSet<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter: Option<FilterTree>,
}

impl Query {
    pub fn new(table: impl Into<String>, t_start: u64, t_stop: u64) -> Self {
        Self {
            table: table.into(),
            t_start,
            t_stop,
            projection: None,
            filter: None,
        }
    }

    pub fn with_filter(mut self, filter: FilterTree) -> Self {
        self.filter = Some(filter);
        self
    }

    pub fn with_projection<I: IntoIterator<Item = S>, S: Into<String>>(mut self, fields: I) -> Self {
        self.projection = Some(fields.into_iter().map(Into::into).collect());
        self
    }

    pub fn from_json(s: &str) -> Result<Self, QueryError> {
        let q: Query = serde_json::from_str(s).map_err(|e| QueryError::InvalidQuery(e.to_string()))?;
        q.validate()?;
        Ok(q)
    }

    pub fn time_range(&self) -> Result<(Timestamp, Timestamp), QueryError> {
        let start = Timestamp::new(self.t_start)?;
        let stop = Timestamp::new(self.t_stop)?;
        if start > stop {
            return Err(SchemaError::InvalidTimeRange { start: self.t_start, stop: self.t_stop }.into());
        }
        Ok((start, stop))
    }

    pub fn validate(&self) -> Result<(), QueryError> {
        self.time_range()?;
        if self.projection.as_ref().is_some_and(BTreeSet::is_empty) {
            return Err(QueryError::InvalidQuery("projection must name at least one field".into()));
        }
        if let Some(f) = &self.filter {
            f.validate()?;
        }
        Ok(())
    }
}

/// One reassembled event row.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ResultRow {
    pub event_row: String,
    pub ts: u64,
    pub fields: BTreeMap<String, String>,
}

impl ResultRow {
    pub fn to_json(&self) -> Value {
        let mut obj = serde_json::Map::new();
        obj.insert("eventRow".into(), Value::String(self.event_row.clone()));
        obj.insert("ts".into(), Value::from(self.ts));
        for (k, v) in &self.fields {
            obj.entry(k.clone()).or_insert_with(|| Value::String(v.clone()));
        }
        Value::Object(obj)
    }
}

/// Receives result rows as they are produced; an error aborts the query.
pub trait RowSink {
    fn accept(&mut self, row: ResultRow) -> Result<(), SinkError>;
}

impl<F: FnMut(ResultRow) -> Result<(), SinkError>> RowSink for F {
    fn accept(&mut self, row: ResultRow) -> Result<(), SinkError> {
        self(row)
    }
}

/// The four execution schemes compared by the benchmark.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Strategy {
    Scan,
    BatchedScan,
    Index,
    BatchedIndex,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Scan, Strategy::BatchedScan, Strategy::Index, Strategy::BatchedIndex];

    pub fn batched(self) -> bool {
        matches!(self, Strategy::BatchedScan | Strategy::BatchedIndex)
    }

    pub fn uses_index(self) -> bool {
        matches!(self, Strategy::Index | Strategy::BatchedIndex)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Scan => "Scan",
            Strategy::BatchedScan => "BatchedScan",
            Strategy::Index => "Index",
            Strategy::BatchedIndex => "BatchedIndex",
        })
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let norm: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        Strategy::ALL
            .into_iter()
            .find(|st| st.to_string().to_ascii_lowercase() == norm)
            .ok_or_else(|| format!("unknown strategy {s:?}; expected scan, batched-scan, index or batched-index"))
    }
}
