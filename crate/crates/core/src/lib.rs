//! Event-data pipeline: a tablet-partitioned sorted key-value store, a
//! sharded event/index/aggregate schema, parallel ingest with local
//! pre-aggregation, and adaptive batched queries with index-aware planning.

pub mod cli;
pub mod ingest;
pub mod kvstore;
pub mod query;
pub mod schema;
