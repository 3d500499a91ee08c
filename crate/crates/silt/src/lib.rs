//! An embedded storage engine for hybrid workloads.
//!
//! Writes land in an ordered in-memory row table; frozen tables are
//! converted to immutable columnar segments in the background, flow through
//! a bucketed transition layer, and settle into disjoint baseline segments.
//! Reads run against reference-counted immutable layout snapshots, so
//! background work never blocks them. A cost-model scheduler decides when
//! idle cores exist for conversion and compaction work.

pub mod bitmap;
pub mod engine;
pub mod bloom;
pub mod compaction;
pub mod format;
pub mod layout;
pub mod manifest;
pub mod merge;
pub mod model;
pub mod oracle;
pub mod rowstore;
pub mod scheduler;
pub mod segment;
