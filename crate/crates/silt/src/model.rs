//! Shared vocabulary: schemas, typed cells, rows, and the global version
//! counter every other layer hangs off.
//!
//! Versions are plain u64s handed out by an atomic counter. Version 0 is
//! reserved to mean "visible since the beginning"; the first allocation
//! returns 1. Readers see exactly the writes with version <= their read
//! version, so the counter is the engine's logical clock.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

/// Cell types supported by the engine. The benchmark workload only ever
/// stores integers and strings, so that is all the encoders handle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellType {
    Int64,
    Utf8,
}

/// A typed cell value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Value {
    Int(i64),
    Str(String),
}

impl Value {
    pub fn cell_type(&self) -> CellType {
        match self {
            Value::Int(_) => CellType::Int64,
            Value::Str(_) => CellType::Utf8,
        }
    }

    /// Encoded payload size: 8 bytes per integer, the raw byte length for
    /// strings. Structure overhead is deliberately ignored so that size
    /// accounting is identical across storage layers.
    pub fn encoded_len(&self) -> u64 {
        match self {
            Value::Int(_) => 8,
            Value::Str(s) => s.len() as u64,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Value::Int(v) => Some(*v),
            Value::Str(_) => None,
        }
    }
}

/// Table schema: an ordered list of named, typed columns. Column 0 is
/// always the int64 primary key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    columns: Vec<(String, CellType)>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SchemaError {
    #[error("schema must have at least one column")]
    Empty,
    #[error("duplicate column name {0:?}")]
    DuplicateName(String),
    #[error("column 0 must be an int64 primary key")]
    BadKeyColumn,
}

impl Schema {
    pub fn new(columns: Vec<(String, CellType)>) -> Result<Self, SchemaError> {
        if columns.is_empty() {
            return Err(SchemaError::Empty);
        }
        if columns[0].1 != CellType::Int64 {
            return Err(SchemaError::BadKeyColumn);
        }
        for (i, (name, _)) in columns.iter().enumerate() {
            if columns[..i].iter().any(|(n, _)| n == name) {
                return Err(SchemaError::DuplicateName(name.clone()));
            }
        }
        Ok(Schema { columns })
    }

    pub fn columns(&self) -> &[(String, CellType)] {
        &self.columns
    }

    pub fn column_count(&self) -> usize {
        self.columns.len()
    }

    pub fn column_type(&self, ordinal: usize) -> CellType {
        self.columns[ordinal].1
    }

    /// The primary key is column 0 by construction.
    pub fn primary_key_index(&self) -> usize {
        0
    }
}

/// A row: the primary key plus one cell per schema column. Cell 0 must
/// equal the key; `validate_row` checks that along with arity and types.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Row {
    pub key: i64,
    pub cells: Vec<Value>,
}

impl Row {
    pub fn new(key: i64, cells: Vec<Value>) -> Self {
        Row { key, cells }
    }

    /// Encoded payload size of the whole row (keys + cells).
    pub fn encoded_len(&self) -> u64 {
        self.cells.iter().map(Value::encoded_len).sum()
    }
}

/// Why a row failed validation. Returned as a value, never thrown.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RowViolation {
    #[error("row has {got} cells, schema has {expected} columns")]
    Arity { expected: usize, got: usize },
    #[error("cell {ordinal} has type {got:?}, schema expects {expected:?}")]
    CellType {
        ordinal: usize,
        expected: CellType,
        got: CellType,
    },
    #[error("cell 0 is {cell0} but row key is {key}")]
    KeyMismatch { key: i64, cell0: i64 },
}

/// Pure structural check of a row against a schema.
pub fn validate_row(schema: &Schema, row: &Row) -> Result<(), RowViolation> {
    if row.cells.len() != schema.column_count() {
        return Err(RowViolation::Arity {
            expected: schema.column_count(),
            got: row.cells.len(),
        });
    }
    for (i, cell) in row.cells.iter().enumerate() {
        let expected = schema.column_type(i);
        if cell.cell_type() != expected {
            return Err(RowViolation::CellType {
                ordinal: i,
                expected,
                got: cell.cell_type(),
            });
        }
    }
    match row.cells[0] {
        Value::Int(cell0) if cell0 == row.key => Ok(()),
        Value::Int(cell0) => Err(RowViolation::KeyMismatch {
            key: row.key,
            cell0,
        }),
        // Unreachable given the type check above, but keep the match total.
        Value::Str(_) => Err(RowViolation::CellType {
            ordinal: 0,
            expected: CellType::Int64,
            got: CellType::Utf8,
        }),
    }
}

/// A write version. Strictly increasing per allocation, never reused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Version(pub u64);

impl Version {
    /// Visible to every reader.
    pub const ZERO: Version = Version(0);
}

impl fmt::Display for Version {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.0)
    }
}

/// Globally auto-incrementing version counter. Safe for concurrent
/// allocation; `next` values form a strictly increasing sequence.
#[derive(Debug, Default)]
pub struct VersionCounter {
    current: AtomicU64,
}

impl VersionCounter {
    pub fn new() -> Self {
        VersionCounter {
            current: AtomicU64::new(0),
        }
    }

    /// Resume counting after `already_allocated` (persistence restart).
    pub fn starting_at(already_allocated: u64) -> Self {
        VersionCounter {
            current: AtomicU64::new(already_allocated),
        }
    }

    pub fn next_version(&self) -> Version {
        let prev = self.current.fetch_add(1, Ordering::SeqCst);
        assert!(prev != u64::MAX, "version counter exhausted");
        Version(prev + 1)
    }

    /// Latest allocated version; what a fresh snapshot reads at.
    pub fn current(&self) -> Version {
        Version(self.current.load(Ordering::SeqCst))
    }
}

/// Engine-wide unique id source for tables, segments, and buckets.
#[derive(Debug, Default)]
pub struct IdAllocator {
    next: AtomicU64,
}

impl IdAllocator {
    pub fn new() -> Self {
        IdAllocator {
            next: AtomicU64::new(0),
        }
    }

    pub fn starting_at(already_allocated: u64) -> Self {
        IdAllocator {
            next: AtomicU64::new(already_allocated),
        }
    }

    pub fn next_id(&self) -> u64 {
        self.next.fetch_add(1, Ordering::Relaxed) + 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;
    use std::sync::Arc;

    fn small_schema() -> Schema {
        Schema::new(vec![
            ("col_0".into(), CellType::Int64),
            ("col_1".into(), CellType::Int64),
            ("col_2".into(), CellType::Utf8),
        ])
        .unwrap()
    }

    #[test]
    fn first_allocation_is_one() {
        let c = VersionCounter::new();
        assert_eq!(c.next_version(), Version(1));
    }

    #[test]
    fn fourth_allocation_is_four() {
        let c = VersionCounter::new();
        for _ in 0..3 {
            c.next_version();
        }
        assert_eq!(c.next_version(), Version(4));
    }

    #[test]
    fn concurrent_allocations_are_unique() {
        // Stress: 10^6 allocations across threads must all be distinct.
        let c = Arc::new(VersionCounter::new());
        let threads = 4;
        let per_thread = 250_000;
        let handles: Vec<_> = (0..threads)
            .map(|_| {
                let c = Arc::clone(&c);
                std::thread::spawn(move || {
                    let mut seen = Vec::with_capacity(per_thread);
                    for _ in 0..per_thread {
                        seen.push(c.next_version().0);
                    }
                    seen
                })
            })
            .collect();
        let mut all = HashSet::new();
        for h in handles {
            for v in h.join().unwrap() {
                assert!(all.insert(v), "version {v} allocated twice");
            }
        }
        assert_eq!(all.len(), threads * per_thread);
        assert_eq!(c.current(), Version((threads * per_thread) as u64));
    }

    #[test]
    fn validate_accepts_conforming_row() {
        let s = small_schema();
        let row = Row::new(5, vec![Value::Int(5), Value::Int(9), Value::Str("x".into())]);
        assert_eq!(validate_row(&s, &row), Ok(()));
    }

    #[test]
    fn validate_rejects_arity_mismatch() {
        let s = small_schema();
        let row = Row::new(5, vec![Value::Int(5), Value::Int(9)]);
        assert_eq!(
            validate_row(&s, &row),
            Err(RowViolation::Arity {
                expected: 3,
                got: 2
            })
        );
    }

    #[test]
    fn validate_rejects_key_mismatch() {
        let s = small_schema();
        let row = Row::new(7, vec![Value::Int(5), Value::Int(9), Value::Str("x".into())]);
        assert_eq!(
            validate_row(&s, &row),
            Err(RowViolation::KeyMismatch { key: 7, cell0: 5 })
        );
    }

    #[test]
    fn validate_rejects_wrong_cell_type() {
        let s = small_schema();
        let row = Row::new(5, vec![Value::Int(5), Value::Str("no".into()), Value::Str("x".into())]);
        assert!(matches!(
            validate_row(&s, &row),
            Err(RowViolation::CellType { ordinal: 1, .. })
        ));
    }
}
