//! Naive versioned-map reference model.
//!
//! A deliberately simple single-threaded replay of every write event,
//! independent of the engine's layered storage: key -> version -> payload
//! (None for deletes). The test suites and the benchmark verification pass
//! compare engine reads against this model at arbitrary read versions.

use std::collections::BTreeMap;

use crate::model::{Row, Version};

#[derive(Debug, Default, Clone)]
pub struct ReferenceTable {
    events: BTreeMap<i64, BTreeMap<u64, Option<Row>>>,
}

impl ReferenceTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_put(&mut self, row: Row, v: Version) {
        self.events
            .entry(row.key)
            .or_default()
            .insert(v.0, Some(row));
    }

    pub fn record_delete(&mut self, key: i64, v: Version) {
        self.events.entry(key).or_default().insert(v.0, None);
    }

    /// Newest payload with version <= read_v.
    pub fn get(&self, key: i64, read_v: Version) -> Option<&Row> {
        self.events
            .get(&key)?
            .range(..=read_v.0)
            .next_back()?
            .1
            .as_ref()
    }

    /// Ascending visible rows in `[lo, hi)` at `read_v`.
    pub fn scan(&self, lo: i64, hi: Option<i64>, read_v: Version) -> Vec<(i64, &Row)> {
        let mut out = Vec::new();
        for (&key, versions) in self.events.range(lo..) {
            if let Some(h) = hi {
                if key >= h {
                    break;
                }
            }
            if let Some((_, Some(row))) = versions.range(..=read_v.0).next_back() {
                out.push((key, row));
            }
        }
        out
    }

    pub fn visible_key_count(&self, read_v: Version) -> usize {
        self.scan(i64::MIN, None, read_v).len()
    }

    pub fn keys(&self) -> impl Iterator<Item = i64> + '_ {
        self.events.keys().copied()
    }
}
