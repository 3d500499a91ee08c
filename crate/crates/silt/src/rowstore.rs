//! The top storage layer: an ordered in-memory row table.
//!
//! Entries are keyed by (key asc, version desc) in a concurrent skip list,
//! so point reads resolve the newest visible version with a single range
//! probe and conversion walks rows in key order without sorting. Deletes
//! append versioned tombstones; the (key, version) pairs of tombstones are
//! also recorded in the DList so conversion can propagate invalidations to
//! lower layers without rescanning the table.
//!
//! A table admits the write that reaches its capacity and only then reports
//! itself full; the caller freezes it and opens a fresh active table.
//! Frozen tables are immutable and shared freely.

use std::cmp::Reverse;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use crossbeam_skiplist::SkipMap;
use parking_lot::Mutex;

use crate::bloom::BloomFilter;
use crate::model::{Row, Version};

/// Accounted size of a tombstone entry.
pub const TOMBSTONE_BYTES: u64 = 16;

/// What an entry holds: a full row or a delete marker.
#[derive(Debug, Clone)]
pub enum RowPayload {
    Row(Arc<Row>),
    Tombstone,
}

impl RowPayload {
    pub fn is_tombstone(&self) -> bool {
        matches!(self, RowPayload::Tombstone)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum RowTableError {
    #[error("row table is frozen")]
    Frozen,
}

/// Outcome of a successful put.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PutStatus {
    Ok,
    /// The write was admitted but the table is now at capacity; the caller
    /// must freeze it and open a new active table.
    Full,
}

/// Result of resolving a key at a read version.
#[derive(Debug, Clone)]
pub enum Lookup {
    Row(Arc<Row>),
    /// A tombstone with version <= read version: the key is deleted and
    /// merged reads must stop descending.
    Tombstone(Version),
    Absent,
}

pub struct RowTable {
    id: u64,
    entries: SkipMap<(i64, Reverse<u64>), RowPayload>,
    dlist: Mutex<Vec<(i64, Version)>>,
    bloom: BloomFilter,
    size_bytes: AtomicU64,
    capacity_bytes: u64,
    frozen: AtomicBool,
    entry_probes: AtomicU64,
}

impl RowTable {
    /// `expected_keys` sizes the Bloom filter (capacity / average row size
    /// estimate at creation).
    pub fn new(id: u64, capacity_bytes: u64, expected_keys: usize) -> Self {
        RowTable {
            id,
            entries: SkipMap::new(),
            dlist: Mutex::new(Vec::new()),
            bloom: BloomFilter::with_expected_keys(expected_keys),
            size_bytes: AtomicU64::new(0),
            capacity_bytes,
            frozen: AtomicBool::new(false),
            entry_probes: AtomicU64::new(0),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn size_bytes(&self) -> u64 {
        self.size_bytes.load(Ordering::Acquire)
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.capacity_bytes
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen.load(Ordering::Acquire)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry_count(&self) -> usize {
        self.entries.len()
    }

    /// How many skip-list probes reads have performed; Bloom-pruned misses
    /// never touch the entries at all.
    pub fn entry_probe_count(&self) -> u64 {
        self.entry_probes.load(Ordering::Relaxed)
    }

    pub fn put(&self, row: Arc<Row>, v: Version) -> Result<PutStatus, RowTableError> {
        if self.is_frozen() {
            return Err(RowTableError::Frozen);
        }
        let bytes = row.encoded_len();
        self.bloom.insert(row.key);
        self.entries.insert((row.key, Reverse(v.0)), RowPayload::Row(row));
        let total = self.size_bytes.fetch_add(bytes, Ordering::AcqRel) + bytes;
        if total >= self.capacity_bytes {
            Ok(PutStatus::Full)
        } else {
            Ok(PutStatus::Ok)
        }
    }

    /// Append a versioned delete marker. The marker may shadow a row in a
    /// lower layer, so it is legal for a key never written to this table.
    pub fn delete_mark(&self, key: i64, v: Version) -> Result<PutStatus, RowTableError> {
        if self.is_frozen() {
            return Err(RowTableError::Frozen);
        }
        self.bloom.insert(key);
        self.entries.insert((key, Reverse(v.0)), RowPayload::Tombstone);
        self.dlist.lock().push((key, v));
        let total = self.size_bytes.fetch_add(TOMBSTONE_BYTES, Ordering::AcqRel) + TOMBSTONE_BYTES;
        if total >= self.capacity_bytes {
            Ok(PutStatus::Full)
        } else {
            Ok(PutStatus::Ok)
        }
    }

    /// Resolve `key` at `read_v`: the payload with the largest version
    /// <= read_v wins. Tombstones are reported distinctly so merged reads
    /// stop descending layers.
    pub fn get(&self, key: i64, read_v: Version) -> Lookup {
        if !self.bloom.maybe_contains(key) {
            return Lookup::Absent;
        }
        self.entry_probes.fetch_add(1, Ordering::Relaxed);
        let range = (key, Reverse(read_v.0))..=(key, Reverse(0));
        match self.entries.range(range).next() {
            Some(entry) => {
                let version = Version(entry.key().1 .0);
                match entry.value() {
                    RowPayload::Row(row) => Lookup::Row(Arc::clone(row)),
                    RowPayload::Tombstone => Lookup::Tombstone(version),
                }
            }
            None => Lookup::Absent,
        }
    }

    /// Resolve `key` at `read_v` and also report the version of the winning
    /// entry. Used by the write path to locate old occurrences.
    pub fn get_versioned(&self, key: i64, read_v: Version) -> Option<(Version, RowPayload)> {
        if !self.bloom.maybe_contains(key) {
            return None;
        }
        self.entry_probes.fetch_add(1, Ordering::Relaxed);
        let range = (key, Reverse(read_v.0))..=(key, Reverse(0));
        self.entries
            .range(range)
            .next()
            .map(|e| (Version(e.key().1 .0), e.value().clone()))
    }

    /// Scan `[lo, hi)` resolved at `read_v`: strictly ascending keys, one
    /// entry per key (the newest with version <= read_v), tombstones
    /// included so callers can suppress lower layers.
    pub fn scan(&self, lo: i64, hi: Option<i64>, read_v: Version) -> Vec<(i64, RowPayload)> {
        let mut out = Vec::new();
        let mut last_key: Option<i64> = None;
        for entry in self.entries.range((lo, Reverse(u64::MAX))..) {
            let (key, Reverse(version)) = *entry.key();
            if let Some(h) = hi {
                if key >= h {
                    break;
                }
            }
            if last_key == Some(key) || version > read_v.0 {
                continue;
            }
            last_key = Some(key);
            out.push((key, entry.value().clone()));
        }
        out
    }

    /// Flip the table immutable. Idempotent; concurrent readers are
    /// unaffected.
    pub fn freeze(&self) {
        self.frozen.store(true, Ordering::Release);
    }

    /// All entries in (key asc, version desc) order. Conversion relies on
    /// this ordering to emit key-sorted rows for free.
    pub fn iter_entries(&self) -> impl Iterator<Item = ((i64, Version), RowPayload)> + '_ {
        self.entries
            .iter()
            .map(|e| ((e.key().0, Version(e.key().1 .0)), e.value().clone()))
    }

    /// Snapshot of the DList invalidation records.
    pub fn dlist_records(&self) -> Vec<(i64, Version)> {
        self.dlist.lock().clone()
    }

    pub fn maybe_contains(&self, key: i64) -> bool {
        self.bloom.maybe_contains(key)
    }
}

impl std::fmt::Debug for RowTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RowTable")
            .field("id", &self.id)
            .field("entries", &self.entries.len())
            .field("size_bytes", &self.size_bytes())
            .field("frozen", &self.is_frozen())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Value;
    use std::collections::BTreeMap;

    fn row(key: i64, payload: &str) -> Arc<Row> {
        Arc::new(Row::new(key, vec![Value::Int(key), Value::Str(payload.into())]))
    }

    fn table() -> RowTable {
        RowTable::new(1, 64 << 20, 1024)
    }

    #[test]
    fn read_your_write() {
        let t = table();
        t.put(row(5, "a"), Version(10)).unwrap();
        match t.get(5, Version(10)) {
            Lookup::Row(r) => assert_eq!(r.key, 5),
            other => panic!("expected row, got {other:?}"),
        }
    }

    #[test]
    fn version_ordering_on_get() {
        let t = table();
        t.put(row(7, "a"), Version(3)).unwrap();
        t.put(row(7, "b"), Version(7)).unwrap();
        match t.get(7, Version(5)) {
            Lookup::Row(r) => assert_eq!(r.cells[1], Value::Str("a".into())),
            other => panic!("{other:?}"),
        }
        match t.get(7, Version(7)) {
            Lookup::Row(r) => assert_eq!(r.cells[1], Value::Str("b".into())),
            other => panic!("{other:?}"),
        }
        assert!(matches!(t.get(7, Version(2)), Lookup::Absent));
    }

    #[test]
    fn tombstone_shadows_at_later_versions_only() {
        let t = table();
        t.put(row(9, "x"), Version(5)).unwrap();
        t.delete_mark(9, Version(8)).unwrap();
        assert!(matches!(t.get(9, Version(9)), Lookup::Tombstone(Version(8))));
        assert!(matches!(t.get(9, Version(6)), Lookup::Row(_)));
    }

    #[test]
    fn delete_mark_for_foreign_key_is_ok() {
        // The marker may shadow a lower layer; it need not match a local put.
        let t = table();
        t.delete_mark(123, Version(4)).unwrap();
        assert!(matches!(t.get(123, Version(5)), Lookup::Tombstone(_)));
        assert_eq!(t.dlist_records(), vec![(123, Version(4))]);
    }

    #[test]
    fn bloom_negative_skips_entry_probe() {
        let t = table();
        t.put(row(1, "a"), Version(1)).unwrap();
        let probes_before = t.entry_probe_count();
        // A key that was never inserted: overwhelmingly bloom-negative.
        // Probe many keys; at a <=2% fp rate nearly all skip the entries.
        let mut skipped = 0;
        for k in 10_000..20_000 {
            let before = t.entry_probe_count();
            let _ = t.get(k, Version(10));
            if t.entry_probe_count() == before {
                skipped += 1;
            }
        }
        assert!(skipped > 9_500, "bloom pruning ineffective: {skipped}");
        assert!(t.entry_probe_count() >= probes_before);
    }

    #[test]
    fn capacity_admits_then_reports_full() {
        let t = RowTable::new(1, 100, 16);
        // Rows encode to 9 bytes (8-byte int + 1-byte string): 11 puts stay
        // under 100 bytes, the 12th reaches 108 and is admitted-then-full.
        let mut status = PutStatus::Ok;
        let mut n = 0;
        for k in 0..100 {
            status = t.put(row(k, "x"), Version(k as u64 + 1)).unwrap();
            n += 1;
            if status == PutStatus::Full {
                break;
            }
        }
        assert_eq!(status, PutStatus::Full);
        assert_eq!(n, 12);
        assert_eq!(t.size_bytes(), 108);
    }

    #[test]
    fn frozen_table_rejects_mutation() {
        let t = table();
        t.put(row(1, "a"), Version(1)).unwrap();
        t.freeze();
        assert_eq!(t.put(row(2, "b"), Version(2)), Err(RowTableError::Frozen));
        assert_eq!(t.delete_mark(1, Version(3)), Err(RowTableError::Frozen));
        // Idempotent.
        t.freeze();
        assert!(t.is_frozen());
        assert!(matches!(t.get(1, Version(5)), Lookup::Row(_)));
    }

    #[test]
    fn scan_ranges_and_resolution() {
        let t = table();
        assert!(t.scan(i64::MIN, None, Version(100)).is_empty());
        for k in 1..=3 {
            t.put(row(k, "a"), Version(k as u64)).unwrap();
        }
        let hits = t.scan(2, Some(3), Version(100));
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].0, 2);

        // put@3 + tombstone@9 resolves to the tombstone at read 10.
        t.put(row(10, "z"), Version(3)).unwrap();
        t.delete_mark(10, Version(9)).unwrap();
        let hits = t.scan(10, Some(11), Version(10));
        assert_eq!(hits.len(), 1);
        assert!(hits[0].1.is_tombstone());
    }

    /// Oracle equivalence: any interleaving of puts and delete marks must
    /// resolve exactly like a naive map replaying operations with
    /// version <= read_v.
    #[test]
    fn get_matches_naive_replay_oracle() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let t = table();
        // oracle: key -> BTreeMap<version, Option<payload>>
        let mut oracle: BTreeMap<i64, BTreeMap<u64, Option<String>>> = BTreeMap::new();
        for v in 1..=2000u64 {
            let key = rng.gen_range(0..50);
            if rng.gen_bool(0.3) {
                t.delete_mark(key, Version(v)).unwrap();
                oracle.entry(key).or_default().insert(v, None);
            } else {
                let payload = format!("p{v}");
                t.put(row(key, &payload), Version(v)).unwrap();
                oracle.entry(key).or_default().insert(v, Some(payload));
            }
        }
        for _ in 0..2000 {
            let key = rng.gen_range(0..50);
            let read_v = rng.gen_range(0..2100u64);
            let expected = oracle
                .get(&key)
                .and_then(|m| m.range(..=read_v).next_back())
                .map(|(_, p)| p.clone());
            match (t.get(key, Version(read_v)), expected) {
                (Lookup::Absent, None) => {}
                (Lookup::Tombstone(_), Some(None)) => {}
                (Lookup::Row(r), Some(Some(p))) => {
                    assert_eq!(r.cells[1], Value::Str(p));
                }
                (got, want) => panic!("key {key} at v{read_v}: got {got:?}, want {want:?}"),
            }
        }
    }

    #[test]
    fn scan_is_ascending_and_duplicate_free() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let t = table();
        for v in 1..=500u64 {
            let key = rng.gen_range(0..40);
            t.put(row(key, "x"), Version(v)).unwrap();
        }
        let hits = t.scan(i64::MIN, None, Version(500));
        for pair in hits.windows(2) {
            assert!(pair[0].0 < pair[1].0);
        }
    }

    #[test]
    fn freeze_preserves_reader_snapshots() {
        let t = Arc::new(table());
        for k in 0..100 {
            t.put(row(k, "a"), Version(k as u64 + 1)).unwrap();
        }
        let before: Vec<_> = t
            .scan(i64::MIN, None, Version(1000))
            .iter()
            .map(|(k, _)| *k)
            .collect();
        t.freeze();
        let after: Vec<_> = t
            .scan(i64::MIN, None, Version(1000))
            .iter()
            .map(|(k, _)| *k)
            .collect();
        assert_eq!(before, after);
    }
}
