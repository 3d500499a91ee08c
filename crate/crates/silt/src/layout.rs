//! Immutable engine snapshots and their lifecycle.
//!
//! A `Layout` is one version of every table across the four storage layers
//! (active row table, frozen row tables, delta segments, transition buckets,
//! baseline). Publication is copy-on-write: background tasks compute their
//! outputs off to the side, then install a structurally edited copy under a
//! serializing lock. Readers acquire the latest layout together with a read
//! version; the pair is what makes segment-resident rows version-free — a
//! layout only ever becomes visible to read versions at or above every
//! write it contains.
//!
//! Retired layouts are destroyed when their reference count drops to zero,
//! at which point shared delete chains are garbage collected against the
//! minimum read version still held by live snapshots.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};

use crate::model::{IdAllocator, Schema, Version, VersionCounter};
use crate::rowstore::RowTable;
use crate::segment::{build_segments, ColumnSegment, SourceRow};

/// Half-open key range `[lo, hi)`; `hi = None` means unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyRange {
    pub lo: i64,
    pub hi: Option<i64>,
}

impl KeyRange {
    pub fn all() -> Self {
        KeyRange {
            lo: i64::MIN,
            hi: None,
        }
    }

    pub fn contains(&self, key: i64) -> bool {
        key >= self.lo && self.hi.map(|h| key < h).unwrap_or(true)
    }
}

/// A transition-layer range partition. Segments inside may overlap each
/// other; the bucket range never overlaps another bucket. `covered_baseline`
/// lists the baseline segments this bucket's range covers.
#[derive(Debug, Clone)]
pub struct ColumnBucket {
    pub bucket_id: u64,
    pub range: KeyRange,
    pub segments: Vec<Arc<ColumnSegment>>,
    pub covered_baseline: Vec<u64>,
}

impl ColumnBucket {
    /// Total bytes resident in the bucket (the paper's Gamma_i term).
    pub fn data_bytes(&self) -> u64 {
        self.segments.iter().map(|s| s.size_bytes()).sum()
    }
}

/// One logical table's storage across the four layers.
#[derive(Debug, Clone)]
pub struct TableLayout {
    pub active: Arc<RowTable>,
    /// Oldest first; conversion consumes from the front.
    pub frozen: Vec<Arc<RowTable>>,
    /// Ascending create version (oldest first).
    pub delta: Vec<Arc<ColumnSegment>>,
    /// Sorted by range lo; disjoint; covers the whole key domain.
    pub buckets: Vec<ColumnBucket>,
    /// Key-sorted, pairwise disjoint.
    pub baseline: Vec<Arc<ColumnSegment>>,
}

impl TableLayout {
    pub fn new(active: Arc<RowTable>, first_bucket_id: u64) -> Self {
        TableLayout {
            active,
            frozen: Vec::new(),
            delta: Vec::new(),
            buckets: vec![ColumnBucket {
                bucket_id: first_bucket_id,
                range: KeyRange::all(),
                segments: Vec::new(),
                covered_baseline: Vec::new(),
            }],
            baseline: Vec::new(),
        }
    }

    /// The unique bucket whose half-open range contains `key`.
    pub fn route_bucket(&self, key: i64) -> &ColumnBucket {
        let idx = self.buckets.partition_point(|b| b.range.lo <= key);
        debug_assert!(idx > 0, "buckets must cover the key domain");
        let b = &self.buckets[idx - 1];
        debug_assert!(b.range.contains(key));
        b
    }

    pub fn bucket_by_id(&self, bucket_id: u64) -> Option<&ColumnBucket> {
        self.buckets.iter().find(|b| b.bucket_id == bucket_id)
    }

    pub fn delta_bytes(&self) -> u64 {
        self.delta.iter().map(|s| s.size_bytes()).sum()
    }

    pub fn baseline_bytes_in(&self, covered: &[u64]) -> u64 {
        self.baseline
            .iter()
            .filter(|s| covered.contains(&s.id()))
            .map(|s| s.size_bytes())
            .sum()
    }

    fn validate(&self) -> Result<(), String> {
        if self.buckets.is_empty() {
            return Err("no buckets".into());
        }
        if self.buckets[0].range.lo != i64::MIN {
            return Err("first bucket must start at the domain minimum".into());
        }
        for w in self.buckets.windows(2) {
            match w[0].range.hi {
                Some(h) if h == w[1].range.lo => {}
                _ => return Err(format!("bucket gap/overlap at {:?}", w[1].range)),
            }
        }
        if self.buckets.last().unwrap().range.hi.is_some() {
            return Err("last bucket must be unbounded".into());
        }
        for w in self.baseline.windows(2) {
            if w[0].key_range().1 >= w[1].key_range().0 {
                return Err("baseline segments overlap or are unsorted".into());
            }
        }
        // Every baseline segment belongs to exactly the bucket covering it,
        // and bucket boundaries never split a baseline segment.
        for seg in &self.baseline {
            let (lo, hi) = seg.key_range();
            let b = self.route_bucket(lo);
            if !b.range.contains(hi) {
                return Err(format!(
                    "baseline segment {} straddles bucket boundary",
                    seg.id()
                ));
            }
            if !b.covered_baseline.contains(&seg.id()) {
                return Err(format!(
                    "baseline segment {} missing from covering bucket {}",
                    seg.id(),
                    b.bucket_id
                ));
            }
        }
        for b in &self.buckets {
            for id in &b.covered_baseline {
                let seg = self
                    .baseline
                    .iter()
                    .find(|s| s.id() == *id)
                    .ok_or_else(|| format!("covered baseline {id} not in baseline layer"))?;
                let (lo, hi) = seg.key_range();
                if !b.range.contains(lo) || !b.range.contains(hi) {
                    return Err(format!("covered baseline {id} outside bucket range"));
                }
            }
            for s in &b.segments {
                let (lo, hi) = s.key_range();
                if !b.range.contains(lo) || !b.range.contains(hi) {
                    return Err(format!("bucket segment {} outside bucket range", s.id()));
                }
            }
        }
        Ok(())
    }
}

/// An immutable engine snapshot across all logical tables.
#[derive(Debug)]
pub struct Layout {
    pub layout_version: u64,
    pub tables: Vec<TableLayout>,
}

impl Layout {
    pub fn table(&self, table: usize) -> &TableLayout {
        &self.tables[table]
    }

    /// Every column segment referenced by this layout.
    pub fn all_segments(&self) -> impl Iterator<Item = &Arc<ColumnSegment>> {
        self.tables.iter().flat_map(|t| {
            t.delta
                .iter()
                .chain(t.buckets.iter().flat_map(|b| b.segments.iter()))
                .chain(t.baseline.iter())
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EditRejected {
    #[error("stale edit: {0}")]
    Stale(String),
    #[error("unknown bucket {0}")]
    UnknownBucket(u64),
    #[error("bucket {0} covers fewer than two baseline segments and cannot split")]
    CannotSplit(u64),
    #[error("unknown table {0}")]
    UnknownTable(usize),
}

/// Structural operations a background task may install.
#[derive(Debug)]
pub enum EditOp {
    /// No structural change; still publishes a fresh layout version.
    Noop,
    /// Freeze rotation: the current active table (which must be
    /// `expected_active`) moves to the frozen list, `new_active` replaces it.
    RotateActive {
        expected_active: u64,
        new_active: Arc<RowTable>,
    },
    /// Foreground bulk writes packed straight into the delta layer.
    AddDelta { segments: Vec<Arc<ColumnSegment>> },
    /// Row-to-column conversion output: drop the frozen table, add its
    /// segments to the delta layer. Tombstone propagation happens in the
    /// same critical section via `LayoutManager::publish_with`.
    ConvertRowTable {
        table_id: u64,
        segments: Vec<Arc<ColumnSegment>>,
    },
    /// Delta-to-transition compaction: consume delta segments, append the
    /// merged output to its buckets.
    CompactDelta {
        input_ids: Vec<u64>,
        outputs: Vec<(u64, Vec<Arc<ColumnSegment>>)>,
    },
    /// Bucket-to-baseline compaction: consume the planned bucket segments
    /// (later arrivals stay), replace the covered baseline.
    CompactBucket {
        bucket_id: u64,
        input_segment_ids: Vec<u64>,
        replaced_baseline_ids: Vec<u64>,
        new_baseline: Vec<Arc<ColumnSegment>>,
    },
    /// Split a bucket at the covered-baseline boundary nearest to half the
    /// covered bytes; resident segments are re-cut at the split key.
    SplitBucket { bucket_id: u64 },
}

#[derive(Debug)]
pub struct LayoutEdit {
    pub table: usize,
    pub op: EditOp,
}

/// Choose the covered-baseline cut index minimizing |left - right| bytes;
/// ties resolve to the later cut (fewer segments on the right).
pub fn plan_covered_split(sizes: &[u64]) -> Option<usize> {
    if sizes.len() < 2 {
        return None;
    }
    let total: u64 = sizes.iter().sum();
    let mut best = (u64::MAX, 0usize);
    let mut left = 0u64;
    for cut in 1..sizes.len() {
        left += sizes[cut - 1];
        let diff = left.abs_diff(total - left);
        if diff < best.0 || (diff == best.0 && cut > best.1) {
            best = (diff, cut);
        }
    }
    Some(best.1)
}

struct HandleState {
    layout: Arc<Layout>,
    refcount: AtomicU64,
    retired: AtomicBool,
    destroyed: AtomicBool,
}

/// A published layout plus its reader reference count.
pub struct LayoutHandle(Arc<HandleState>);

impl LayoutHandle {
    pub fn layout(&self) -> &Arc<Layout> {
        &self.0.layout
    }

    pub fn refcount(&self) -> u64 {
        self.0.refcount.load(Ordering::Acquire)
    }
}

/// RAII snapshot: the layout it references outlives it, and dropping it
/// releases the reference (and may destroy a retired layout).
pub struct Snapshot {
    mgr: Arc<ManagerState>,
    handle: Arc<HandleState>,
    read_version: Version,
}

impl Snapshot {
    pub fn layout(&self) -> &Arc<Layout> {
        &self.handle.layout
    }

    pub fn read_version(&self) -> Version {
        self.read_version
    }

    pub fn table(&self, table: usize) -> &TableLayout {
        self.handle.layout.table(table)
    }
}

impl Drop for Snapshot {
    fn drop(&mut self) {
        {
            let mut reads = self.mgr.active_reads.lock();
            match reads.get_mut(&self.read_version.0) {
                Some(n) if *n > 1 => *n -= 1,
                Some(_) => {
                    reads.remove(&self.read_version.0);
                }
                None => debug_assert!(false, "snapshot read version already released"),
            }
        }
        let prev = self.handle.refcount.fetch_sub(1, Ordering::AcqRel);
        debug_assert!(prev > 0, "snapshot refcount double release");
        if prev == 1 && self.handle.retired.load(Ordering::Acquire) {
            LayoutManager::sweep(&self.mgr);
        }
    }
}

struct ManagerState {
    latest: RwLock<Arc<HandleState>>,
    retired: Mutex<Vec<Arc<HandleState>>>,
    active_reads: Mutex<BTreeMap<u64, u64>>,
    publish_lock: Mutex<()>,
    next_layout_version: AtomicU64,
    versions: Arc<VersionCounter>,
    ids: Arc<IdAllocator>,
    schemas: Vec<Schema>,
}

/// Owns the latest layout and serializes publication.
pub struct LayoutManager {
    state: Arc<ManagerState>,
}

impl LayoutManager {
    pub fn new(
        schemas: Vec<Schema>,
        versions: Arc<VersionCounter>,
        ids: Arc<IdAllocator>,
        initial: Layout,
    ) -> Self {
        let handle = Arc::new(HandleState {
            layout: Arc::new(initial),
            refcount: AtomicU64::new(0),
            retired: AtomicBool::new(false),
            destroyed: AtomicBool::new(false),
        });
        LayoutManager {
            state: Arc::new(ManagerState {
                latest: RwLock::new(handle),
                retired: Mutex::new(Vec::new()),
                active_reads: Mutex::new(BTreeMap::new()),
                publish_lock: Mutex::new(()),
                next_layout_version: AtomicU64::new(1),
                versions,
                ids,
                schemas,
            }),
        }
    }

    pub fn schemas(&self) -> &[Schema] {
        &self.state.schemas
    }

    /// Atomically pick up (read version, latest layout). The read version is
    /// registered before the handle is pinned so chain gc can never advance
    /// past a snapshot that is still being acquired.
    pub fn acquire_snapshot(&self) -> Snapshot {
        let read_version = {
            let mut reads = self.state.active_reads.lock();
            let v = self.state.versions.current();
            *reads.entry(v.0).or_insert(0) += 1;
            v
        };
        let handle = {
            let latest = self.state.latest.read();
            latest.refcount.fetch_add(1, Ordering::AcqRel);
            Arc::clone(&latest)
        };
        Snapshot {
            mgr: Arc::clone(&self.state),
            handle,
            read_version,
        }
    }

    /// Smallest read version a live snapshot holds, or the current version
    /// when none are held.
    pub fn min_active_read_version(&self) -> Version {
        let reads = self.state.active_reads.lock();
        reads
            .keys()
            .next()
            .map(|v| Version(*v))
            .unwrap_or_else(|| self.state.versions.current())
    }

    pub fn latest(&self) -> Arc<Layout> {
        Arc::clone(&self.state.latest.read().layout)
    }

    pub fn latest_layout_version(&self) -> u64 {
        self.state.latest.read().layout.layout_version
    }

    /// Apply one structural edit. See `publish_with` for compound
    /// publications that must run extra work in the critical section.
    pub fn publish(&self, edit: LayoutEdit) -> Result<Arc<Layout>, EditRejected> {
        self.publish_with(|mgr, current| mgr.apply_edit(current, &edit))
    }

    /// Serialize publication: `f` builds the successor layout from the
    /// current one inside the critical section (applying delete-chain marks
    /// there is legal — chains are version-filtered shared state).
    pub fn publish_with<F>(&self, f: F) -> Result<Arc<Layout>, EditRejected>
    where
        F: FnOnce(&Self, &Layout) -> Result<Layout, EditRejected>,
    {
        let _guard = self.state.publish_lock.lock();
        let current = self.latest();
        let mut next = f(self, &current)?;
        next.layout_version = self
            .state
            .next_layout_version
            .fetch_add(1, Ordering::Relaxed);
        for t in &next.tables {
            if let Err(msg) = t.validate() {
                panic!("layout invariant violated on publish: {msg}");
            }
        }
        let next = Arc::new(next);
        let old = {
            let mut latest = self.state.latest.write();
            let old = Arc::clone(&latest);
            *latest = Arc::new(HandleState {
                layout: Arc::clone(&next),
                refcount: AtomicU64::new(0),
                retired: AtomicBool::new(false),
                destroyed: AtomicBool::new(false),
            });
            old
        };
        old.retired.store(true, Ordering::Release);
        self.state.retired.lock().push(old);
        Self::sweep(&self.state);
        Ok(next)
    }

    /// Destroy retired layouts nobody references: run chain gc against the
    /// minimum live read version and drop them.
    fn sweep(state: &Arc<ManagerState>) {
        let min_active = {
            let reads = state.active_reads.lock();
            reads
                .keys()
                .next()
                .map(|v| Version(*v))
                .unwrap_or_else(|| state.versions.current())
        };
        let mut destroyed = Vec::new();
        {
            let mut retired = state.retired.lock();
            retired.retain(|h| {
                if h.refcount.load(Ordering::Acquire) == 0
                    && !h.destroyed.swap(true, Ordering::AcqRel)
                {
                    destroyed.push(Arc::clone(h));
                    false
                } else {
                    h.refcount.load(Ordering::Acquire) != 0
                }
            });
        }
        for h in destroyed {
            for seg in h.layout.all_segments() {
                if seg.chain().chain_len() > 0 || seg.chain().pending_len() > 0 {
                    seg.gc_chain(min_active);
                }
            }
        }
    }

    pub fn retired_count(&self) -> usize {
        self.state.retired.lock().len()
    }

    pub fn ids(&self) -> &Arc<IdAllocator> {
        &self.state.ids
    }

    /// Pure-ish structural application of an edit to `current`.
    pub fn apply_edit(&self, current: &Layout, edit: &LayoutEdit) -> Result<Layout, EditRejected> {
        if edit.table >= current.tables.len() {
            return Err(EditRejected::UnknownTable(edit.table));
        }
        let mut tables = current.tables.clone();
        let t = &mut tables[edit.table];
        match &edit.op {
            EditOp::Noop => {}
            EditOp::RotateActive {
                expected_active,
                new_active,
            } => {
                if t.active.id() != *expected_active {
                    return Err(EditRejected::Stale(format!(
                        "active table is {} not {expected_active}",
                        t.active.id()
                    )));
                }
                let old = std::mem::replace(&mut t.active, Arc::clone(new_active));
                t.frozen.push(old);
            }
            EditOp::AddDelta { segments } => {
                t.delta.extend(segments.iter().cloned());
            }
            EditOp::ConvertRowTable { table_id, segments } => {
                let idx = t
                    .frozen
                    .iter()
                    .position(|f| f.id() == *table_id)
                    .ok_or_else(|| {
                        EditRejected::Stale(format!("frozen table {table_id} not present"))
                    })?;
                t.frozen.remove(idx);
                t.delta.extend(segments.iter().cloned());
            }
            EditOp::CompactDelta { input_ids, outputs } => {
                for id in input_ids {
                    if !t.delta.iter().any(|s| s.id() == *id) {
                        return Err(EditRejected::Stale(format!(
                            "delta segment {id} not present"
                        )));
                    }
                }
                t.delta.retain(|s| !input_ids.contains(&s.id()));
                for (bucket_id, segs) in outputs {
                    let b = t
                        .buckets
                        .iter_mut()
                        .find(|b| b.bucket_id == *bucket_id)
                        .ok_or(EditRejected::UnknownBucket(*bucket_id))?;
                    b.segments.extend(segs.iter().cloned());
                }
            }
            EditOp::CompactBucket {
                bucket_id,
                input_segment_ids,
                replaced_baseline_ids,
                new_baseline,
            } => {
                let b = t
                    .buckets
                    .iter_mut()
                    .find(|b| b.bucket_id == *bucket_id)
                    .ok_or(EditRejected::UnknownBucket(*bucket_id))?;
                for id in input_segment_ids {
                    if !b.segments.iter().any(|s| s.id() == *id) {
                        return Err(EditRejected::Stale(format!(
                            "bucket segment {id} not present"
                        )));
                    }
                }
                let mut replaced = replaced_baseline_ids.clone();
                replaced.sort_unstable();
                let mut covered = b.covered_baseline.clone();
                covered.sort_unstable();
                if replaced != covered {
                    return Err(EditRejected::Stale(format!(
                        "bucket {bucket_id} covered baseline changed"
                    )));
                }
                // Later arrivals (producer side of the staging model) stay.
                b.segments.retain(|s| !input_segment_ids.contains(&s.id()));
                b.covered_baseline = new_baseline.iter().map(|s| s.id()).collect();
                t.baseline.retain(|s| !replaced_baseline_ids.contains(&s.id()));
                t.baseline.extend(new_baseline.iter().cloned());
                t.baseline.sort_by_key(|s| s.key_range().0);
            }
            EditOp::SplitBucket { bucket_id } => {
                self.split_bucket_in(t, *bucket_id, edit.table)?;
            }
        }
        Ok(Layout {
            layout_version: 0, // assigned by publish
            tables,
        })
    }

    /// Split `bucket_id` in place within a table layout under construction.
    pub(crate) fn split_bucket_in(
        &self,
        t: &mut TableLayout,
        bucket_id: u64,
        table: usize,
    ) -> Result<(), EditRejected> {
        let idx = t
            .buckets
            .iter()
            .position(|b| b.bucket_id == bucket_id)
            .ok_or(EditRejected::UnknownBucket(bucket_id))?;
        let bucket = &t.buckets[idx];
        // Covered baseline in key order with sizes.
        let mut covered: Vec<&Arc<ColumnSegment>> = t
            .baseline
            .iter()
            .filter(|s| bucket.covered_baseline.contains(&s.id()))
            .collect();
        covered.sort_by_key(|s| s.key_range().0);
        let sizes: Vec<u64> = covered.iter().map(|s| s.size_bytes()).collect();
        let cut = plan_covered_split(&sizes).ok_or(EditRejected::CannotSplit(bucket_id))?;
        let boundary = covered[cut].key_range().0;
        let left_ids: Vec<u64> = covered[..cut].iter().map(|s| s.id()).collect();
        let right_ids: Vec<u64> = covered[cut..].iter().map(|s| s.id()).collect();

        let mut left_segs = Vec::new();
        let mut right_segs = Vec::new();
        for seg in &bucket.segments {
            let (lo, hi) = seg.key_range();
            if hi < boundary {
                left_segs.push(Arc::clone(seg));
            } else if lo >= boundary {
                right_segs.push(Arc::clone(seg));
            } else {
                // Straddler: rebuild into two segments, preserving per-row
                // delete marks and the original create version.
                let (l, r) = self.recut_segment(seg, boundary, table);
                left_segs.extend(l.into_iter().map(Arc::new));
                right_segs.extend(r.into_iter().map(Arc::new));
            }
        }

        let left = ColumnBucket {
            bucket_id: self.state.ids.next_id(),
            range: KeyRange {
                lo: bucket.range.lo,
                hi: Some(boundary),
            },
            segments: left_segs,
            covered_baseline: left_ids,
        };
        let right = ColumnBucket {
            bucket_id: self.state.ids.next_id(),
            range: KeyRange {
                lo: boundary,
                hi: bucket.range.hi,
            },
            segments: right_segs,
            covered_baseline: right_ids,
        };
        t.buckets.splice(idx..=idx, [left, right]);
        Ok(())
    }

    /// Rebuild a segment into the parts below and at-or-above `boundary`.
    fn recut_segment(
        &self,
        seg: &Arc<ColumnSegment>,
        boundary: i64,
        table: usize,
    ) -> (Vec<ColumnSegment>, Vec<ColumnSegment>) {
        recut_segment(seg, boundary, &self.state.schemas[table], &self.state.ids)
    }
}

/// Rebuild a segment into the parts below and at-or-above `boundary`,
/// preserving per-row delete marks and the original create version.
pub(crate) fn recut_segment(
    seg: &ColumnSegment,
    boundary: i64,
    schema: &Schema,
    ids: &IdAllocator,
) -> (Vec<ColumnSegment>, Vec<ColumnSegment>) {
    let deletes = seg.chain().earliest_delete_versions(seg.row_count());
    let rows: Vec<SourceRow> = (0..seg.row_count())
        .map(|i| SourceRow {
            row: Arc::new(seg.row_at(i)),
            deleted_at: deletes[i as usize],
        })
        .collect();
    let mut iter = rows.into_iter().peekable();
    let left = build_segments(
        &mut iter,
        schema,
        u64::MAX,
        Some(boundary),
        || ids.next_id(),
        seg.create_version(),
    )
    .expect("recut input is sorted");
    let right = build_segments(
        &mut iter,
        schema,
        u64::MAX,
        None,
        || ids.next_id(),
        seg.create_version(),
    )
    .expect("recut input is sorted");
    (left, right)
}
