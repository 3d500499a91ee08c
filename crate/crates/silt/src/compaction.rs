//! Background transformations and their cost accounting.
//!
//! Three task kinds move data down the layers: row-to-column conversion
//! (frozen row table -> delta segments), delta-to-transition compaction
//! (merge a bounded set of delta segments and cut the output at bucket
//! boundaries), and bucket-to-baseline compaction (merge one bucket with
//! the baseline it covers and rewrite that baseline).
//!
//! Cost model:
//!   C_t      = sum of the selected delta segment sizes; the scheduler keeps
//!              C_t <= G by bounding the input set.
//!   C_i      = bucket resident bytes + covered baseline bytes.
//!   C        = C_t over the whole delta layer + sum of all C_i; what one
//!              monolithic incremental-to-baseline compaction would process.
//!   Split(i) = G - T - covered baseline bytes; a negative value means the
//!              bucket's baseline has outgrown a single compaction and the
//!              bucket splits in two.
//!
//! Merges resolve duplicate keys by segment create version (newest data
//! wins); rows already invisible at the minimum live read version are
//! dropped together with their delete-chain entries, anything newer keeps
//! its mark and is carried into the rebuilt chain.

use std::collections::HashSet;
use std::sync::Arc;

use parking_lot::Mutex;

use crate::layout::{ColumnBucket, KeyRange, TableLayout};
use crate::model::{IdAllocator, Schema, Version};
use crate::rowstore::{RowPayload, RowTable};
use crate::segment::{build_segments, BuildError, ColumnSegment, SourceRow};

pub const DEFAULT_SEGMENT_CAP: u64 = 4 << 20;
pub const DEFAULT_ROWTABLE_CAP: u64 = 64 << 20;
pub const DEFAULT_G: u64 = 256 << 20;
pub const DEFAULT_T: u64 = 64 << 20;

/// Size thresholds steering background work.
#[derive(Debug, Clone, Copy)]
pub struct GranularityConfig {
    /// Byte budget of a single delta-to-transition compaction (G).
    pub g_bytes: u64,
    /// Bucket size that triggers bucket-to-baseline compaction (T).
    pub t_bytes: u64,
    pub segment_cap: u64,
    pub rowtable_cap: u64,
}

impl Default for GranularityConfig {
    fn default() -> Self {
        GranularityConfig {
            g_bytes: DEFAULT_G,
            t_bytes: DEFAULT_T,
            segment_cap: DEFAULT_SEGMENT_CAP,
            rowtable_cap: DEFAULT_ROWTABLE_CAP,
        }
    }
}

impl GranularityConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.g_bytes <= self.t_bytes || self.t_bytes == 0 {
            return Err(format!(
                "need G > T > 0, got G={} T={}",
                self.g_bytes, self.t_bytes
            ));
        }
        if self.segment_cap == 0 || self.rowtable_cap == 0 {
            return Err("segment_cap and rowtable_cap must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CompactionKind {
    RowToColumn,
    DeltaToTransition,
    BucketToBaseline,
}

/// A planned background task, as handed to the scheduler.
#[derive(Debug, Clone)]
pub struct CompactionTask {
    pub kind: CompactionKind,
    /// Table ids (row table or segments or bucket) owned by the task.
    pub inputs: Vec<u64>,
    pub estimated_bytes: u64,
}

/// Ownership marks over tables currently consumed by some task. A table id
/// appears in at most one live task's input set; acquisition is
/// all-or-nothing. The foreground write path checks marks under the same
/// lock before touching a segment's delete chain, so a chain snapshot taken
/// by a marked task can never miss a foreground mark.
#[derive(Debug, Default)]
pub struct CompactionMarkSet {
    marked: Mutex<HashSet<u64>>,
}

impl CompactionMarkSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Try to own every id; true only if none was already owned.
    pub fn mark(&self, ids: &[u64]) -> bool {
        let mut m = self.marked.lock();
        if ids.iter().any(|id| m.contains(id)) {
            return false;
        }
        m.extend(ids.iter().copied());
        true
    }

    pub fn unmark(&self, ids: &[u64]) {
        let mut m = self.marked.lock();
        for id in ids {
            m.remove(id);
        }
    }

    pub fn is_marked(&self, id: u64) -> bool {
        self.marked.lock().contains(&id)
    }

    /// Run `f` under the mark lock iff `id` is unowned. Returns None when
    /// the id is owned by a task and the caller must fall back (e.g. write
    /// a row-table tombstone instead of marking a segment chain).
    pub fn unmarked_then<R>(&self, id: u64, f: impl FnOnce() -> R) -> Option<R> {
        let m = self.marked.lock();
        if m.contains(&id) {
            None
        } else {
            Some(f())
        }
    }
}

/// Eq. for C_t: the size of a single delta compaction is the sum of its
/// input segment sizes.
pub fn compute_ct<I: IntoIterator<Item = u64>>(omega_sizes: I) -> u64 {
    omega_sizes.into_iter().sum()
}

/// Eq. for C_i: resident bucket bytes plus covered baseline bytes.
pub fn compute_ci(bucket: &ColumnBucket, table: &TableLayout) -> u64 {
    bucket.data_bytes() + table.baseline_bytes_in(&bucket.covered_baseline)
}

/// Eq. for C: what a traditional single compaction of all incremental data
/// into the baseline would process. Reported for comparison only.
pub fn compute_traditional_c(table: &TableLayout) -> u64 {
    compute_ct(table.delta.iter().map(|s| s.size_bytes()))
        + table
            .buckets
            .iter()
            .map(|b| compute_ci(b, table))
            .sum::<u64>()
}

/// Split rule: negative means the covered baseline outgrew G - T and the
/// bucket must split.
pub fn split_metric(bucket: &ColumnBucket, table: &TableLayout, cfg: &GranularityConfig) -> i64 {
    let beta: u64 = table.baseline_bytes_in(&bucket.covered_baseline);
    cfg.g_bytes as i64 - cfg.t_bytes as i64 - beta as i64
}

/// Oldest-first greedy prefix of unmarked delta segments with total size
/// <= G. A single oversized segment is still selected alone so the delta
/// layer always drains.
pub fn select_omega_ids(candidates: &[(u64, u64, bool)], g_bytes: u64) -> Vec<u64> {
    let mut picked = Vec::new();
    let mut total = 0u64;
    for &(id, size, marked) in candidates {
        if marked {
            continue;
        }
        if picked.is_empty() || total + size <= g_bytes {
            picked.push(id);
            total += size;
            if total >= g_bytes {
                break;
            }
        } else {
            break;
        }
    }
    picked
}

/// Oldest-first selection over a live table layout.
pub fn select_omega(
    table: &TableLayout,
    marks: &CompactionMarkSet,
    g_bytes: u64,
) -> Vec<Arc<ColumnSegment>> {
    let candidates: Vec<(u64, u64, bool)> = table
        .delta
        .iter()
        .map(|s| (s.id(), s.size_bytes(), marks.is_marked(s.id())))
        .collect();
    let ids = select_omega_ids(&candidates, g_bytes);
    table
        .delta
        .iter()
        .filter(|s| ids.contains(&s.id()))
        .cloned()
        .collect()
}

struct MergeCursor {
    seg: Arc<ColumnSegment>,
    deletes: Vec<Option<Version>>,
    pos: u32,
}

impl MergeCursor {
    fn key(&self) -> i64 {
        self.seg.keys()[self.pos as usize]
    }
}

/// K-way merge of segments by key. Inputs must be ordered oldest data
/// first; per key the row from the latest input survives (delta compaction
/// consumes an oldest-first prefix and arrivals within a bucket are
/// ordered, so input position is the recency rank). A winning row is
/// dropped entirely when its delete mark is at or below `min_active`,
/// otherwise the mark is carried along.
pub struct SegmentMerge {
    cursors: Vec<MergeCursor>,
    // Min-heap by (key, latest input first).
    heap: std::collections::BinaryHeap<std::cmp::Reverse<(i64, std::cmp::Reverse<usize>, usize)>>,
    min_active: Version,
}

impl SegmentMerge {
    pub fn new(inputs: Vec<Arc<ColumnSegment>>, min_active: Version) -> Self {
        let cursors: Vec<MergeCursor> = inputs
            .into_iter()
            .filter(|s| s.row_count() > 0)
            .map(|seg| {
                let deletes = seg.chain().earliest_delete_versions(seg.row_count());
                MergeCursor {
                    seg,
                    deletes,
                    pos: 0,
                }
            })
            .collect();
        let mut heap = std::collections::BinaryHeap::with_capacity(cursors.len());
        for (i, c) in cursors.iter().enumerate() {
            heap.push(std::cmp::Reverse((c.key(), std::cmp::Reverse(i), i)));
        }
        SegmentMerge {
            cursors,
            heap,
            min_active,
        }
    }
}

impl Iterator for SegmentMerge {
    type Item = SourceRow;

    fn next(&mut self) -> Option<SourceRow> {
        loop {
            let std::cmp::Reverse((key, _, idx)) = self.heap.pop()?;
            // The winner for this key; skip shadowed duplicates from older
            // sources (their data was superseded by the winner's write).
            let (row, deleted_at) = {
                let c = &self.cursors[idx];
                let off = c.pos;
                (c.seg.row_at(off), c.deletes[off as usize])
            };
            let mut advance = vec![idx];
            while let Some(std::cmp::Reverse((k, _, j))) = self.heap.peek().copied() {
                if k != key {
                    break;
                }
                self.heap.pop();
                advance.push(j);
            }
            for j in advance {
                let c = &mut self.cursors[j];
                c.pos += 1;
                if (c.pos as usize) < c.seg.keys().len() {
                    self.heap
                        .push(std::cmp::Reverse((c.key(), std::cmp::Reverse(j), j)));
                }
            }
            match deleted_at {
                Some(d) if d <= self.min_active => continue, // dead to everyone
                deleted_at => {
                    return Some(SourceRow {
                        row: Arc::new(row),
                        deleted_at,
                    })
                }
            }
        }
    }
}

/// Output of converting one frozen row table.
#[derive(Debug)]
pub struct ConversionOutput {
    pub segments: Vec<ColumnSegment>,
    /// (key, version) tombstones to propagate to lower layers in the same
    /// publication.
    pub tombstones: Vec<(i64, Version)>,
}

/// Convert a frozen row table into delta segments: per key the newest entry
/// wins; keys whose newest entry is a tombstone are dropped. Every
/// tombstone becomes a propagation record so the versioned delete reaches
/// whatever lower layer still holds the key.
pub fn convert_row_to_column(
    frozen: &RowTable,
    schema: &Schema,
    segment_cap: u64,
    ids: &IdAllocator,
    create_version: Version,
) -> Result<ConversionOutput, BuildError> {
    let mut live: Vec<SourceRow> = Vec::new();
    let mut last_key: Option<i64> = None;
    for ((key, _v), payload) in frozen.iter_entries() {
        if last_key == Some(key) {
            continue; // shadowed by a newer in-table version
        }
        last_key = Some(key);
        if let RowPayload::Row(row) = payload {
            live.push(SourceRow::live(row));
        }
    }
    let mut rows = live.into_iter().peekable();
    let segments = build_segments(&mut rows, schema, segment_cap, None, || ids.next_id(), create_version)?;
    Ok(ConversionOutput {
        segments,
        tombstones: frozen.dlist_records(),
    })
}

/// Merge the selected delta segments and cut the output at segment capacity
/// and at every bucket boundary. Returns per-bucket new segments; the edit
/// that installs them removes the inputs from the delta layer.
pub fn compact_delta_to_transition(
    inputs: &[Arc<ColumnSegment>],
    buckets: &[(u64, KeyRange)],
    schema: &Schema,
    min_active: Version,
    segment_cap: u64,
    ids: &IdAllocator,
    create_version: Version,
) -> Result<Vec<(u64, Vec<ColumnSegment>)>, BuildError> {
    let mut merged = SegmentMerge::new(inputs.to_vec(), min_active).peekable();
    let mut out = Vec::new();
    for (bucket_id, range) in buckets {
        if merged.peek().is_none() {
            break;
        }
        let segs = build_segments(
            &mut merged,
            schema,
            segment_cap,
            range.hi,
            || ids.next_id(),
            create_version,
        )?;
        if !segs.is_empty() {
            out.push((*bucket_id, segs));
        }
    }
    debug_assert!(merged.peek().is_none(), "buckets must cover the key domain");
    Ok(out)
}

/// Merge a bucket's planned segments with its covered baseline, dropping
/// rows nobody can see anymore, and rebuild the baseline for that range.
/// The baseline enters the merge as the oldest input; bucket residents
/// follow in arrival order.
pub fn compact_bucket_to_baseline(
    bucket_inputs: &[Arc<ColumnSegment>],
    covered_baseline: &[Arc<ColumnSegment>],
    schema: &Schema,
    min_active: Version,
    segment_cap: u64,
    ids: &IdAllocator,
) -> Result<Vec<ColumnSegment>, BuildError> {
    let mut all: Vec<Arc<ColumnSegment>> =
        Vec::with_capacity(bucket_inputs.len() + covered_baseline.len());
    all.extend(covered_baseline.iter().cloned());
    all.extend(bucket_inputs.iter().cloned());
    let create_version = all
        .iter()
        .map(|s| s.create_version())
        .max()
        .unwrap_or(Version::ZERO);
    let mut merged = SegmentMerge::new(all, min_active).peekable();
    build_segments(
        &mut merged,
        schema,
        segment_cap,
        None,
        || ids.next_id(),
        create_version,
    )
}
