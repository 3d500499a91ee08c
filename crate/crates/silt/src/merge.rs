//! Layered merge iteration over one snapshot.
//!
//! Sources are ranked newest-data-first: active row table, then frozen
//! tables newest to oldest, then delta segments by layer position (delta
//! compaction consumes an oldest-first prefix, so later positions always
//! hold newer data), then bucket-resident segments by arrival order, then
//! baseline. Create versions are not a cross-layer recency rank — moving
//! data down re-stamps it — but layer structure is. Per key the resolution
//! rule is:
//!
//!   - Row-table sources resolve by entry version: a row wins, a tombstone
//!     ends the key (deleted), no entry at or below the read version falls
//!     through to the next source.
//!   - The first segment source *containing* the key is authoritative: if
//!     its delete chain shows the row at the read version the row wins,
//!     otherwise the key is deleted. Older segment copies are superseded
//!     garbage awaiting compaction and are never consulted.
//!
//! The iterator emits runs: when a single segment cursor owns the key space
//! up to the next cursor's position, a whole offset range is handed to the
//! consumer at once, which keeps scans over settled (baseline-only) data at
//! near-copy speed.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::sync::Arc;

use crate::layout::TableLayout;
use crate::model::{Row, Version};
use crate::rowstore::RowPayload;
use crate::segment::{ColumnSegment, VisibilityView};

enum SourceCursor {
    Table {
        /// Pre-resolved (key, payload) pairs at the read version, ascending.
        entries: Vec<(i64, RowPayload)>,
        pos: usize,
    },
    Segment {
        seg: Arc<ColumnSegment>,
        view: VisibilityView,
        pos: u32,
        end: u32,
    },
}

impl SourceCursor {
    fn current_key(&self) -> Option<i64> {
        match self {
            SourceCursor::Table { entries, pos } => entries.get(*pos).map(|(k, _)| *k),
            SourceCursor::Segment { seg, pos, end, .. } => {
                if pos < end {
                    Some(seg.keys()[*pos as usize])
                } else {
                    None
                }
            }
        }
    }
}

/// Where a merged row came from; lets consumers decode only what they need.
pub enum MergedRow {
    Table { key: i64, row: Arc<Row> },
    /// Offsets `[start, end)` of source `src`, visibility already applied
    /// per offset via `MergedScan::source_view`.
    SegmentRun { src: usize, start: u32, end: u32 },
}

/// Rank space: row tables above all segments, newest first.
const TABLE_RANK_BASE: u64 = 1 << 63;
const DELTA_RANK_BASE: u64 = 1 << 40;
const BUCKET_RANK_BASE: u64 = 1 << 20;

pub struct MergedScan {
    sources: Vec<SourceCursor>,
    ranks: Vec<u64>,
    heap: BinaryHeap<Reverse<(i64, Reverse<u64>, usize)>>,
}

impl MergedScan {
    /// Build a merged cursor over `[lo, hi)` at `read_v`.
    pub fn new(table: &TableLayout, lo: i64, hi: Option<i64>, read_v: Version) -> Self {
        let mut sources = Vec::new();
        let mut ranks = Vec::new();

        // Active + frozen row tables, newest first.
        let mut tables = vec![&table.active];
        tables.extend(table.frozen.iter().rev());
        let ntables = tables.len() as u64;
        for (i, t) in tables.into_iter().enumerate() {
            if t.is_empty() {
                continue;
            }
            sources.push(SourceCursor::Table {
                entries: t.scan(lo, hi, read_v),
                pos: 0,
            });
            ranks.push(TABLE_RANK_BASE + (ntables - i as u64));
        }

        // Every segment whose key range intersects the scan range, ranked
        // structurally: delta above buckets above baseline, later layer
        // positions above earlier ones.
        let mut push_seg = |seg: &Arc<ColumnSegment>, rank: u64| {
            let (min_key, max_key) = seg.key_range();
            if max_key < lo || hi.map(|h| min_key >= h).unwrap_or(false) || seg.row_count() == 0 {
                return;
            }
            let keys = seg.keys();
            let start = keys.partition_point(|&k| k < lo) as u32;
            let end = match hi {
                Some(h) => keys.partition_point(|&k| k < h) as u32,
                None => seg.row_count(),
            };
            if start >= end {
                return;
            }
            sources.push(SourceCursor::Segment {
                view: seg.visible_rows(read_v),
                seg: Arc::clone(seg),
                pos: start,
                end,
            });
            ranks.push(rank);
        };
        for (i, seg) in table.delta.iter().enumerate() {
            push_seg(seg, DELTA_RANK_BASE + i as u64);
        }
        // Cross-bucket rank order is immaterial: bucket ranges are disjoint.
        let mut bucket_pos = 0u64;
        for bucket in &table.buckets {
            for seg in &bucket.segments {
                push_seg(seg, BUCKET_RANK_BASE + bucket_pos);
                bucket_pos += 1;
            }
        }
        for (i, seg) in table.baseline.iter().enumerate() {
            push_seg(seg, i as u64);
        }

        let mut heap = BinaryHeap::with_capacity(sources.len());
        for (i, s) in sources.iter().enumerate() {
            if let Some(k) = s.current_key() {
                heap.push(Reverse((k, Reverse(ranks[i]), i)));
            }
        }
        MergedScan {
            sources,
            ranks,
            heap,
        }
    }

    pub fn segment(&self, src: usize) -> &Arc<ColumnSegment> {
        match &self.sources[src] {
            SourceCursor::Segment { seg, .. } => seg,
            SourceCursor::Table { .. } => panic!("source {src} is a row table"),
        }
    }

    pub fn source_view(&self, src: usize) -> &VisibilityView {
        match &self.sources[src] {
            SourceCursor::Segment { view, .. } => view,
            SourceCursor::Table { .. } => panic!("source {src} is a row table"),
        }
    }

    fn advance(&mut self, src: usize) {
        let next = match &mut self.sources[src] {
            SourceCursor::Table { entries, pos } => {
                *pos += 1;
                entries.get(*pos).map(|(k, _)| *k)
            }
            SourceCursor::Segment { seg, pos, end, .. } => {
                *pos += 1;
                if pos < end {
                    Some(seg.keys()[*pos as usize])
                } else {
                    None
                }
            }
        };
        if let Some(k) = next {
            self.heap.push(Reverse((k, Reverse(self.ranks[src]), src)));
        }
    }

    /// Next merged row or segment run; None when exhausted.
    pub fn next_item(&mut self) -> Option<MergedRow> {
        loop {
            let Reverse((key, _, src)) = self.heap.pop()?;
            let next_other_key = self.heap.peek().map(|Reverse((k, _, _))| *k);

            // Fast path: a segment cursor alone below every other source
            // emits its whole stretch up to the next cursor as one run.
            if next_other_key != Some(key) {
                if let SourceCursor::Segment { seg, pos, end, .. } = &self.sources[src] {
                    let run_end = match next_other_key {
                        None => *end,
                        Some(b) => {
                            let keys = &seg.keys()[*pos as usize..*end as usize];
                            *pos + keys.partition_point(|&k| k < b) as u32
                        }
                    };
                    let start = *pos;
                    debug_assert!(run_end > start);
                    match &mut self.sources[src] {
                        SourceCursor::Segment { pos, .. } => *pos = run_end,
                        _ => unreachable!(),
                    }
                    self.requeue(src);
                    return Some(MergedRow::SegmentRun {
                        src,
                        start,
                        end: run_end,
                    });
                }
            }

            // Per-key resolution across every source holding this key;
            // holders arrive highest-rank first (heap order on equal keys).
            let mut holders = vec![src];
            while let Some(Reverse((k, _, j))) = self.heap.peek().copied() {
                if k != key {
                    break;
                }
                self.heap.pop();
                holders.push(j);
            }
            let mut decided: Option<MergedRow> = None;
            for &h in &holders {
                match &self.sources[h] {
                    SourceCursor::Table { entries, pos } => match &entries[*pos].1 {
                        RowPayload::Row(row) => {
                            decided = Some(MergedRow::Table {
                                key,
                                row: Arc::clone(row),
                            });
                            break;
                        }
                        RowPayload::Tombstone => {
                            decided = None;
                            break;
                        }
                    },
                    SourceCursor::Segment { view, pos, .. } => {
                        // First segment containing the key is authoritative;
                        // older copies are superseded garbage.
                        if view.is_visible(*pos) {
                            decided = Some(MergedRow::SegmentRun {
                                src: h,
                                start: *pos,
                                end: *pos + 1,
                            });
                        }
                        break;
                    }
                }
            }
            // Offsets in the returned run are absolute, so advancing every
            // holder past this key first is safe.
            for h in holders {
                self.advance(h);
            }
            if let Some(item) = decided {
                return Some(item);
            }
        }
    }

    fn requeue(&mut self, src: usize) {
        if let Some(k) = self.sources[src].current_key() {
            self.heap.push(Reverse((k, Reverse(self.ranks[src]), src)));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::TableLayout;
    use crate::model::{CellType, IdAllocator, Schema, Value};
    use crate::rowstore::RowTable;
    use crate::segment::{build_segments, SourceRow};

    fn schema() -> Schema {
        Schema::new(vec![
            ("col_0".into(), CellType::Int64),
            ("col_1".into(), CellType::Int64),
        ])
        .unwrap()
    }

    fn mkrow(key: i64, x: i64) -> Arc<Row> {
        Arc::new(Row::new(key, vec![Value::Int(key), Value::Int(x)]))
    }

    fn mkseg(ids: &IdAllocator, rows: &[(i64, i64)], create: u64) -> Arc<ColumnSegment> {
        let mut it = rows
            .iter()
            .map(|&(k, x)| SourceRow::live(mkrow(k, x)))
            .collect::<Vec<_>>()
            .into_iter()
            .peekable();
        Arc::new(
            build_segments(&mut it, &schema(), u64::MAX, None, || ids.next_id(), Version(create))
                .unwrap()
                .pop()
                .unwrap(),
        )
    }

    fn collect(scan: &mut MergedScan) -> Vec<(i64, i64)> {
        let mut out = Vec::new();
        while let Some(item) = scan.next_item() {
            match item {
                MergedRow::Table { key, row } => out.push((key, row.cells[1].as_int().unwrap())),
                MergedRow::SegmentRun { src, start, end } => {
                    let seg = Arc::clone(scan.segment(src));
                    let view = scan.source_view(src).clone();
                    for off in start..end {
                        if view.is_visible(off) {
                            out.push((seg.keys()[off as usize], seg.column(1).int_at(off).unwrap()));
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn rowtable_shadows_segments() {
        let ids = IdAllocator::new();
        let active = Arc::new(RowTable::new(ids.next_id(), 1 << 20, 64));
        active.put(mkrow(2, 200), Version(10)).unwrap();
        let mut t = TableLayout::new(active, ids.next_id());
        t.baseline = vec![mkseg(&ids, &[(1, 1), (2, 2), (3, 3)], 1)];
        t.buckets[0].covered_baseline = vec![t.baseline[0].id()];
        let mut scan = MergedScan::new(&t, i64::MIN, None, Version(10));
        assert_eq!(collect(&mut scan), vec![(1, 1), (2, 200), (3, 3)]);
        // At read 9 the row-table write does not exist yet.
        let mut scan = MergedScan::new(&t, i64::MIN, None, Version(9));
        assert_eq!(collect(&mut scan), vec![(1, 1), (2, 2), (3, 3)]);
    }

    #[test]
    fn tombstone_suppresses_lower_layers() {
        let ids = IdAllocator::new();
        let active = Arc::new(RowTable::new(ids.next_id(), 1 << 20, 64));
        active.delete_mark(2, Version(5)).unwrap();
        let mut t = TableLayout::new(active, ids.next_id());
        t.baseline = vec![mkseg(&ids, &[(1, 1), (2, 2)], 1)];
        t.buckets[0].covered_baseline = vec![t.baseline[0].id()];
        let mut scan = MergedScan::new(&t, i64::MIN, None, Version(6));
        assert_eq!(collect(&mut scan), vec![(1, 1)]);
        let mut scan = MergedScan::new(&t, i64::MIN, None, Version(4));
        assert_eq!(collect(&mut scan), vec![(1, 1), (2, 2)]);
    }

    #[test]
    fn newest_segment_copy_is_authoritative() {
        let ids = IdAllocator::new();
        let active = Arc::new(RowTable::new(ids.next_id(), 1 << 20, 64));
        let mut t = TableLayout::new(active, ids.next_id());
        let old = mkseg(&ids, &[(1, 1), (2, 2)], 3);
        let new = mkseg(&ids, &[(2, 22)], 9);
        t.delta = vec![old, new];
        let mut scan = MergedScan::new(&t, i64::MIN, None, Version(20));
        assert_eq!(collect(&mut scan), vec![(1, 1), (2, 22)]);

        // Deleting the newest copy deletes the key outright; the stale old
        // copy must not resurface.
        let newest = Arc::clone(&t.delta[1]);
        newest.mark_delete(&[0], Version(15)).unwrap();
        let mut scan = MergedScan::new(&t, i64::MIN, None, Version(20));
        assert_eq!(collect(&mut scan), vec![(1, 1)]);
        let mut scan = MergedScan::new(&t, i64::MIN, None, Version(14));
        assert_eq!(collect(&mut scan), vec![(1, 1), (2, 22)]);
    }

    #[test]
    fn range_bounds_are_half_open() {
        let ids = IdAllocator::new();
        let active = Arc::new(RowTable::new(ids.next_id(), 1 << 20, 64));
        let mut t = TableLayout::new(active, ids.next_id());
        t.baseline = vec![mkseg(&ids, &[(1, 1), (2, 2), (3, 3)], 1)];
        t.buckets[0].covered_baseline = vec![t.baseline[0].id()];
        let mut scan = MergedScan::new(&t, 2, Some(3), Version(5));
        assert_eq!(collect(&mut scan), vec![(2, 2)]);
        let mut scan = MergedScan::new(&t, 4, None, Version(5));
        assert!(collect(&mut scan).is_empty());
    }

    #[test]
    fn interleaved_sources_merge_in_key_order() {
        let ids = IdAllocator::new();
        let active = Arc::new(RowTable::new(ids.next_id(), 1 << 20, 64));
        active.put(mkrow(5, 50), Version(30)).unwrap();
        let mut t = TableLayout::new(active, ids.next_id());
        t.delta = vec![mkseg(&ids, &[(2, 20), (8, 80)], 10)];
        t.baseline = vec![mkseg(&ids, &[(1, 1), (3, 3), (9, 9)], 1)];
        t.buckets[0].covered_baseline = vec![t.baseline[0].id()];
        let mut scan = MergedScan::new(&t, i64::MIN, None, Version(30));
        assert_eq!(
            collect(&mut scan),
            vec![(1, 1), (2, 20), (3, 3), (5, 50), (8, 80), (9, 9)]
        );
    }
}
