//! The engine: foreground query API over snapshot layouts, the serialized
//! write lane, and background task orchestration.
//!
//! Write discipline (what keeps version-free segment rows correct):
//!
//!   - Single-row writes land in the active row table. A new version of a
//!     key whose old occurrence lives in a segment marks that segment's
//!     delete chain at the same version; a row-table-resident old version
//!     is simply shadowed by entry-version resolution.
//!   - Batched writes at or above the routing threshold are packed straight
//!     into delta segments — except rows whose key has any row-table
//!     presence (live or tombstone), which go to the row table so nothing
//!     above them can shadow the fresh write.
//!   - Foreground chain marks check compaction ownership under the mark
//!     lock; rows owned by an in-flight task get a row-table tombstone
//!     instead, which conversion later propagates downward.
//!
//! Conversions and delta compactions are serialized (each consumes an
//! oldest-first prefix, which is what makes layer position a recency rank);
//! bucket compactions run concurrently, one per bucket.

use std::collections::HashSet;
use std::io::Write as _;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock, Weak};
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};

use crate::compaction::{
    compact_bucket_to_baseline, compact_delta_to_transition, compute_traditional_c,
    convert_row_to_column, select_omega, split_metric, CompactionKind, CompactionMarkSet,
    GranularityConfig,
};
use crate::layout::{EditOp, EditRejected, KeyRange, Layout, LayoutEdit, LayoutManager, Snapshot, TableLayout};
use crate::merge::{MergedRow, MergedScan};
use crate::model::{
    validate_row, CellType, IdAllocator, Row, RowViolation, Schema, Value, Version, VersionCounter,
};
use crate::rowstore::{Lookup, PutStatus, RowTable};
use crate::scheduler::{
    forecast_idle, plan_tick, AdmissionRecord, Candidate, Clock, OpKind, PlanEntry, ProfileSet,
    SystemClock, TickCandidates,
};
use crate::segment::{build_segments, ColumnData, ColumnSegment, SourceRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EngineMode {
    /// All optimizations: background work gated by the cost-model scheduler.
    Synchro,
    /// Background work launches greedily the moment a trigger fires.
    NoScheduler,
    /// Row-to-column conversion disabled; updates pile up in row tables.
    IncrementalRow,
    /// Every small write is force-packed into its own delta segment.
    IncrementalCol,
}

impl std::str::FromStr for EngineMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "synchro" => Ok(EngineMode::Synchro),
            "no_scheduler" => Ok(EngineMode::NoScheduler),
            "incremental_row" => Ok(EngineMode::IncrementalRow),
            "incremental_col" => Ok(EngineMode::IncrementalCol),
            other => Err(format!("unknown engine mode {other:?}")),
        }
    }
}

impl EngineMode {
    pub fn name(&self) -> &'static str {
        match self {
            EngineMode::Synchro => "synchro",
            EngineMode::NoScheduler => "no_scheduler",
            EngineMode::IncrementalRow => "incremental_row",
            EngineMode::IncrementalCol => "incremental_col",
        }
    }
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub schemas: Vec<Schema>,
    pub mode: EngineMode,
    pub granularity: GranularityConfig,
    /// Batched writes at or above this many bytes go to delta segments.
    pub batch_threshold: u64,
    /// Delta-layer bytes that trigger delta-to-transition compaction.
    pub delta_trigger: u64,
    pub n_cores: usize,
    pub tick_interval: Duration,
    pub horizon_secs: f64,
    /// Seconds per cost unit; None calibrates with a startup micro-benchmark.
    pub unit_seconds_per_cost: Option<f64>,
    pub calibration: Duration,
    /// Run background tasks synchronously on the triggering thread
    /// (deterministic single-threaded operation for tests and experiments).
    pub inline_background: bool,
    /// Per-tick scheduler metrics file (line protocol), if any.
    pub scheduler_stats_path: Option<PathBuf>,
}

impl EngineConfig {
    pub fn new(schemas: Vec<Schema>, mode: EngineMode) -> Self {
        let g = GranularityConfig::default();
        EngineConfig {
            schemas,
            mode,
            granularity: g,
            batch_threshold: 4 << 20,
            delta_trigger: g.g_bytes,
            n_cores: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(2),
            tick_interval: Duration::from_millis(100),
            horizon_secs: 5.0,
            unit_seconds_per_cost: Some(5e-9),
            calibration: Duration::from_secs(1),
            inline_background: false,
            scheduler_stats_path: None,
        }
    }

    /// Same config but with the startup calibration enabled.
    pub fn with_calibration(mut self) -> Self {
        self.unit_seconds_per_cost = None;
        self
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("row validation failed: {0}")]
    Validation(#[from] RowViolation),
    #[error("duplicate key {0}")]
    DuplicateKey(i64),
    #[error("bulk insert batch not strictly ascending ({prev} then {next})")]
    UnsortedBatch { prev: i64, next: i64 },
    #[error("assignments may not touch the key column")]
    KeyColumnAssignment,
    #[error("empty projection")]
    EmptyProjection,
    #[error("column ordinal {0} out of range")]
    InvalidProjection(usize),
    #[error("column {0} is not int64")]
    NonIntColumn(usize),
    #[error("64-bit overflow during aggregation")]
    Overflow,
    #[error("unknown table {0}")]
    UnknownTable(usize),
    #[error("bad configuration: {0}")]
    Config(String),
}

/// Engine-wide read counters; the projection-locality and bloom-pruning
/// assertions read these.
#[derive(Debug, Default)]
pub struct EngineStats {
    /// Payload bytes decoded out of column segments by reads.
    pub bytes_decoded: AtomicU64,
    /// Segments whose keys were actually searched by point lookups.
    pub segments_searched: AtomicU64,
    /// Segments consulted (range + bloom check) by point lookups.
    pub segments_probed: AtomicU64,
    /// Buckets that wanted to split but covered a single baseline segment.
    pub split_warnings: AtomicU64,
}

impl EngineStats {
    pub fn reset(&self) {
        self.bytes_decoded.store(0, Ordering::Relaxed);
        self.segments_searched.store(0, Ordering::Relaxed);
        self.segments_probed.store(0, Ordering::Relaxed);
    }
}

/// One executed background task, for the benchmark report and the
/// granularity-bound checks.
#[derive(Debug, Clone)]
pub struct TaskRecord {
    pub kind: CompactionKind,
    pub input_bytes: u64,
    /// compute_traditional_c at launch: what a monolithic compaction would
    /// have processed instead.
    pub traditional_bytes: u64,
    pub duration_secs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsertOutcome {
    Inserted,
    Updated,
}

/// Columnar result of a projected scan.
#[derive(Debug)]
pub struct ProjectedBatch {
    pub row_count: usize,
    pub columns: Vec<ColumnData>,
}

// ---------------------------------------------------------------------------
// Plan registry: live query forecasts for the scheduler.

struct LivePlan {
    started: Duration,
    entries: Vec<PlanEntry>,
    progress: Arc<ProgressCell>,
}

#[derive(Debug, Default)]
pub struct ProgressCell {
    done: AtomicU64,
    total: AtomicU64,
}

impl ProgressCell {
    pub fn add(&self, rows: u64) {
        self.done.fetch_add(rows, Ordering::Relaxed);
    }
}

#[derive(Default)]
struct PlanRegistry {
    plans: Mutex<std::collections::HashMap<u64, LivePlan>>,
    next: AtomicU64,
}

impl PlanRegistry {
    fn register(&self, started: Duration, entries: Vec<PlanEntry>, total_rows: u64) -> (u64, Arc<ProgressCell>) {
        let id = self.next.fetch_add(1, Ordering::Relaxed);
        let progress = Arc::new(ProgressCell::default());
        progress.total.store(total_rows.max(1), Ordering::Relaxed);
        self.plans.lock().insert(
            id,
            LivePlan {
                started,
                entries,
                progress: Arc::clone(&progress),
            },
        );
        (id, progress)
    }

    fn deregister(&self, id: u64) {
        self.plans.lock().remove(&id);
    }

    /// Busy stretches (start offset from now, duration, workers) for the
    /// forecast. Running plans replace their estimate with a linear
    /// extrapolation from rows processed.
    fn busy_windows(&self, now: Duration) -> Vec<(f64, f64, u32)> {
        let plans = self.plans.lock();
        let mut out = Vec::with_capacity(plans.len());
        for p in plans.values() {
            let elapsed = now.saturating_sub(p.started).as_secs_f64();
            let est_total: f64 = p
                .entries
                .iter()
                .map(|e| e.start_offset + e.duration)
                .fold(0.0, f64::max);
            let done = p.progress.done.load(Ordering::Relaxed);
            let total = p.progress.total.load(Ordering::Relaxed).max(1);
            let f = done as f64 / total as f64;
            let remaining = if f > 0.0 && elapsed > 0.0 {
                (elapsed / f - elapsed).max(0.0)
            } else {
                (est_total - elapsed).max(0.0)
            };
            let workers = p.entries.iter().map(|e| e.workers).max().unwrap_or(1);
            if remaining > 0.0 {
                out.push((0.0, remaining, workers));
            }
        }
        out
    }
}

/// RAII registration of a query plan; records phi samples on completion.
struct PlanGuard {
    core: Arc<EngineCore>,
    id: u64,
    kind: OpKind,
    cost: f64,
    started_wall: Instant,
    progress: Arc<ProgressCell>,
}

impl PlanGuard {
    fn progress(&self) -> &ProgressCell {
        &self.progress
    }
}

impl Drop for PlanGuard {
    fn drop(&mut self) {
        self.core.plans.deregister(self.id);
        self.core
            .profiles
            .record_execution(self.kind, self.started_wall.elapsed().as_secs_f64(), self.cost);
    }
}

// ---------------------------------------------------------------------------
// Background executor: bounded detached workers.

struct Executor {
    max: usize,
    running: Mutex<usize>,
    idle: Condvar,
}

impl Executor {
    fn new(max: usize) -> Self {
        Executor {
            max: max.max(1),
            running: Mutex::new(0),
            idle: Condvar::new(),
        }
    }

    fn try_acquire(&self) -> bool {
        let mut n = self.running.lock();
        if *n >= self.max {
            return false;
        }
        *n += 1;
        true
    }

    fn release(&self) {
        let mut n = self.running.lock();
        *n -= 1;
        if *n == 0 {
            self.idle.notify_all();
        }
    }

    fn wait_idle(&self) {
        let mut n = self.running.lock();
        while *n > 0 {
            self.idle.wait(&mut n);
        }
    }

    fn running(&self) -> usize {
        *self.running.lock()
    }
}

// ---------------------------------------------------------------------------

/// Where a key's authoritative occurrence was found.
enum Located {
    TableRow,
    TableTombstone,
    SegmentRow {
        seg: Arc<ColumnSegment>,
        offset: u32,
        visible: bool,
    },
    Absent,
}

impl Located {
    fn is_visible_row(&self) -> bool {
        matches!(self, Located::TableRow)
            || matches!(self, Located::SegmentRow { visible: true, .. })
    }

    fn has_table_presence(&self) -> bool {
        matches!(self, Located::TableRow | Located::TableTombstone)
    }
}

pub struct EngineCore {
    cfg: EngineConfig,
    versions: Arc<VersionCounter>,
    ids: Arc<IdAllocator>,
    mgr: LayoutManager,
    marks: CompactionMarkSet,
    write_lanes: Vec<Mutex<()>>,
    profiles: Arc<ProfileSet>,
    plans: PlanRegistry,
    clock: Arc<dyn Clock>,
    exec: Executor,
    stats: EngineStats,
    task_log: Mutex<Vec<TaskRecord>>,
    admission_log: Mutex<Vec<AdmissionRecord>>,
    metrics: Option<Mutex<std::io::BufWriter<std::fs::File>>>,
    shutdown: AtomicBool,
    conversion_inflight: Vec<AtomicBool>,
    delta_inflight: Vec<AtomicBool>,
    scheduler_g: AtomicUsize,
    self_ref: OnceLock<Weak<EngineCore>>,
}

/// Public handle; dropping it stops the scheduler and waits for background
/// work to finish.
pub struct Engine {
    core: Arc<EngineCore>,
    tick_thread: Option<std::thread::JoinHandle<()>>,
}

impl std::ops::Deref for Engine {
    type Target = EngineCore;
    fn deref(&self) -> &EngineCore {
        &self.core
    }
}

impl Drop for Engine {
    fn drop(&mut self) {
        self.core.shutdown.store(true, Ordering::Release);
        if let Some(t) = self.tick_thread.take() {
            let _ = t.join();
        }
        self.core.exec.wait_idle();
    }
}

impl Engine {
    pub fn new(cfg: EngineConfig) -> Result<Engine, EngineError> {
        Self::from_state(cfg, None)
    }

    /// Build an engine, optionally from pre-loaded layout state
    /// (persistence open path).
    pub(crate) fn from_state(
        cfg: EngineConfig,
        state: Option<(Vec<TableLayout>, u64, u64)>,
    ) -> Result<Engine, EngineError> {
        cfg.granularity
            .validate()
            .map_err(EngineError::Config)?;
        if cfg.schemas.is_empty() {
            return Err(EngineError::Config("no table schemas".into()));
        }
        let unit = match cfg.unit_seconds_per_cost {
            Some(u) => u,
            None => calibrate_unit(cfg.calibration, &cfg.schemas[0]),
        };
        let (tables, versions, ids) = match state {
            Some((tables, current_version, next_id)) => (
                tables,
                Arc::new(VersionCounter::starting_at(current_version)),
                Arc::new(IdAllocator::starting_at(next_id)),
            ),
            None => {
                let ids = Arc::new(IdAllocator::new());
                let tables = cfg
                    .schemas
                    .iter()
                    .map(|s| {
                        TableLayout::new(
                            Arc::new(new_rowtable(&ids, &cfg.granularity, s)),
                            ids.next_id(),
                        )
                    })
                    .collect();
                (tables, Arc::new(VersionCounter::new()), ids)
            }
        };
        let ntables = tables.len();
        let mgr = LayoutManager::new(
            cfg.schemas.clone(),
            Arc::clone(&versions),
            Arc::clone(&ids),
            Layout {
                layout_version: 0,
                tables,
            },
        );
        let metrics = match &cfg.scheduler_stats_path {
            Some(p) => Some(Mutex::new(std::io::BufWriter::new(
                std::fs::File::create(p).map_err(|e| EngineError::Config(e.to_string()))?,
            ))),
            None => None,
        };
        let mode = cfg.mode;
        let tick_interval = cfg.tick_interval;
        let core = Arc::new(EngineCore {
            exec: Executor::new(cfg.n_cores.saturating_sub(1).max(1)),
            write_lanes: (0..ntables).map(|_| Mutex::new(())).collect(),
            conversion_inflight: (0..ntables).map(|_| AtomicBool::new(false)).collect(),
            delta_inflight: (0..ntables).map(|_| AtomicBool::new(false)).collect(),
            profiles: Arc::new(ProfileSet::new(unit)),
            plans: PlanRegistry::default(),
            clock: Arc::new(SystemClock::new()),
            stats: EngineStats::default(),
            task_log: Mutex::new(Vec::new()),
            admission_log: Mutex::new(Vec::new()),
            metrics,
            shutdown: AtomicBool::new(false),
            scheduler_g: AtomicUsize::new(0),
            self_ref: OnceLock::new(),
            marks: CompactionMarkSet::new(),
            versions,
            ids,
            mgr,
            cfg,
        });
        core.self_ref.set(Arc::downgrade(&core)).ok();
        let tick_thread = if mode == EngineMode::Synchro {
            let c = Arc::clone(&core);
            Some(std::thread::spawn(move || c.tick_loop(tick_interval)))
        } else {
            None
        };
        Ok(Engine { core, tick_thread })
    }
}

fn new_rowtable(ids: &IdAllocator, g: &GranularityConfig, schema: &Schema) -> RowTable {
    let est_row: u64 = schema
        .columns()
        .iter()
        .map(|(_, t)| match t {
            CellType::Int64 => 8u64,
            CellType::Utf8 => 64,
        })
        .sum();
    let expected = (g.rowtable_cap / est_row.max(1)).max(64) as usize;
    RowTable::new(ids.next_id(), g.rowtable_cap, expected)
}

/// Seconds per cost unit, measured by scanning a synthetic segment for
/// roughly `duration`.
fn calibrate_unit(duration: Duration, schema: &Schema) -> f64 {
    let ids = IdAllocator::new();
    let rows: Vec<SourceRow> = (0..65_536i64)
        .map(|k| {
            let cells = schema
                .columns()
                .iter()
                .map(|(_, t)| match t {
                    CellType::Int64 => Value::Int(k),
                    CellType::Utf8 => Value::Str("calibration-payload".into()),
                })
                .collect();
            SourceRow::live(Arc::new(Row::new(k, cells)))
        })
        .collect();
    let mut it = rows.into_iter().peekable();
    let seg = build_segments(&mut it, schema, u64::MAX, None, || ids.next_id(), Version(1))
        .expect("calibration rows are sorted")
        .pop()
        .expect("non-empty calibration segment");
    let weight = cost_weight(schema, &[0]);
    let start = Instant::now();
    let mut cost = 0.0f64;
    let mut acc = 0i64;
    while start.elapsed() < duration {
        for &k in seg.keys() {
            acc = acc.wrapping_add(k);
        }
        cost += seg.row_count() as f64 * weight;
    }
    std::hint::black_box(acc);
    let elapsed = start.elapsed().as_secs_f64();
    if cost > 0.0 {
        elapsed / cost
    } else {
        5e-9
    }
}

/// Column-width weights: int columns cost 1 unit per row, strings 4.
fn cost_weight(schema: &Schema, cols: &[usize]) -> f64 {
    cols.iter()
        .map(|&c| match schema.column_type(c) {
            CellType::Int64 => 1.0,
            CellType::Utf8 => 4.0,
        })
        .sum()
}

impl EngineCore {
    fn arc(&self) -> Arc<EngineCore> {
        self.self_ref
            .get()
            .and_then(Weak::upgrade)
            .expect("engine core alive")
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn mode(&self) -> EngineMode {
        self.cfg.mode
    }

    pub fn schema(&self, table: usize) -> &Schema {
        &self.cfg.schemas[table]
    }

    pub fn stats(&self) -> &EngineStats {
        &self.stats
    }

    pub fn current_version(&self) -> Version {
        self.versions.current()
    }

    pub fn snapshot(&self) -> Snapshot {
        self.mgr.acquire_snapshot()
    }

    pub fn latest_layout(&self) -> Arc<Layout> {
        self.mgr.latest()
    }

    pub fn layout_manager(&self) -> &LayoutManager {
        &self.mgr
    }

    pub fn take_task_log(&self) -> Vec<TaskRecord> {
        std::mem::take(&mut self.task_log.lock())
    }

    pub fn take_admission_log(&self) -> Vec<AdmissionRecord> {
        std::mem::take(&mut self.admission_log.lock())
    }

    fn check_table(&self, table: usize) -> Result<(), EngineError> {
        if table >= self.cfg.schemas.len() {
            return Err(EngineError::UnknownTable(table));
        }
        Ok(())
    }

    // -- lookups ----------------------------------------------------------

    /// Authoritative occurrence of `key` at `read_v`: row tables newest
    /// first by entry version, then the first segment containing the key in
    /// structural order (delta newest position first, routed bucket, then
    /// baseline).
    fn locate(&self, t: &TableLayout, key: i64, read_v: Version) -> Located {
        match t.active.get(key, read_v) {
            Lookup::Row(_) => return Located::TableRow,
            Lookup::Tombstone(_) => return Located::TableTombstone,
            Lookup::Absent => {}
        }
        for f in t.frozen.iter().rev() {
            match f.get(key, read_v) {
                Lookup::Row(_) => return Located::TableRow,
                Lookup::Tombstone(_) => return Located::TableTombstone,
                Lookup::Absent => {}
            }
        }
        let segment_hit = |seg: &Arc<ColumnSegment>| -> Option<Located> {
            self.stats.segments_probed.fetch_add(1, Ordering::Relaxed);
            if !seg.maybe_contains(key) {
                return None;
            }
            self.stats.segments_searched.fetch_add(1, Ordering::Relaxed);
            seg.find_key(key).map(|offset| Located::SegmentRow {
                seg: Arc::clone(seg),
                offset,
                visible: seg.visible_rows(read_v).is_visible(offset),
            })
        };
        for seg in t.delta.iter().rev() {
            if let Some(l) = segment_hit(seg) {
                return l;
            }
        }
        let bucket = t.route_bucket(key);
        for seg in bucket.segments.iter().rev() {
            if let Some(l) = segment_hit(seg) {
                return l;
            }
        }
        let idx = t.baseline.partition_point(|s| s.key_range().1 < key);
        if let Some(seg) = t.baseline.get(idx) {
            if let Some(l) = segment_hit(seg) {
                return l;
            }
        }
        Located::Absent
    }

    /// Point lookup at the latest version.
    pub fn get(&self, table: usize, key: i64) -> Result<Option<Row>, EngineError> {
        self.check_table(table)?;
        let snap = self.snapshot();
        Ok(self.get_at(&snap, table, key))
    }

    /// Point lookup against a held snapshot.
    pub fn get_at(&self, snap: &Snapshot, table: usize, key: i64) -> Option<Row> {
        let t = snap.table(table);
        // Reuse locate but materialize row payloads.
        match t.active.get(key, snap.read_version()) {
            Lookup::Row(r) => return Some((*r).clone()),
            Lookup::Tombstone(_) => return None,
            Lookup::Absent => {}
        }
        for f in t.frozen.iter().rev() {
            match f.get(key, snap.read_version()) {
                Lookup::Row(r) => return Some((*r).clone()),
                Lookup::Tombstone(_) => return None,
                Lookup::Absent => {}
            }
        }
        match self.locate_segments_only(t, key, snap.read_version()) {
            Some((seg, offset, true)) => {
                let row = seg.row_at(offset);
                self.stats
                    .bytes_decoded
                    .fetch_add(row.encoded_len(), Ordering::Relaxed);
                Some(row)
            }
            _ => None,
        }
    }

    fn locate_segments_only(
        &self,
        t: &TableLayout,
        key: i64,
        read_v: Version,
    ) -> Option<(Arc<ColumnSegment>, u32, bool)> {
        let hit = |seg: &Arc<ColumnSegment>| -> Option<(Arc<ColumnSegment>, u32, bool)> {
            self.stats.segments_probed.fetch_add(1, Ordering::Relaxed);
            if !seg.maybe_contains(key) {
                return None;
            }
            self.stats.segments_searched.fetch_add(1, Ordering::Relaxed);
            seg.find_key(key).map(|offset| {
                let visible = seg.visible_rows(read_v).is_visible(offset);
                (Arc::clone(seg), offset, visible)
            })
        };
        for seg in t.delta.iter().rev() {
            if let Some(h) = hit(seg) {
                return Some(h);
            }
        }
        let bucket = t.route_bucket(key);
        for seg in bucket.segments.iter().rev() {
            if let Some(h) = hit(seg) {
                return Some(h);
            }
        }
        let idx = t.baseline.partition_point(|s| s.key_range().1 < key);
        if let Some(seg) = t.baseline.get(idx) {
            if let Some(h) = hit(seg) {
                return Some(h);
            }
        }
        None
    }

    // -- writes -----------------------------------------------------------

    /// Put through the active table, rotating when a put fills it.
    fn put_active(&self, table: usize, row: Arc<Row>, v: Version) {
        loop {
            let active = {
                let layout = self.mgr.latest();
                Arc::clone(&layout.table(table).active)
            };
            match active.put(Arc::clone(&row), v) {
                Ok(PutStatus::Ok) => return,
                Ok(PutStatus::Full) => {
                    self.rotate_active(table, &active);
                    return;
                }
                Err(_) => {
                    // Lost a race with rotation inside this same lane is
                    // impossible; a frozen active here means a prior Full
                    // rotated it. Retry on the fresh table.
                    continue;
                }
            }
        }
    }

    fn delete_mark_active(&self, table: usize, key: i64, v: Version) {
        loop {
            let active = {
                let layout = self.mgr.latest();
                Arc::clone(&layout.table(table).active)
            };
            match active.delete_mark(key, v) {
                Ok(PutStatus::Ok) => return,
                Ok(PutStatus::Full) => {
                    self.rotate_active(table, &active);
                    return;
                }
                Err(_) => continue,
            }
        }
    }

    /// Freeze the (full) active table and install a fresh one.
    fn rotate_active(&self, table: usize, full: &Arc<RowTable>) {
        full.freeze();
        let fresh = Arc::new(new_rowtable(&self.ids, &self.cfg.granularity, &self.cfg.schemas[table]));
        self.mgr
            .publish(LayoutEdit {
                table,
                op: EditOp::RotateActive {
                    expected_active: full.id(),
                    new_active: fresh,
                },
            })
            .expect("rotation is serialized by the write lane");
        self.kick_background();
    }

    /// Gated chain mark: falls back to a row-table tombstone when the
    /// segment is owned by an in-flight compaction.
    fn mark_segment_row(
        &self,
        table: usize,
        seg: &Arc<ColumnSegment>,
        offset: u32,
        key: i64,
        v: Version,
    ) {
        let marked = self.marks.unmarked_then(seg.id(), || {
            seg.mark_delete(&[offset], v)
                .expect("foreground delete versions are monotone");
        });
        if marked.is_none() {
            self.delete_mark_active(table, key, v);
        }
    }

    /// Batch variant: one statement deletes several rows of one segment at
    /// a single version (one appended bitmap, per the batch-delete rule).
    fn mark_segment_rows(
        &self,
        table: usize,
        seg: &Arc<ColumnSegment>,
        offsets: &[u32],
        keys: &[i64],
        v: Version,
    ) {
        let marked = self.marks.unmarked_then(seg.id(), || {
            seg.mark_delete(offsets, v)
                .expect("foreground delete versions are monotone");
        });
        if marked.is_none() {
            for &key in keys {
                self.delete_mark_active(table, key, v);
            }
        }
    }

    pub fn insert(&self, table: usize, row: Row) -> Result<Version, EngineError> {
        self.check_table(table)?;
        validate_row(&self.cfg.schemas[table], &row)?;
        let _lane = self.write_lanes[table].lock();
        let snap = self.snapshot();
        let located = self.locate(snap.table(table), row.key, snap.read_version());
        if located.is_visible_row() {
            return Err(EngineError::DuplicateKey(row.key));
        }
        let v = self.versions.next_version();
        if self.cfg.mode == EngineMode::IncrementalCol && !located.has_table_presence() {
            self.force_pack_delta(table, vec![Arc::new(row)], v);
        } else {
            self.put_active(table, Arc::new(row), v);
        }
        drop(snap);
        self.maintenance();
        Ok(v)
    }

    /// Pack rows (key-sorted) straight into delta segments at version `v`.
    fn force_pack_delta(&self, table: usize, rows: Vec<Arc<Row>>, v: Version) {
        let mut it = rows
            .into_iter()
            .map(SourceRow::live)
            .collect::<Vec<_>>()
            .into_iter()
            .peekable();
        let segments = build_segments(
            &mut it,
            &self.cfg.schemas[table],
            self.cfg.granularity.segment_cap,
            None,
            || self.ids.next_id(),
            v,
        )
        .expect("delta-bound rows are key-sorted")
        .into_iter()
        .map(Arc::new)
        .collect();
        self.mgr
            .publish(LayoutEdit {
                table,
                op: EditOp::AddDelta { segments },
            })
            .expect("AddDelta edits cannot be stale");
    }

    pub fn bulk_insert(&self, table: usize, rows: Vec<Row>) -> Result<Version, EngineError> {
        self.check_table(table)?;
        for row in &rows {
            validate_row(&self.cfg.schemas[table], row)?;
        }
        for pair in rows.windows(2) {
            if pair[1].key <= pair[0].key {
                return Err(EngineError::UnsortedBatch {
                    prev: pair[0].key,
                    next: pair[1].key,
                });
            }
        }
        let _lane = self.write_lanes[table].lock();
        let snap = self.snapshot();
        let t = snap.table(table);
        let mut table_bound = Vec::new();
        let mut delta_bound = Vec::new();
        let total_bytes: u64 = rows.iter().map(Row::encoded_len).sum();
        let to_delta = total_bytes >= self.cfg.batch_threshold
            || self.cfg.mode == EngineMode::IncrementalCol;
        for row in rows {
            let located = self.locate(t, row.key, snap.read_version());
            if located.is_visible_row() {
                return Err(EngineError::DuplicateKey(row.key));
            }
            // A row-table tombstone above the delta layer would shadow a
            // packed row, so such keys take the row-table path.
            if to_delta && !located.has_table_presence() {
                delta_bound.push(Arc::new(row));
            } else {
                table_bound.push(Arc::new(row));
            }
        }
        drop(snap);
        let v = self.versions.next_version();
        if !delta_bound.is_empty() {
            self.force_pack_delta(table, delta_bound, v);
        }
        for row in table_bound {
            self.put_active(table, row, v);
        }
        self.maintenance();
        Ok(v)
    }

    pub fn upsert(&self, table: usize, row: Row) -> Result<(UpsertOutcome, Version), EngineError> {
        self.check_table(table)?;
        validate_row(&self.cfg.schemas[table], &row)?;
        let _lane = self.write_lanes[table].lock();
        let snap = self.snapshot();
        let located = self.locate(snap.table(table), row.key, snap.read_version());
        let v = self.versions.next_version();
        let outcome = match &located {
            Located::SegmentRow {
                seg,
                offset,
                visible: true,
            } => {
                self.mark_segment_row(table, seg, *offset, row.key, v);
                UpsertOutcome::Updated
            }
            Located::TableRow => UpsertOutcome::Updated, // shadowed by version
            _ => UpsertOutcome::Inserted,
        };
        if self.cfg.mode == EngineMode::IncrementalCol && !located.has_table_presence() {
            self.force_pack_delta(table, vec![Arc::new(row)], v);
        } else {
            self.put_active(table, Arc::new(row), v);
        }
        drop(snap);
        self.maintenance();
        Ok((outcome, v))
    }

    /// Apply assignments to every visible row with key in `[lo, hi)`. One
    /// version covers the whole statement. New-row payloads totalling at
    /// least the batch threshold are packed to delta segments; rows whose
    /// old occurrence is row-table-resident stay in the row table either
    /// way.
    pub fn update_where(
        &self,
        table: usize,
        lo: i64,
        hi: Option<i64>,
        assignments: &[(usize, Value)],
    ) -> Result<(usize, Version), EngineError> {
        self.check_table(table)?;
        let schema = &self.cfg.schemas[table];
        for (col, value) in assignments {
            if *col == 0 {
                return Err(EngineError::KeyColumnAssignment);
            }
            if *col >= schema.column_count() {
                return Err(EngineError::InvalidProjection(*col));
            }
            if value.cell_type() != schema.column_type(*col) {
                return Err(EngineError::Validation(RowViolation::CellType {
                    ordinal: *col,
                    expected: schema.column_type(*col),
                    got: value.cell_type(),
                }));
            }
        }
        let _lane = self.write_lanes[table].lock();
        let snap = self.snapshot();
        let t = snap.table(table);
        // Materialize matches with provenance.
        enum Old {
            Table,
            Segment { seg: Arc<ColumnSegment>, offset: u32 },
        }
        let mut matches: Vec<(Row, Old)> = Vec::new();
        let mut scan = MergedScan::new(t, lo, hi, snap.read_version());
        while let Some(item) = scan.next_item() {
            match item {
                MergedRow::Table { row, .. } => matches.push(((*row).clone(), Old::Table)),
                MergedRow::SegmentRun { src, start, end } => {
                    let seg = Arc::clone(scan.segment(src));
                    let view = scan.source_view(src).clone();
                    for off in start..end {
                        if view.is_visible(off) {
                            matches.push((
                                seg.row_at(off),
                                Old::Segment {
                                    seg: Arc::clone(&seg),
                                    offset: off,
                                },
                            ));
                        }
                    }
                }
            }
        }
        if matches.is_empty() {
            return Ok((0, snap.read_version()));
        }
        let v = self.versions.next_version();
        let mut new_bytes = 0u64;
        for (row, _) in &mut matches {
            for (col, value) in assignments {
                row.cells[*col] = value.clone();
            }
            new_bytes += row.encoded_len();
        }
        let batch_to_delta = new_bytes >= self.cfg.batch_threshold
            || self.cfg.mode == EngineMode::IncrementalCol;
        let count = matches.len();
        let mut delta_rows = Vec::new();
        let mut seg_marks: Vec<(Arc<ColumnSegment>, Vec<u32>, Vec<i64>)> = Vec::new();
        for (row, old) in matches {
            match old {
                Old::Segment { seg, offset } => {
                    match seg_marks.iter_mut().find(|(s, ..)| s.id() == seg.id()) {
                        Some((_, offs, keys)) => {
                            offs.push(offset);
                            keys.push(row.key);
                        }
                        None => seg_marks.push((seg, vec![offset], vec![row.key])),
                    }
                    if batch_to_delta {
                        delta_rows.push(Arc::new(row));
                    } else {
                        self.put_active(table, Arc::new(row), v);
                    }
                }
                Old::Table => {
                    // Shadow by version within the row-table layers.
                    self.put_active(table, Arc::new(row), v);
                }
            }
        }
        for (seg, offs, keys) in seg_marks {
            self.mark_segment_rows(table, &seg, &offs, &keys, v);
        }
        if !delta_rows.is_empty() {
            self.force_pack_delta(table, delta_rows, v);
        }
        drop(snap);
        self.maintenance();
        Ok((count, v))
    }

    /// Mark every visible row with key in `[lo, hi)` deleted at a single
    /// version. Rows stay physically present until compaction drops them.
    pub fn delete_where(
        &self,
        table: usize,
        lo: i64,
        hi: Option<i64>,
    ) -> Result<(usize, Version), EngineError> {
        self.check_table(table)?;
        let _lane = self.write_lanes[table].lock();
        let snap = self.snapshot();
        let t = snap.table(table);
        enum Target {
            Table(i64),
            Segment {
                seg: Arc<ColumnSegment>,
                offset: u32,
                key: i64,
            },
        }
        let mut targets = Vec::new();
        let mut scan = MergedScan::new(t, lo, hi, snap.read_version());
        while let Some(item) = scan.next_item() {
            match item {
                MergedRow::Table { key, .. } => targets.push(Target::Table(key)),
                MergedRow::SegmentRun { src, start, end } => {
                    let seg = Arc::clone(scan.segment(src));
                    let view = scan.source_view(src).clone();
                    for off in start..end {
                        if view.is_visible(off) {
                            targets.push(Target::Segment {
                                seg: Arc::clone(&seg),
                                offset: off,
                                key: seg.keys()[off as usize],
                            });
                        }
                    }
                }
            }
        }
        if targets.is_empty() {
            return Ok((0, snap.read_version()));
        }
        let v = self.versions.next_version();
        let count = targets.len();
        let mut seg_marks: Vec<(Arc<ColumnSegment>, Vec<u32>, Vec<i64>)> = Vec::new();
        for target in targets {
            match target {
                Target::Table(key) => self.delete_mark_active(table, key, v),
                Target::Segment { seg, offset, key } => {
                    match seg_marks.iter_mut().find(|(s, ..)| s.id() == seg.id()) {
                        Some((_, offs, keys)) => {
                            offs.push(offset);
                            keys.push(key);
                        }
                        None => seg_marks.push((seg, vec![offset], vec![key])),
                    }
                }
            }
        }
        for (seg, offs, keys) in seg_marks {
            self.mark_segment_rows(table, &seg, &offs, &keys, v);
        }
        drop(snap);
        self.maintenance();
        Ok((count, v))
    }

    // -- reads ------------------------------------------------------------

    fn estimated_range_rows(&self, t: &TableLayout, lo: i64, hi: Option<i64>) -> u64 {
        let mut rows = 0u64;
        let seg_rows = |seg: &Arc<ColumnSegment>| -> u64 {
            let keys = seg.keys();
            let start = keys.partition_point(|&k| k < lo);
            let end = match hi {
                Some(h) => keys.partition_point(|&k| k < h),
                None => keys.len(),
            };
            (end - start) as u64
        };
        for seg in &t.delta {
            rows += seg_rows(seg);
        }
        for b in &t.buckets {
            for seg in &b.segments {
                rows += seg_rows(seg);
            }
        }
        for seg in &t.baseline {
            rows += seg_rows(seg);
        }
        rows += t.active.entry_count() as u64;
        for f in &t.frozen {
            rows += f.entry_count() as u64;
        }
        rows
    }

    fn register_plan(
        &self,
        kind: OpKind,
        cost: f64,
        est_rows: u64,
        extra: Option<(OpKind, f64)>,
    ) -> PlanGuard {
        let mut entries = vec![PlanEntry {
            op_kind: kind,
            cost,
            workers: 1,
            start_offset: 0.0,
            duration: self.profiles.estimate_duration(kind, cost),
        }];
        if let Some((k2, c2)) = extra {
            let first = entries[0].duration;
            entries.push(PlanEntry {
                op_kind: k2,
                cost: c2,
                workers: 1,
                start_offset: first,
                duration: self.profiles.estimate_duration(k2, c2),
            });
        }
        let (id, progress) = self.plans.register(self.clock.now(), entries, est_rows);
        PlanGuard {
            core: self.arc(),
            id,
            kind,
            cost,
            started_wall: Instant::now(),
            progress,
        }
    }

    /// Projected range scan with layered merge semantics. Only the
    /// projected columns are decoded from segments.
    pub fn scan_project(
        &self,
        table: usize,
        lo: i64,
        hi: Option<i64>,
        projection: &[usize],
    ) -> Result<ProjectedBatch, EngineError> {
        self.check_table(table)?;
        let snap = self.snapshot();
        self.scan_project_at(&snap, table, lo, hi, projection)
    }

    /// Same as `scan_project` but against a held snapshot.
    pub fn scan_project_at(
        &self,
        snap: &Snapshot,
        table: usize,
        lo: i64,
        hi: Option<i64>,
        projection: &[usize],
    ) -> Result<ProjectedBatch, EngineError> {
        let schema = &self.cfg.schemas[table];
        if projection.is_empty() {
            return Err(EngineError::EmptyProjection);
        }
        for &p in projection {
            if p >= schema.column_count() {
                return Err(EngineError::InvalidProjection(p));
            }
        }
        let t = snap.table(table);
        let est_rows = self.estimated_range_rows(t, lo, hi);
        let guard = self.register_plan(
            OpKind::Scan,
            est_rows as f64 * cost_weight(schema, projection),
            est_rows,
            None,
        );

        let mut columns: Vec<ColumnData> = projection
            .iter()
            .map(|&p| ColumnData::with_capacity_pub(schema.column_type(p), 0))
            .collect();
        let mut row_count = 0usize;
        let mut decoded = 0u64;
        let mut scan = MergedScan::new(t, lo, hi, snap.read_version());
        while let Some(item) = scan.next_item() {
            match item {
                MergedRow::Table { row, .. } => {
                    for (out, &p) in columns.iter_mut().zip(projection) {
                        decoded += row.cells[p].encoded_len();
                        out.push_value(&row.cells[p]);
                    }
                    row_count += 1;
                }
                MergedRow::SegmentRun { src, start, end } => {
                    let seg = scan.segment(src);
                    let view = scan.source_view(src);
                    for (out, &p) in columns.iter_mut().zip(projection) {
                        decoded += out.extend_from_segment(seg.column(p), view, start, end);
                    }
                    row_count += view_visible_count(view, start, end);
                }
            }
            if row_count % 4096 == 0 {
                guard.progress().add(4096);
            }
        }
        self.stats.bytes_decoded.fetch_add(decoded, Ordering::Relaxed);
        Ok(ProjectedBatch { row_count, columns })
    }

    /// Per-row sums of the selected int columns over the visible rows of
    /// `[lo, hi)`, overflow-checked.
    pub fn agg_sum(
        &self,
        table: usize,
        lo: i64,
        hi: Option<i64>,
        cols: &[usize],
    ) -> Result<Vec<i64>, EngineError> {
        self.int_agg(table, lo, hi, cols, OpKind::AggSum, |values| {
            let mut acc = 0i64;
            for v in values {
                acc = acc.checked_add(*v).ok_or(EngineError::Overflow)?;
            }
            Ok(acc)
        })
        .map(|(per_row, _)| per_row)
    }

    /// Per-column maxima over the visible rows of `[lo, hi)`; None when the
    /// range is empty.
    pub fn agg_max(
        &self,
        table: usize,
        lo: i64,
        hi: Option<i64>,
        cols: &[usize],
    ) -> Result<Vec<Option<i64>>, EngineError> {
        self.check_table(table)?;
        let schema = &self.cfg.schemas[table];
        validate_int_cols(schema, cols)?;
        let snap = self.snapshot();
        let t = snap.table(table);
        let est = self.estimated_range_rows(t, lo, hi);
        let guard = self.register_plan(
            OpKind::AggMax,
            est as f64 * cost_weight(schema, cols),
            est,
            None,
        );
        let mut maxima: Vec<Option<i64>> = vec![None; cols.len()];
        let mut decoded = 0u64;
        self.for_each_int_row(&snap, table, lo, hi, cols, &guard, &mut decoded, |values| {
            for (m, v) in maxima.iter_mut().zip(values) {
                *m = Some(m.map_or(*v, |cur: i64| cur.max(*v)));
            }
            Ok(())
        })?;
        self.stats.bytes_decoded.fetch_add(decoded, Ordering::Relaxed);
        Ok(maxima)
    }

    fn int_agg(
        &self,
        table: usize,
        lo: i64,
        hi: Option<i64>,
        cols: &[usize],
        kind: OpKind,
        mut fold: impl FnMut(&[i64]) -> Result<i64, EngineError>,
    ) -> Result<(Vec<i64>, u64), EngineError> {
        self.check_table(table)?;
        let schema = &self.cfg.schemas[table];
        validate_int_cols(schema, cols)?;
        let snap = self.snapshot();
        let t = snap.table(table);
        let est = self.estimated_range_rows(t, lo, hi);
        let guard = self.register_plan(kind, est as f64 * cost_weight(schema, cols), est, None);
        let mut out = Vec::new();
        let mut decoded = 0u64;
        self.for_each_int_row(&snap, table, lo, hi, cols, &guard, &mut decoded, |values| {
            out.push(fold(values)?);
            Ok(())
        })?;
        self.stats.bytes_decoded.fetch_add(decoded, Ordering::Relaxed);
        Ok((out, decoded))
    }

    fn for_each_int_row(
        &self,
        snap: &Snapshot,
        table: usize,
        lo: i64,
        hi: Option<i64>,
        cols: &[usize],
        guard: &PlanGuard,
        decoded: &mut u64,
        mut f: impl FnMut(&[i64]) -> Result<(), EngineError>,
    ) -> Result<(), EngineError> {
        let t = snap.table(table);
        let mut values = vec![0i64; cols.len()];
        let mut scan = MergedScan::new(t, lo, hi, snap.read_version());
        let mut seen = 0u64;
        while let Some(item) = scan.next_item() {
            match item {
                MergedRow::Table { row, .. } => {
                    for (slot, &c) in values.iter_mut().zip(cols) {
                        *slot = row.cells[c].as_int().expect("validated int column");
                    }
                    *decoded += 8 * cols.len() as u64;
                    f(&values)?;
                    seen += 1;
                }
                MergedRow::SegmentRun { src, start, end } => {
                    let seg = Arc::clone(scan.segment(src));
                    let view = scan.source_view(src).clone();
                    for off in start..end {
                        if view.is_visible(off) {
                            for (slot, &c) in values.iter_mut().zip(cols) {
                                *slot = seg.column(c).int_at(off).expect("validated int column");
                            }
                            *decoded += 8 * cols.len() as u64;
                            f(&values)?;
                            seen += 1;
                        }
                    }
                }
            }
            if seen >= 4096 {
                guard.progress().add(seen);
                seen = 0;
            }
        }
        guard.progress().add(seen);
        Ok(())
    }

    /// Hash join: build a key set over `build_table`'s primary keys, probe
    /// with `probe_table`'s range scan; emits (col_0, col_1) of probe rows
    /// whose `col_1` matches a build key and whose optional int-column
    /// filter passes.
    pub fn join(
        &self,
        probe_table: usize,
        probe_range: (i64, Option<i64>),
        filter: Option<(usize, i64, i64)>,
        build_table: usize,
    ) -> Result<Vec<(i64, i64)>, EngineError> {
        self.check_table(probe_table)?;
        self.check_table(build_table)?;
        if let Some((col, _, _)) = filter {
            validate_int_cols(&self.cfg.schemas[probe_table], &[col])?;
        }
        let snap = self.snapshot();

        // Build side: t2 primary keys are unique by construction.
        let bt = snap.table(build_table);
        let build_rows = self.estimated_range_rows(bt, i64::MIN, None);
        let build_guard =
            self.register_plan(OpKind::JoinBuild, build_rows as f64, build_rows, None);
        let mut build_keys: HashSet<i64> = HashSet::with_capacity(build_rows as usize);
        let mut scan = MergedScan::new(bt, i64::MIN, None, snap.read_version());
        while let Some(item) = scan.next_item() {
            match item {
                MergedRow::Table { key, .. } => {
                    build_keys.insert(key);
                }
                MergedRow::SegmentRun { src, start, end } => {
                    let seg = scan.segment(src);
                    let view = scan.source_view(src);
                    for off in start..end {
                        if view.is_visible(off) {
                            build_keys.insert(seg.keys()[off as usize]);
                        }
                    }
                }
            }
        }
        drop(build_guard);

        let pt = snap.table(probe_table);
        let est = self.estimated_range_rows(pt, probe_range.0, probe_range.1);
        let schema = &self.cfg.schemas[probe_table];
        let probe_cols = match filter {
            Some((c, _, _)) => vec![0usize, 1, c],
            None => vec![0usize, 1],
        };
        let probe_guard = self.register_plan(
            OpKind::JoinProbe,
            est as f64 * cost_weight(schema, &probe_cols),
            est,
            None,
        );
        let mut out = Vec::new();
        let mut decoded = 0u64;
        let mut emit = |key: i64, col1: i64, fval: Option<i64>| {
            if let (Some((_, flo, fhi)), Some(v)) = (filter, fval) {
                if v < flo || v >= fhi {
                    return;
                }
            }
            if build_keys.contains(&col1) {
                out.push((key, col1));
            }
        };
        let mut scan = MergedScan::new(pt, probe_range.0, probe_range.1, snap.read_version());
        while let Some(item) = scan.next_item() {
            match item {
                MergedRow::Table { key, row } => {
                    let col1 = row.cells[1].as_int().ok_or(EngineError::NonIntColumn(1))?;
                    let fval = filter.map(|(c, _, _)| row.cells[c].as_int().unwrap());
                    decoded += 16;
                    emit(key, col1, fval);
                }
                MergedRow::SegmentRun { src, start, end } => {
                    let seg = Arc::clone(scan.segment(src));
                    let view = scan.source_view(src).clone();
                    for off in start..end {
                        if view.is_visible(off) {
                            let key = seg.keys()[off as usize];
                            let col1 = seg
                                .column(1)
                                .int_at(off)
                                .ok_or(EngineError::NonIntColumn(1))?;
                            let fval = filter.map(|(c, _, _)| seg.column(c).int_at(off).unwrap());
                            decoded += 16;
                            emit(key, col1, fval);
                        }
                    }
                }
            }
        }
        drop(probe_guard);
        self.stats.bytes_decoded.fetch_add(decoded, Ordering::Relaxed);
        Ok(out)
    }

    // -- background -------------------------------------------------------

    /// Candidate tasks per spec priority, over the latest layout.
    fn candidates(&self) -> TickCandidates {
        let layout = self.mgr.latest();
        let mut out = TickCandidates::default();
        for (ti, t) in layout.tables.iter().enumerate() {
            if self.cfg.mode != EngineMode::IncrementalRow
                && out.conversion.is_none()
                && !self.conversion_inflight[ti].load(Ordering::Acquire)
            {
                if let Some(f) = t.frozen.first() {
                    out.conversion = Some(Candidate {
                        kind: CompactionKind::RowToColumn,
                        target: ti as u64,
                        estimated_bytes: f.size_bytes(),
                    });
                }
            }
            if out.delta.is_none() && !self.delta_inflight[ti].load(Ordering::Acquire) {
                let delta_bytes = t.delta_bytes();
                if delta_bytes >= self.cfg.delta_trigger && !t.delta.is_empty() {
                    out.delta = Some(Candidate {
                        kind: CompactionKind::DeltaToTransition,
                        target: ti as u64,
                        estimated_bytes: delta_bytes.min(self.cfg.granularity.g_bytes),
                    });
                }
            }
            for b in &t.buckets {
                let bytes = b.data_bytes();
                if bytes > self.cfg.granularity.t_bytes && !self.marks.is_marked(b.bucket_id) {
                    out.buckets.push(Candidate {
                        kind: CompactionKind::BucketToBaseline,
                        target: (ti as u64) << 32 | b.bucket_id,
                        estimated_bytes: bytes + t.baseline_bytes_in(&b.covered_baseline),
                    });
                }
            }
        }
        out.buckets.sort_by_key(|c| std::cmp::Reverse(c.estimated_bytes));
        out
    }

    /// Claim a candidate's inputs; on success return the runnable task.
    fn claim(&self, cand: &Candidate) -> Option<PlannedTask> {
        match cand.kind {
            CompactionKind::RowToColumn => {
                let table = cand.target as usize;
                if self.conversion_inflight[table].swap(true, Ordering::AcqRel) {
                    return None;
                }
                let layout = self.mgr.latest();
                let frozen = match layout.table(table).frozen.first() {
                    Some(f) => Arc::clone(f),
                    None => {
                        self.conversion_inflight[table].store(false, Ordering::Release);
                        return None;
                    }
                };
                if !self.marks.mark(&[frozen.id()]) {
                    self.conversion_inflight[table].store(false, Ordering::Release);
                    return None;
                }
                Some(PlannedTask::Convert { table, frozen })
            }
            CompactionKind::DeltaToTransition => {
                let table = cand.target as usize;
                if self.delta_inflight[table].swap(true, Ordering::AcqRel) {
                    return None;
                }
                let layout = self.mgr.latest();
                let omega = select_omega(
                    layout.table(table),
                    &self.marks,
                    self.cfg.granularity.g_bytes,
                );
                let ids: Vec<u64> = omega.iter().map(|s| s.id()).collect();
                if ids.is_empty() || !self.marks.mark(&ids) {
                    self.delta_inflight[table].store(false, Ordering::Release);
                    return None;
                }
                Some(PlannedTask::Delta { table, omega })
            }
            CompactionKind::BucketToBaseline => {
                let table = (cand.target >> 32) as usize;
                let bucket_id = cand.target & 0xffff_ffff;
                let layout = self.mgr.latest();
                let t = layout.table(table);
                let bucket = t.bucket_by_id(bucket_id)?;
                let inputs: Vec<Arc<ColumnSegment>> = bucket.segments.clone();
                let covered: Vec<Arc<ColumnSegment>> = t
                    .baseline
                    .iter()
                    .filter(|s| bucket.covered_baseline.contains(&s.id()))
                    .cloned()
                    .collect();
                let mut mark_ids = vec![bucket_id];
                mark_ids.extend(inputs.iter().map(|s| s.id()));
                mark_ids.extend(covered.iter().map(|s| s.id()));
                if inputs.is_empty() || !self.marks.mark(&mark_ids) {
                    return None;
                }
                Some(PlannedTask::Bucket {
                    table,
                    bucket_id,
                    inputs,
                    covered,
                    mark_ids,
                })
            }
        }
    }

    /// Launch whatever is triggered, immediately (non-scheduler modes).
    fn kick_background(&self) {
        if self.cfg.mode == EngineMode::Synchro || self.shutdown.load(Ordering::Acquire) {
            return;
        }
        loop {
            let c = self.candidates();
            let mut queue = Vec::new();
            if let Some(x) = c.conversion {
                queue.push(x);
            }
            if let Some(x) = c.delta {
                queue.push(x);
            }
            queue.extend(c.buckets);
            let mut launched_any = false;
            for cand in queue {
                if self.cfg.inline_background {
                    if let Some(task) = self.claim(&cand) {
                        self.run_task(task);
                        launched_any = true;
                    }
                } else if self.exec.try_acquire() {
                    match self.claim(&cand) {
                        Some(task) => {
                            let core = self.arc();
                            std::thread::spawn(move || {
                                core.run_task(task);
                                core.exec.release();
                                core.kick_background();
                            });
                            launched_any = true;
                        }
                        None => self.exec.release(),
                    }
                } else {
                    return; // executor full; completion will re-kick
                }
            }
            if !launched_any || !self.cfg.inline_background {
                return;
            }
        }
    }

    fn maintenance(&self) {
        match self.cfg.mode {
            EngineMode::Synchro => {}
            _ => self.kick_background(),
        }
    }

    fn run_task(&self, task: PlannedTask) {
        let started = Instant::now();
        let traditional: u64 = {
            let layout = self.mgr.latest();
            layout
                .tables
                .iter()
                .map(compute_traditional_c)
                .sum()
        };
        let (kind, input_bytes) = match &task {
            PlannedTask::Convert { frozen, .. } => {
                (CompactionKind::RowToColumn, frozen.size_bytes())
            }
            PlannedTask::Delta { omega, .. } => (
                CompactionKind::DeltaToTransition,
                omega.iter().map(|s| s.size_bytes()).sum(),
            ),
            PlannedTask::Bucket { inputs, covered, .. } => (
                CompactionKind::BucketToBaseline,
                inputs.iter().map(|s| s.size_bytes()).sum::<u64>()
                    + covered.iter().map(|s| s.size_bytes()).sum::<u64>(),
            ),
        };
        match &task {
            PlannedTask::Convert { table, frozen } => self.run_convert(*table, frozen),
            PlannedTask::Delta { table, omega } => self.run_delta(*table, omega),
            PlannedTask::Bucket {
                table,
                bucket_id,
                inputs,
                covered,
                ..
            } => self.run_bucket(*table, *bucket_id, inputs, covered),
        }
        // Release ownership.
        match &task {
            PlannedTask::Convert { table, frozen } => {
                self.marks.unmark(&[frozen.id()]);
                self.conversion_inflight[*table].store(false, Ordering::Release);
            }
            PlannedTask::Delta { table, omega } => {
                let ids: Vec<u64> = omega.iter().map(|s| s.id()).collect();
                self.marks.unmark(&ids);
                self.delta_inflight[*table].store(false, Ordering::Release);
            }
            PlannedTask::Bucket { mark_ids, .. } => {
                self.marks.unmark(mark_ids);
            }
        }
        let secs = started.elapsed().as_secs_f64();
        self.profiles.record_task_execution(kind, input_bytes, secs);
        self.task_log.lock().push(TaskRecord {
            kind,
            input_bytes,
            traditional_bytes: traditional,
            duration_secs: secs,
        });
    }

    fn run_convert(&self, table: usize, frozen: &Arc<RowTable>) {
        let create = self.versions.next_version();
        let out = convert_row_to_column(
            frozen,
            &self.cfg.schemas[table],
            self.cfg.granularity.segment_cap,
            &self.ids,
            create,
        )
        .expect("row table iterates in key order");
        let segments: Vec<Arc<ColumnSegment>> = out.segments.into_iter().map(Arc::new).collect();
        let table_id = frozen.id();
        loop {
            let result = self.mgr.publish_with(|mgr, cur| {
                let mut next = mgr.apply_edit(
                    cur,
                    &LayoutEdit {
                        table,
                        op: EditOp::ConvertRowTable {
                            table_id,
                            segments: segments.clone(),
                        },
                    },
                )?;
                // Propagate tombstones to whatever lower layer holds each
                // key now, in the same critical section.
                let t = &mut next.tables[table];
                for &(key, v) in &out.tombstones {
                    if let Some((seg, offset, _)) = self.locate_segments_only(t, key, Version(u64::MAX))
                    {
                        let done = self.marks.unmarked_then(seg.id(), || {
                            seg.chain()
                                .mark_single_unordered(seg.row_count(), offset, v);
                        });
                        if done.is_none() {
                            // Owned by an in-flight compaction; retry the
                            // whole publication after it finishes.
                            return Err(EditRejected::Stale("tombstone target owned".into()));
                        }
                    }
                }
                Ok(next)
            });
            match result {
                Ok(_) => break,
                Err(EditRejected::Stale(msg)) if msg.contains("tombstone target") => {
                    std::thread::sleep(Duration::from_millis(2));
                }
                Err(e) => panic!("conversion publish rejected: {e}"),
            }
        }
    }

    fn run_delta(&self, table: usize, omega: &[Arc<ColumnSegment>]) {
        let min_active = self.mgr.min_active_read_version();
        let create = self.versions.next_version();
        let input_ids: Vec<u64> = omega.iter().map(|s| s.id()).collect();
        loop {
            let buckets: Vec<(u64, KeyRange)> = {
                let layout = self.mgr.latest();
                layout
                    .table(table)
                    .buckets
                    .iter()
                    .map(|b| (b.bucket_id, b.range))
                    .collect()
            };
            let outputs = compact_delta_to_transition(
                omega,
                &buckets,
                &self.cfg.schemas[table],
                min_active,
                self.cfg.granularity.segment_cap,
                &self.ids,
                create,
            )
            .expect("merge emits sorted keys");
            let outputs: Vec<(u64, Vec<Arc<ColumnSegment>>)> = outputs
                .into_iter()
                .map(|(b, segs)| (b, segs.into_iter().map(Arc::new).collect()))
                .collect();
            match self.mgr.publish(LayoutEdit {
                table,
                op: EditOp::CompactDelta {
                    input_ids: input_ids.clone(),
                    outputs,
                },
            }) {
                Ok(_) => return,
                Err(EditRejected::UnknownBucket(_)) => continue, // split raced us
                Err(e) => panic!("delta compaction publish rejected: {e}"),
            }
        }
    }

    fn run_bucket(
        &self,
        table: usize,
        bucket_id: u64,
        inputs: &[Arc<ColumnSegment>],
        covered: &[Arc<ColumnSegment>],
    ) {
        let min_active = self.mgr.min_active_read_version();
        let new_baseline: Vec<Arc<ColumnSegment>> = compact_bucket_to_baseline(
            inputs,
            covered,
            &self.cfg.schemas[table],
            min_active,
            self.cfg.granularity.segment_cap,
            &self.ids,
        )
        .expect("merge emits sorted keys")
        .into_iter()
        .map(Arc::new)
        .collect();
        let edit = LayoutEdit {
            table,
            op: EditOp::CompactBucket {
                bucket_id,
                input_segment_ids: inputs.iter().map(|s| s.id()).collect(),
                replaced_baseline_ids: covered.iter().map(|s| s.id()).collect(),
                new_baseline,
            },
        };
        self.mgr
            .publish_with(|mgr, cur| {
                let mut next = mgr.apply_edit(cur, &edit)?;
                let t = &mut next.tables[table];
                let metric = {
                    let b = t
                        .bucket_by_id(bucket_id)
                        .expect("bucket survives its own compaction");
                    split_metric(b, t, &self.cfg.granularity)
                };
                if metric < 0 {
                    match mgr.split_bucket_in(t, bucket_id, table) {
                        Ok(()) => {}
                        Err(EditRejected::CannotSplit(_)) => {
                            // A single covered segment larger than G - T:
                            // report and carry on without splitting.
                            self.stats.split_warnings.fetch_add(1, Ordering::Relaxed);
                        }
                        Err(e) => panic!("split failed: {e}"),
                    }
                }
                Ok(next)
            })
            .expect("bucket inputs are owned by this task");
    }

    /// Run background work to quiescence on the calling thread. With
    /// `full`, the active row table is frozen and converted too and every
    /// bucket is compacted regardless of T, leaving only baseline data
    /// (used by the benchmark's load phase).
    pub fn drain(&self, full: bool) {
        loop {
            let mut progressed = false;
            for table in 0..self.cfg.schemas.len() {
                if full && self.cfg.mode != EngineMode::IncrementalRow {
                    let active = {
                        let layout = self.mgr.latest();
                        Arc::clone(&layout.table(table).active)
                    };
                    if !active.is_empty() {
                        let _lane = self.write_lanes[table].lock();
                        self.rotate_active(table, &active);
                        progressed = true;
                    }
                }
                if self.cfg.mode != EngineMode::IncrementalRow {
                    loop {
                        let cand = {
                            let layout = self.mgr.latest();
                            match layout.table(table).frozen.first() {
                                Some(f) => Candidate {
                                    kind: CompactionKind::RowToColumn,
                                    target: table as u64,
                                    estimated_bytes: f.size_bytes(),
                                },
                                None => break,
                            }
                        };
                        match self.claim(&cand) {
                            Some(task) => {
                                self.run_task(task);
                                progressed = true;
                            }
                            None => std::thread::sleep(Duration::from_millis(1)),
                        }
                    }
                }
                loop {
                    let has_delta = !self.mgr.latest().table(table).delta.is_empty();
                    if !has_delta {
                        break;
                    }
                    let cand = Candidate {
                        kind: CompactionKind::DeltaToTransition,
                        target: table as u64,
                        estimated_bytes: 0,
                    };
                    match self.claim(&cand) {
                        Some(task) => {
                            self.run_task(task);
                            progressed = true;
                        }
                        None => std::thread::sleep(Duration::from_millis(1)),
                    }
                }
                loop {
                    let floor = if full { 0 } else { self.cfg.granularity.t_bytes };
                    let next_bucket = {
                        let layout = self.mgr.latest();
                        layout
                            .table(table)
                            .buckets
                            .iter()
                            .filter(|b| b.data_bytes() > floor)
                            .max_by_key(|b| b.data_bytes())
                            .map(|b| b.bucket_id)
                    };
                    let bucket_id = match next_bucket {
                        Some(b) => b,
                        None => break,
                    };
                    let cand = Candidate {
                        kind: CompactionKind::BucketToBaseline,
                        target: (table as u64) << 32 | bucket_id,
                        estimated_bytes: 0,
                    };
                    match self.claim(&cand) {
                        Some(task) => {
                            self.run_task(task);
                            progressed = true;
                        }
                        None => std::thread::sleep(Duration::from_millis(1)),
                    }
                }
            }
            if !progressed {
                return;
            }
        }
    }

    // -- scheduler --------------------------------------------------------

    fn tick_loop(self: Arc<EngineCore>, interval: Duration) {
        while !self.shutdown.load(Ordering::Acquire) {
            std::thread::sleep(interval);
            if self.shutdown.load(Ordering::Acquire) {
                break;
            }
            self.tick_once();
        }
    }

    /// One scheduler tick: forecast, decide, launch.
    pub fn tick_once(&self) {
        let now = self.clock.now();
        let busy = self.plans.busy_windows(now);
        let g = self.scheduler_g.load(Ordering::Acquire) as u32;
        let n = self.cfg.n_cores as u32;
        let candidates = self.candidates();
        let profiles = Arc::clone(&self.profiles);
        let decision = plan_tick(&busy, g, n, self.cfg.horizon_secs, candidates, |c| {
            profiles.estimate_task_duration(c.kind, c.estimated_bytes)
        });
        self.admission_log.lock().extend_from_slice(&decision.admissions);
        let mut launched_kinds = Vec::new();
        for cand in decision.launches {
            if !self.exec.try_acquire() {
                break;
            }
            match self.claim(&cand) {
                Some(task) => {
                    launched_kinds.push(cand.kind);
                    self.scheduler_g.fetch_add(1, Ordering::AcqRel);
                    let core = self.arc();
                    std::thread::spawn(move || {
                        core.run_task(task);
                        core.scheduler_g.fetch_sub(1, Ordering::AcqRel);
                        core.exec.release();
                    });
                }
                None => self.exec.release(),
            }
        }
        if let Some(m) = &self.metrics {
            let free_now = forecast_idle(&busy, g, n, self.cfg.horizon_secs)
                .first()
                .filter(|w| w.start == 0.0)
                .map(|w| w.free_cores)
                .unwrap_or(0);
            let kinds: Vec<&str> = launched_kinds
                .iter()
                .map(|k| match k {
                    CompactionKind::RowToColumn => "convert",
                    CompactionKind::DeltaToTransition => "delta",
                    CompactionKind::BucketToBaseline => "bucket",
                })
                .collect();
            let mut w = m.lock();
            let _ = writeln!(
                w,
                "ts_ms={} free_cores={} launched={} g={}",
                now.as_millis(),
                free_now,
                if kinds.is_empty() { "-".into() } else { kinds.join(",") },
                self.scheduler_g.load(Ordering::Acquire),
            );
            let _ = w.flush();
        }
    }

    pub fn background_tasks_running(&self) -> usize {
        self.exec.running()
    }

    /// Wait for in-flight background tasks to finish (test support).
    pub fn wait_background_idle(&self) {
        self.exec.wait_idle();
    }
}

enum PlannedTask {
    Convert {
        table: usize,
        frozen: Arc<RowTable>,
    },
    Delta {
        table: usize,
        omega: Vec<Arc<ColumnSegment>>,
    },
    Bucket {
        table: usize,
        bucket_id: u64,
        inputs: Vec<Arc<ColumnSegment>>,
        covered: Vec<Arc<ColumnSegment>>,
        mark_ids: Vec<u64>,
    },
}

fn validate_int_cols(schema: &Schema, cols: &[usize]) -> Result<(), EngineError> {
    if cols.is_empty() {
        return Err(EngineError::EmptyProjection);
    }
    for &c in cols {
        if c >= schema.column_count() {
            return Err(EngineError::InvalidProjection(c));
        }
        if schema.column_type(c) != CellType::Int64 {
            return Err(EngineError::NonIntColumn(c));
        }
    }
    Ok(())
}

fn view_visible_count(view: &crate::segment::VisibilityView, start: u32, end: u32) -> usize {
    match view {
        crate::segment::VisibilityView::AllVisible { .. } => (end - start) as usize,
        _ => (start..end).filter(|&i| view.is_visible(i)).count(),
    }
}
