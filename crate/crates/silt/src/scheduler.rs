//! Cost-model background scheduling.
//!
//! The scheduler answers two questions every tick (default 100ms): is there
//! an idle-core window in the near future, and which background task should
//! take it. Foreground queries register plan forecasts (operator cost,
//! workers, start offset); costs turn into durations through a per-operator
//! correction factor phi maintained as the running mean of observed
//! duration/cost ratios (incremental Welford-style update). Idle windows
//! are the piecewise-constant stretches where total cores minus forecast
//! query cores minus running background tasks is at least one.
//!
//! Task priority: row-to-column conversion first (row-format delta hurts
//! reads the most), then delta-to-transition when the delta layer exceeds
//! its trigger, then bucket-to-baseline for the fullest bucket over T. A
//! task is admitted only into a window starting now that is at least as
//! long as the task's estimated duration, keeping q + g + 1 <= N at every
//! admission.

use std::time::Duration;

use parking_lot::Mutex;

use crate::compaction::CompactionKind;

/// Query operator kinds the cost model tracks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Scan,
    Filter,
    Project,
    AggSum,
    AggMax,
    JoinBuild,
    JoinProbe,
}

pub const OP_KINDS: [OpKind; 7] = [
    OpKind::Scan,
    OpKind::Filter,
    OpKind::Project,
    OpKind::AggSum,
    OpKind::AggMax,
    OpKind::JoinBuild,
    OpKind::JoinProbe,
];

fn op_index(kind: OpKind) -> usize {
    match kind {
        OpKind::Scan => 0,
        OpKind::Filter => 1,
        OpKind::Project => 2,
        OpKind::AggSum => 3,
        OpKind::AggMax => 4,
        OpKind::JoinBuild => 5,
        OpKind::JoinProbe => 6,
    }
}

/// Running mean correction factor for one operator kind.
#[derive(Debug, Clone, Copy)]
pub struct OperatorProfile {
    pub phi: f64,
    pub n: u64,
}

impl Default for OperatorProfile {
    fn default() -> Self {
        OperatorProfile { phi: 1.0, n: 0 }
    }
}

impl OperatorProfile {
    /// Incremental mean: phi (+)= (sample - phi) / n. The first sample
    /// replaces the 1.0 prior entirely.
    pub fn record(&mut self, sample: f64) {
        self.n += 1;
        self.phi += (sample - self.phi) / self.n as f64;
    }
}

/// Per-operator phi factors plus the calibrated cost unit.
#[derive(Debug)]
pub struct ProfileSet {
    profiles: [Mutex<OperatorProfile>; 7],
    task_profiles: [Mutex<OperatorProfile>; 3],
    unit_seconds_per_cost: f64,
    /// Bytes/sec prior for background tasks before any observation.
    task_bytes_per_sec: f64,
}

fn task_index(kind: CompactionKind) -> usize {
    match kind {
        CompactionKind::RowToColumn => 0,
        CompactionKind::DeltaToTransition => 1,
        CompactionKind::BucketToBaseline => 2,
    }
}

impl ProfileSet {
    pub fn new(unit_seconds_per_cost: f64) -> Self {
        ProfileSet {
            profiles: Default::default(),
            task_profiles: Default::default(),
            unit_seconds_per_cost,
            task_bytes_per_sec: 200.0 * (1 << 20) as f64,
        }
    }

    pub fn unit_seconds_per_cost(&self) -> f64 {
        self.unit_seconds_per_cost
    }

    pub fn phi(&self, kind: OpKind) -> f64 {
        self.profiles[op_index(kind)].lock().phi
    }

    pub fn profile(&self, kind: OpKind) -> OperatorProfile {
        *self.profiles[op_index(kind)].lock()
    }

    /// Duration_i = Cost_i * phi_i (in seconds through the calibrated unit).
    pub fn estimate_duration(&self, kind: OpKind, cost: f64) -> f64 {
        debug_assert!(cost >= 0.0);
        cost * self.phi(kind) * self.unit_seconds_per_cost
    }

    /// Record an observed execution: the sample is the ratio of actual
    /// duration to modeled duration at phi = 1. Zero-cost executions are
    /// skipped (no ratio to form).
    pub fn record_execution(&self, kind: OpKind, actual_seconds: f64, cost: f64) -> Option<f64> {
        if cost <= 0.0 {
            return None;
        }
        let sample = actual_seconds / (cost * self.unit_seconds_per_cost);
        let mut p = self.profiles[op_index(kind)].lock();
        p.record(sample);
        Some(p.phi)
    }

    /// Background-task duration estimate from a bytes/sec model with its
    /// own phi correction.
    pub fn estimate_task_duration(&self, kind: CompactionKind, bytes: u64) -> f64 {
        let phi = self.task_profiles[task_index(kind)].lock().phi;
        (bytes as f64 / self.task_bytes_per_sec) * phi
    }

    pub fn record_task_execution(&self, kind: CompactionKind, bytes: u64, actual_seconds: f64) {
        let modeled = bytes as f64 / self.task_bytes_per_sec;
        if modeled <= 0.0 {
            return;
        }
        let mut p = self.task_profiles[task_index(kind)].lock();
        p.record(actual_seconds / modeled);
    }
}

/// One operator of a registered query plan.
#[derive(Debug, Clone)]
pub struct PlanEntry {
    pub op_kind: OpKind,
    pub cost: f64,
    pub workers: u32,
    /// Seconds after plan start at which this operator begins.
    pub start_offset: f64,
    /// Estimated duration in seconds (cost * phi * unit at registration).
    pub duration: f64,
}

/// Forecast resource shape of one query plan.
#[derive(Debug, Clone, Default)]
pub struct PlanForecast {
    pub entries: Vec<PlanEntry>,
}

/// A maximal stretch of the forecast timeline with at least one free core.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdleWindow {
    pub start: f64,
    pub len: f64,
    /// Minimum free cores anywhere in the window.
    pub free_cores: u32,
}

/// Piecewise-constant free-core timeline over `[0, horizon)`. `busy` holds
/// (start_offset, duration, workers) stretches of forecast foreground work
/// relative to now; `g` running background tasks each occupy one core.
/// Windows with no free core are omitted.
pub fn forecast_idle(busy: &[(f64, f64, u32)], g: u32, n_cores: u32, horizon: f64) -> Vec<IdleWindow> {
    let mut events: Vec<(f64, i64)> = Vec::with_capacity(busy.len() * 2 + 2);
    for &(start, dur, workers) in busy {
        if dur <= 0.0 || workers == 0 {
            continue;
        }
        let s = start.max(0.0);
        let e = (start + dur).min(horizon);
        if e <= s {
            continue;
        }
        events.push((s, workers as i64));
        events.push((e, -(workers as i64)));
    }
    events.push((0.0, 0));
    events.push((horizon, 0));
    events.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    let mut windows: Vec<IdleWindow> = Vec::new();
    let mut q: i64 = 0;
    let mut open: Option<(f64, u32)> = None; // (start, min free so far)
    let mut i = 0;
    while i < events.len() {
        let t = events[i].0;
        while i < events.len() && events[i].0 == t {
            q += events[i].1;
            i += 1;
        }
        if t >= horizon {
            break;
        }
        let free = n_cores as i64 - g as i64 - q;
        match (&mut open, free > 0) {
            (Some((_, min_free)), true) => *min_free = (*min_free).min(free as u32),
            (Some((start, min_free)), false) => {
                windows.push(IdleWindow {
                    start: *start,
                    len: t - *start,
                    free_cores: *min_free,
                });
                open = None;
            }
            (None, true) => open = Some((t, free as u32)),
            (None, false) => {}
        }
    }
    if let Some((start, min_free)) = open {
        if horizon > start {
            windows.push(IdleWindow {
                start,
                len: horizon - start,
                free_cores: min_free,
            });
        }
    }
    windows.retain(|w| w.len > 0.0);
    windows
}

/// A launchable background task candidate.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub kind: CompactionKind,
    /// What the engine needs to identify the task (frozen table id or
    /// bucket id; unused for delta selection).
    pub target: u64,
    pub estimated_bytes: u64,
}

/// Candidates one tick chooses from, in spec priority order.
#[derive(Debug, Clone, Default)]
pub struct TickCandidates {
    /// Oldest frozen row table, if any (conversions run one at a time).
    pub conversion: Option<Candidate>,
    /// Delta compaction when the layer exceeds its trigger (also
    /// serialized).
    pub delta: Option<Candidate>,
    /// Buckets over T, largest first; these may run concurrently.
    pub buckets: Vec<Candidate>,
}

/// Evidence recorded at each admission for the safety invariant
/// q + g + 1 <= N.
#[derive(Debug, Clone, Copy)]
pub struct AdmissionRecord {
    pub q_forecast_max: u32,
    pub g_before: u32,
    pub n_cores: u32,
}

#[derive(Debug, Default)]
pub struct TickDecision {
    pub launches: Vec<Candidate>,
    pub admissions: Vec<AdmissionRecord>,
}

/// Decide which candidates to launch given the forecast foreground load.
/// Deterministic: same inputs, same decision.
pub fn plan_tick(
    busy: &[(f64, f64, u32)],
    mut g: u32,
    n_cores: u32,
    horizon: f64,
    candidates: TickCandidates,
    estimate: impl Fn(&Candidate) -> f64,
) -> TickDecision {
    let mut decision = TickDecision::default();
    let mut queue: Vec<Candidate> = Vec::new();
    if let Some(c) = candidates.conversion {
        queue.push(c);
    }
    if let Some(c) = candidates.delta {
        queue.push(c);
    }
    queue.extend(candidates.buckets);

    for cand in queue {
        let windows = forecast_idle(busy, g, n_cores, horizon);
        let now_window = match windows.first() {
            Some(w) if w.start == 0.0 && w.free_cores >= 1 => *w,
            _ => break, // no window starting now; nothing launches this tick
        };
        let dur = estimate(&cand);
        if now_window.len < dur {
            // The nearest idle window is too short for this task; lower
            // priority tasks are not considered past a blocked conversion
            // (they would jump the queue).
            break;
        }
        decision.admissions.push(AdmissionRecord {
            q_forecast_max: n_cores - g - now_window.free_cores,
            g_before: g,
            n_cores,
        });
        decision.launches.push(cand);
        g += 1;
    }
    decision
}

/// Clock abstraction so scheduling is reproducible under test.
pub trait Clock: Send + Sync {
    fn now(&self) -> Duration;
}

#[derive(Debug)]
pub struct SystemClock {
    epoch: std::time::Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        SystemClock {
            epoch: std::time::Instant::now(),
        }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.epoch.elapsed()
    }
}

/// Manually advanced clock for deterministic tests.
#[derive(Debug, Default)]
pub struct SimClock {
    now: Mutex<Duration>,
}

impl SimClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn advance(&self, d: Duration) {
        *self.now.lock() += d;
    }
}

impl Clock for SimClock {
    fn now(&self) -> Duration {
        *self.now.lock()
    }
}
