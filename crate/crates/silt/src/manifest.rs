//! Layout persistence: a line-oriented manifest plus one `.sseg` file per
//! segment.
//!
//! The manifest records the published layout version, the global version
//! counter and id allocator high-water marks, and one record per stored
//! table: layer tag (`DELTA` | `BUCKET:<id>` | `BASE`), segment id, key
//! range, and size. Records keep layer order — position is the recency
//! rank within a layer. The final line is a CRC32C over everything before
//! it; the file is written to a temp name and renamed into place.
//!
//! Live row-table contents are deliberately not persisted (durability of
//! the in-memory delta is a non-goal); save after draining. Bucket ranges
//! are not persisted either: on open the bucket partition is re-derived
//! from the baseline via the split rule, and any saved bucket-resident
//! segments are routed into the rebuilt buckets (re-cut at boundaries when
//! needed).

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use crate::compaction::GranularityConfig;
use crate::engine::{Engine, EngineConfig, EngineCore};
use crate::format::{self, FormatError};
use crate::layout::{recut_segment, ColumnBucket, KeyRange, TableLayout};
use crate::model::{CellType, IdAllocator, Schema};
use crate::rowstore::RowTable;
use crate::segment::ColumnSegment;

pub const MANIFEST_NAME: &str = "MANIFEST";

#[derive(Debug, thiserror::Error)]
pub enum PersistError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Segment(#[from] FormatError),
    #[error("manifest corrupt: {0}")]
    Corrupt(String),
    #[error("engine error: {0}")]
    Engine(String),
}

fn cell_type_name(t: CellType) -> &'static str {
    match t {
        CellType::Int64 => "int64",
        CellType::Utf8 => "utf8",
    }
}

fn parse_cell_type(s: &str) -> Result<CellType, PersistError> {
    match s {
        "int64" => Ok(CellType::Int64),
        "utf8" => Ok(CellType::Utf8),
        other => Err(PersistError::Corrupt(format!("unknown cell type {other}"))),
    }
}

impl EngineCore {
    /// Persist the latest published layout into `dir`. Row tables must be
    /// empty (drain first): their contents would be silently lost.
    pub fn save_to_dir(&self, dir: &Path) -> Result<(), PersistError> {
        std::fs::create_dir_all(dir)?;
        let layout = self.latest_layout();
        for t in &layout.tables {
            if !t.active.is_empty() || t.frozen.iter().any(|f| !f.is_empty()) {
                return Err(PersistError::Engine(
                    "row tables hold data; drain before saving".into(),
                ));
            }
        }
        let mut body = String::new();
        writeln!(body, "layout_version {}", layout.layout_version).unwrap();
        writeln!(body, "global_version {}", self.current_version().0).unwrap();
        // Reserve a generous id floor; exact continuation is not required,
        // only uniqueness.
        writeln!(body, "next_id {}", self.current_version().0.max(1_000_000)).unwrap();
        for (ti, t) in layout.tables.iter().enumerate() {
            let cols: Vec<String> = self
                .schema(ti)
                .columns()
                .iter()
                .map(|(n, ty)| format!("{n}:{}", cell_type_name(*ty)))
                .collect();
            writeln!(body, "TABLE {ti} {}", cols.join(",")).unwrap();
            let mut write_seg = |tag: &str, seg: &ColumnSegment| {
                writeln!(
                    body,
                    "{tag} {} {} {} {}",
                    seg.id(),
                    seg.key_range().0,
                    seg.key_range().1,
                    seg.size_bytes()
                )
                .unwrap();
            };
            for seg in &t.delta {
                write_seg("DELTA", seg);
            }
            for b in &t.buckets {
                for seg in &b.segments {
                    write_seg(&format!("BUCKET:{}", b.bucket_id), seg);
                }
            }
            for seg in &t.baseline {
                write_seg("BASE", seg);
            }
        }
        for seg in layout.all_segments() {
            format::write_segment_file(dir, seg)?;
        }
        let crc = crc32c::crc32c(body.as_bytes());
        writeln!(body, "CRC32C {crc:08x}").unwrap();
        let tmp = dir.join(".manifest.tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(body.as_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, dir.join(MANIFEST_NAME))?;
        Ok(())
    }
}

struct ParsedManifest {
    global_version: u64,
    next_id: u64,
    /// Per table: (schema, delta ids, bucket-resident ids in file order,
    /// baseline ids).
    tables: Vec<(Schema, Vec<u64>, Vec<u64>, Vec<u64>)>,
}

fn parse_manifest(text: &str) -> Result<ParsedManifest, PersistError> {
    let crc_line_at = text
        .trim_end()
        .rfind('\n')
        .ok_or_else(|| PersistError::Corrupt("manifest too short".into()))?;
    let (body, crc_line) = text.split_at(crc_line_at + 1);
    let crc_line = crc_line.trim();
    let stored = crc_line
        .strip_prefix("CRC32C ")
        .ok_or_else(|| PersistError::Corrupt("missing CRC32C line".into()))?;
    let stored =
        u32::from_str_radix(stored, 16).map_err(|e| PersistError::Corrupt(e.to_string()))?;
    let computed = crc32c::crc32c(body.as_bytes());
    if stored != computed {
        return Err(PersistError::Corrupt(format!(
            "checksum mismatch: stored {stored:08x}, computed {computed:08x}"
        )));
    }

    let mut global_version = None;
    let mut next_id = None;
    let mut tables: Vec<(Schema, Vec<u64>, Vec<u64>, Vec<u64>)> = Vec::new();
    for line in body.lines() {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("layout_version") => {}
            Some("global_version") => {
                global_version = Some(
                    parts
                        .next()
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| PersistError::Corrupt("bad global_version".into()))?,
                )
            }
            Some("next_id") => {
                next_id = Some(
                    parts
                        .next()
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| PersistError::Corrupt("bad next_id".into()))?,
                )
            }
            Some("TABLE") => {
                let _ordinal = parts.next();
                let cols = parts
                    .next()
                    .ok_or_else(|| PersistError::Corrupt("TABLE without columns".into()))?;
                let mut schema_cols = Vec::new();
                for c in cols.split(',') {
                    let (name, ty) = c
                        .split_once(':')
                        .ok_or_else(|| PersistError::Corrupt(format!("bad column spec {c}")))?;
                    schema_cols.push((name.to_string(), parse_cell_type(ty)?));
                }
                let schema = Schema::new(schema_cols)
                    .map_err(|e| PersistError::Corrupt(e.to_string()))?;
                tables.push((schema, Vec::new(), Vec::new(), Vec::new()));
            }
            Some(tag) if tag == "DELTA" || tag == "BASE" || tag.starts_with("BUCKET:") => {
                let id: u64 = parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| PersistError::Corrupt("bad segment id".into()))?;
                let t = tables
                    .last_mut()
                    .ok_or_else(|| PersistError::Corrupt("record before TABLE".into()))?;
                match tag {
                    "DELTA" => t.1.push(id),
                    "BASE" => t.3.push(id),
                    _ => t.2.push(id),
                }
            }
            Some(other) => {
                return Err(PersistError::Corrupt(format!("unknown record {other}")))
            }
            None => {}
        }
    }
    Ok(ParsedManifest {
        global_version: global_version
            .ok_or_else(|| PersistError::Corrupt("missing global_version".into()))?,
        next_id: next_id.ok_or_else(|| PersistError::Corrupt("missing next_id".into()))?,
        tables,
    })
}

/// Derive the bucket partition from the baseline via the split rule: split
/// while the covered baseline exceeds G - T and more than one segment is
/// covered.
fn derive_buckets(
    baseline: &[Arc<ColumnSegment>],
    cfg: &GranularityConfig,
    ids: &IdAllocator,
) -> Vec<ColumnBucket> {
    let budget = cfg.g_bytes - cfg.t_bytes;
    let mut out = Vec::new();
    // (range, covered slice bounds)
    let mut queue = vec![(KeyRange::all(), 0usize, baseline.len())];
    while let Some((range, lo, hi)) = queue.pop() {
        let sizes: Vec<u64> = baseline[lo..hi].iter().map(|s| s.size_bytes()).collect();
        let total: u64 = sizes.iter().sum();
        if total > budget && sizes.len() >= 2 {
            if let Some(cut) = crate::layout::plan_covered_split(&sizes) {
                let boundary = baseline[lo + cut].key_range().0;
                queue.push((
                    KeyRange {
                        lo: boundary,
                        hi: range.hi,
                    },
                    lo + cut,
                    hi,
                ));
                queue.push((
                    KeyRange {
                        lo: range.lo,
                        hi: Some(boundary),
                    },
                    lo,
                    lo + cut,
                ));
                continue;
            }
        }
        out.push(ColumnBucket {
            bucket_id: ids.next_id(),
            range,
            segments: Vec::new(),
            covered_baseline: baseline[lo..hi].iter().map(|s| s.id()).collect(),
        });
    }
    out.sort_by_key(|b| b.range.lo);
    out
}

impl Engine {
    /// Open an engine from a directory written by `save_to_dir`. The
    /// manifest's schemas override whatever `cfg.schemas` holds.
    pub fn open_dir(dir: &Path, mut cfg: EngineConfig) -> Result<Engine, PersistError> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_NAME))?;
        let parsed = parse_manifest(&text)?;
        cfg.schemas = parsed.tables.iter().map(|(s, ..)| s.clone()).collect();
        let ids = IdAllocator::starting_at(parsed.next_id);
        let mut layouts = Vec::new();
        for (schema, delta_ids, bucket_ids, base_ids) in &parsed.tables {
            let load = |id: &u64| -> Result<Arc<ColumnSegment>, PersistError> {
                Ok(Arc::new(format::read_segment_file(&format::segment_path(
                    dir, *id,
                ))?))
            };
            let delta: Vec<_> = delta_ids.iter().map(load).collect::<Result<_, _>>()?;
            let residents: Vec<_> = bucket_ids.iter().map(load).collect::<Result<_, _>>()?;
            let mut baseline: Vec<_> = base_ids.iter().map(load).collect::<Result<_, _>>()?;
            baseline.sort_by_key(|s: &Arc<ColumnSegment>| s.key_range().0);

            let mut buckets = derive_buckets(&baseline, &cfg.granularity, &ids);
            // Route saved residents, re-cutting any that straddle a rebuilt
            // boundary; file order (recency order) is preserved.
            for seg in residents {
                route_resident(&mut buckets, seg, schema, &ids);
            }
            layouts.push(TableLayout {
                active: Arc::new(RowTable::new(
                    ids.next_id(),
                    cfg.granularity.rowtable_cap,
                    (cfg.granularity.rowtable_cap / 64).max(64) as usize,
                )),
                frozen: Vec::new(),
                delta,
                buckets,
                baseline,
            });
        }
        Engine::from_state(cfg, Some((layouts, parsed.global_version, parsed.next_id)))
            .map_err(|e| PersistError::Engine(e.to_string()))
    }
}

fn route_resident(
    buckets: &mut [ColumnBucket],
    seg: Arc<ColumnSegment>,
    schema: &Schema,
    ids: &IdAllocator,
) {
    let (lo, hi) = seg.key_range();
    let idx = buckets.partition_point(|b| b.range.lo <= lo) - 1;
    if buckets[idx].range.contains(hi) {
        buckets[idx].segments.push(seg);
        return;
    }
    let boundary = buckets[idx]
        .range
        .hi
        .expect("straddler implies a bounded bucket");
    let (left, right) = recut_segment(&seg, boundary, schema, ids);
    for part in left {
        buckets[idx].segments.push(Arc::new(part));
    }
    for part in right {
        route_resident(buckets, Arc::new(part), schema, ids);
    }
}
