//! Bit-exact segment file format (`<segment_id>.sseg`).
//!
//! Little-endian layout:
//!
//! ```text
//! magic "SSG1"
//! format_version   u32
//! column_count     u16, then one type tag byte per column (0=int64, 1=utf8)
//! row_count        u64
//! key_range        i64 min, i64 max
//! create_version   u64
//! segment_id       u64
//! directory        per column: (offset u64, length u64), file-absolute
//! column payloads  int64: row_count * 8 raw; utf8: (row_count+1) u32
//!                  offsets then the byte blob
//! bloom            m u64 (bits), k u8 (hashes), ceil(m/64) u64 words
//! delete chain     chain_len u32, each: version u64 + bitmap words;
//!                  singles_len u32, each: version u64 + offset u32
//! crc32c           u32 over all preceding bytes
//! ```

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::bloom::BloomFilter;
use crate::model::Version;
use crate::segment::{ColumnData, ColumnSegment, DeleteChain};

pub const MAGIC: &[u8; 4] = b"SSG1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated at offset {0}")]
    Truncated(usize),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("bad column type tag {0}")]
    BadTypeTag(u8),
    #[error("inconsistent file structure: {0}")]
    Corrupt(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.pos + n > self.buf.len() {
            return Err(FormatError::Truncated(self.pos));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn i64(&mut self) -> Result<i64, FormatError> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn column_tag(col: &ColumnData) -> u8 {
    match col {
        ColumnData::Int64(_) => 0,
        ColumnData::Utf8 { .. } => 1,
    }
}

/// Serialize a segment, checksummed.
pub fn encode(seg: &ColumnSegment) -> Vec<u8> {
    let mut out = Vec::with_capacity(seg.size_bytes() as usize + 256);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let cols = seg.columns();
    out.extend_from_slice(&(cols.len() as u16).to_le_bytes());
    for c in cols {
        out.push(column_tag(c));
    }
    out.extend_from_slice(&(seg.row_count() as u64).to_le_bytes());
    out.extend_from_slice(&seg.key_range().0.to_le_bytes());
    out.extend_from_slice(&seg.key_range().1.to_le_bytes());
    out.extend_from_slice(&seg.create_version().0.to_le_bytes());
    out.extend_from_slice(&seg.id().to_le_bytes());

    // Directory placeholder, patched once payload offsets are known.
    let dir_at = out.len();
    out.resize(out.len() + cols.len() * 16, 0);

    let mut dir = Vec::with_capacity(cols.len());
    for c in cols {
        let start = out.len() as u64;
        match c {
            ColumnData::Int64(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            ColumnData::Utf8 { offsets, bytes } => {
                for o in offsets {
                    out.extend_from_slice(&o.to_le_bytes());
                }
                out.extend_from_slice(bytes);
            }
        }
        dir.push((start, out.len() as u64 - start));
    }
    for (i, (off, len)) in dir.iter().enumerate() {
        out[dir_at + i * 16..dir_at + i * 16 + 8].copy_from_slice(&off.to_le_bytes());
        out[dir_at + i * 16 + 8..dir_at + i * 16 + 16].copy_from_slice(&len.to_le_bytes());
    }

    let bloom = seg.bloom();
    out.extend_from_slice(&bloom.num_bits().to_le_bytes());
    out.push(bloom.num_hashes() as u8);
    for w in bloom.word_values() {
        out.extend_from_slice(&w.to_le_bytes());
    }

    let (chain, singles) = seg.chain().snapshot_parts();
    out.extend_from_slice(&(chain.len() as u32).to_le_bytes());
    for (v, words) in &chain {
        out.extend_from_slice(&v.to_le_bytes());
        for w in words {
            out.extend_from_slice(&w.to_le_bytes());
        }
    }
    out.extend_from_slice(&(singles.len() as u32).to_le_bytes());
    for (v, o) in &singles {
        out.extend_from_slice(&v.to_le_bytes());
        out.extend_from_slice(&o.to_le_bytes());
    }

    let crc = crc32c::crc32c(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Parse and verify a segment file image.
pub fn decode(buf: &[u8]) -> Result<ColumnSegment, FormatError> {
    if buf.len() < 4 || &buf[..4] != MAGIC {
        return Err(FormatError::BadMagic);
    }
    if buf.len() < 8 {
        return Err(FormatError::Truncated(buf.len()));
    }
    let body_len = buf.len() - 4;
    let stored = u32::from_le_bytes(buf[body_len..].try_into().unwrap());
    let computed = crc32c::crc32c(&buf[..body_len]);
    if stored != computed {
        return Err(FormatError::ChecksumMismatch { stored, computed });
    }

    let mut r = Reader { buf: &buf[..body_len], pos: 4 };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let ncols = r.u16()? as usize;
    let mut tags = Vec::with_capacity(ncols);
    for _ in 0..ncols {
        let t = r.u8()?;
        if t > 1 {
            return Err(FormatError::BadTypeTag(t));
        }
        tags.push(t);
    }
    let row_count = r.u64()? as u32;
    let key_min = r.i64()?;
    let key_max = r.i64()?;
    let create_version = Version(r.u64()?);
    let segment_id = r.u64()?;
    let mut dir = Vec::with_capacity(ncols);
    for _ in 0..ncols {
        dir.push((r.u64()? as usize, r.u64()? as usize));
    }

    let mut columns = Vec::with_capacity(ncols);
    for (i, &tag) in tags.iter().enumerate() {
        let (off, len) = dir[i];
        if off != r.pos {
            return Err(FormatError::Corrupt("directory offset mismatch"));
        }
        let payload = r.take(len)?;
        match tag {
            0 => {
                if len != row_count as usize * 8 {
                    return Err(FormatError::Corrupt("int64 column length"));
                }
                let vals = payload
                    .chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                columns.push(ColumnData::Int64(vals));
            }
            1 => {
                let off_bytes = (row_count as usize + 1) * 4;
                if len < off_bytes {
                    return Err(FormatError::Corrupt("utf8 offsets length"));
                }
                let offsets: Vec<u32> = payload[..off_bytes]
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                let bytes = payload[off_bytes..].to_vec();
                if *offsets.last().unwrap() as usize != bytes.len() {
                    return Err(FormatError::Corrupt("utf8 final offset"));
                }
                columns.push(ColumnData::Utf8 { offsets, bytes });
            }
            _ => unreachable!(),
        }
    }

    let bloom_bits = r.u64()?;
    let bloom_hashes = r.u8()? as u32;
    let bloom_words = (bloom_bits as usize + 63) / 64;
    let mut words = Vec::with_capacity(bloom_words);
    for _ in 0..bloom_words {
        words.push(r.u64()?);
    }
    let bloom = BloomFilter::from_words(bloom_bits, bloom_hashes, words);

    let chain_words = (row_count as usize + 63) / 64;
    let chain_len = r.u32()? as usize;
    let mut chain = Vec::with_capacity(chain_len);
    for _ in 0..chain_len {
        let v = r.u64()?;
        let mut ws = Vec::with_capacity(chain_words);
        for _ in 0..chain_words {
            ws.push(r.u64()?);
        }
        chain.push((v, ws));
    }
    let singles_len = r.u32()? as usize;
    let mut singles = Vec::with_capacity(singles_len);
    for _ in 0..singles_len {
        let v = r.u64()?;
        let o = r.u32()?;
        singles.push((v, o));
    }
    if r.pos != body_len {
        return Err(FormatError::Corrupt("trailing bytes"));
    }

    let size_bytes = columns.iter().map(|c| c.encoded_bytes()).sum();
    Ok(ColumnSegment::from_parts(
        segment_id,
        create_version,
        (key_min, key_max),
        row_count,
        size_bytes,
        columns,
        bloom,
        DeleteChain::from_parts(row_count, chain, singles),
    ))
}

pub fn segment_file_name(segment_id: u64) -> String {
    format!("{segment_id}.sseg")
}

pub fn segment_path(dir: &Path, segment_id: u64) -> PathBuf {
    dir.join(segment_file_name(segment_id))
}

/// Write a segment file atomically (temp file + rename).
pub fn write_segment_file(dir: &Path, seg: &ColumnSegment) -> Result<PathBuf, FormatError> {
    let bytes = encode(seg);
    let final_path = segment_path(dir, seg.id());
    let tmp = dir.join(format!(".{}.tmp", segment_file_name(seg.id())));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, &final_path)?;
    Ok(final_path)
}

pub fn read_segment_file(path: &Path) -> Result<ColumnSegment, FormatError> {
    let bytes = std::fs::read(path)?;
    decode(&bytes)
}

/// Structural equality across the payload, bloom, and delete chain; used by
/// round-trip checks.
pub fn structurally_equal(a: &ColumnSegment, b: &ColumnSegment) -> bool {
    if a.id() != b.id()
        || a.create_version() != b.create_version()
        || a.key_range() != b.key_range()
        || a.row_count() != b.row_count()
        || a.size_bytes() != b.size_bytes()
        || a.columns().len() != b.columns().len()
    {
        return false;
    }
    for (ca, cb) in a.columns().iter().zip(b.columns()) {
        let eq = match (ca, cb) {
            (ColumnData::Int64(x), ColumnData::Int64(y)) => x == y,
            (
                ColumnData::Utf8 { offsets: ox, bytes: bx },
                ColumnData::Utf8 { offsets: oy, bytes: by },
            ) => ox == oy && bx == by,
            _ => false,
        };
        if !eq {
            return false;
        }
    }
    if a.bloom().num_bits() != b.bloom().num_bits()
        || a.bloom().num_hashes() != b.bloom().num_hashes()
        || a.bloom().word_values() != b.bloom().word_values()
    {
        return false;
    }
    a.chain().snapshot_parts() == b.chain().snapshot_parts()
}
