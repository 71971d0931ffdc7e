//! Binary attention traces.
//!
//! Attention is stored as banded causal rows: token `t` keeps `band` weights
//! per head, entry `k` being its attention to token `t - k`. Everything is
//! little-endian with fixed strides.
//!
//! ```text
//! header (48 bytes)
//!   0  magic "LTRI"
//!   4  version        u32 = 1
//!   8  layers         u32
//!  12  heads          u32
//!  16  d              u32
//!  20  block_size     u32
//!  24  token_count    u64
//!  32  prefill_tokens u64
//!  40  band           u32
//!  44  section_count  u32
//! section
//!   start u64, len u32, needle_count u32
//!   attention f32 [layers][len][heads][band]
//!   keys      f32 [layers][len][heads][d]
//!   queries   f32 [layers][len][heads][d]
//!   needles   needle_count x (start u64, end u64), end inclusive
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{LtriError, Result};
use crate::tri_attention::AttentionTile;

pub const TRACE_MAGIC: &[u8; 4] = b"LTRI";
pub const TRACE_VERSION: u32 = 1;
pub const HEADER_BYTES: u64 = 48;
const SECTION_HEAD_BYTES: u64 = 16;
/// Row sums of stored attention must be within this of 1.
pub const ROW_SUM_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub layers: usize,
    pub heads: usize,
    pub d: usize,
    pub block_size: usize,
    pub token_count: usize,
    pub prefill_tokens: usize,
    pub band: usize,
}

impl TraceHeader {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.d == 0 || self.block_size == 0 || self.band == 0 {
            return Err(LtriError::trace("trace dimensions must be positive"));
        }
        if self.prefill_tokens == 0 || self.prefill_tokens > self.token_count {
            return Err(LtriError::trace(format!(
                "prefill tokens {} outside [1, {}]",
                self.prefill_tokens, self.token_count
            )));
        }
        Ok(())
    }

    pub fn decode_tokens(&self) -> usize {
        self.token_count - self.prefill_tokens
    }

    fn attention_width(&self) -> usize {
        self.heads * self.band
    }

    fn vector_width(&self) -> usize {
        self.heads * self.d
    }
}

/// Labeled evidence interval, inclusive at both ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Needle {
    pub start: usize,
    pub end: usize,
}

impl Needle {
    pub fn overlaps(&self, start: usize, end_exclusive: usize) -> bool {
        self.start < end_exclusive && start <= self.end
    }
}

/// Per-layer rows of banded attention, keys, and queries for the contiguous
/// tokens `start..start + len`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenChunk {
    pub start: usize,
    pub len: usize,
    /// `[layer]` → `[token][head][band]`
    pub attention: Vec<Vec<f32>>,
    /// `[layer]` → `[token][head][d]`
    pub keys: Vec<Vec<f32>>,
    /// `[layer]` → `[token][head][d]`
    pub queries: Vec<Vec<f32>>,
}

impl TokenChunk {
    pub fn empty(start: usize, layers: usize) -> Self {
        TokenChunk {
            start,
            len: 0,
            attention: vec![Vec::new(); layers],
            keys: vec![Vec::new(); layers],
            queries: vec![Vec::new(); layers],
        }
    }

    pub fn end(&self) -> usize {
        self.start + self.len
    }

    /// Appends `other`, which must start where `self` ends.
    pub fn append(&mut self, mut other: TokenChunk) -> Result<()> {
        if other.start != self.end() {
            return Err(LtriError::trace(format!(
                "position gap: chunk ends at {} but next starts at {}",
                self.end(),
                other.start
            )));
        }
        for l in 0..self.attention.len() {
            self.attention[l].append(&mut other.attention[l]);
            self.keys[l].append(&mut other.keys[l]);
            self.queries[l].append(&mut other.queries[l]);
        }
        self.len += other.len;
        Ok(())
    }

    /// Splits off and returns the first `n` tokens.
    pub fn take_front(&mut self, n: usize, header: &TraceHeader) -> TokenChunk {
        let n = n.min(self.len);
        let (aw, vw) = (header.attention_width(), header.vector_width());
        let mut front = TokenChunk::empty(self.start, self.attention.len());
        for l in 0..self.attention.len() {
            front.attention[l] = self.attention[l].drain(..n * aw).collect();
            front.keys[l] = self.keys[l].drain(..n * vw).collect();
            front.queries[l] = self.queries[l].drain(..n * vw).collect();
        }
        front.len = n;
        self.start += n;
        self.len -= n;
        front
    }

    /// Checks shapes, finiteness, causality, and row sums.
    pub fn validate(&self, header: &TraceHeader) -> Result<()> {
        let (aw, vw) = (header.attention_width(), header.vector_width());
        if self.attention.len() != header.layers || self.keys.len() != header.layers || self.queries.len() != header.layers {
            return Err(LtriError::trace("chunk layer count does not match header"));
        }
        for l in 0..header.layers {
            if self.attention[l].len() != self.len * aw
                || self.keys[l].len() != self.len * vw
                || self.queries[l].len() != self.len * vw
            {
                return Err(LtriError::trace(format!("chunk at {} has wrong stride on layer {l}", self.start)));
            }
            if let Some(bad) = self.keys[l].iter().chain(&self.queries[l]).find(|v| !v.is_finite()) {
                return Err(LtriError::trace(format!("non-finite vector entry {bad} on layer {l}")));
            }
            for t in 0..self.len {
                let pos = self.start + t;
                for h in 0..header.heads {
                    let row = &self.attention[l][t * aw + h * header.band..t * aw + (h + 1) * header.band];
                    let mut sum = 0.0f64;
                    for (k, &v) in row.iter().enumerate() {
                        if !v.is_finite() || v < 0.0 {
                            return Err(LtriError::trace(format!(
                                "attention entry {v} at token {pos} head {h} layer {l}"
                            )));
                        }
                        if k > pos && v != 0.0 {
                            return Err(LtriError::trace(format!(
                                "token {pos} attends to future/negative offset {k}"
                            )));
                        }
                        sum += v as f64;
                    }
                    if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                        return Err(LtriError::trace(format!(
                            "attention row of token {pos} head {h} layer {l} sums to {sum}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Attention row of token `t` (chunk-relative) for one layer and head.
    pub fn attention_row(&self, header: &TraceHeader, layer: usize, t: usize, head: usize) -> &[f32] {
        let base = t * header.attention_width() + head * header.band;
        &self.attention[layer][base..base + header.band]
    }
}

/// Dense square tile over global tokens `first..first + n` from banded rows.
/// `row(h, t)` must return the band of global token `t`.
pub fn dense_tile<'a>(
    layer: usize,
    heads: usize,
    first: usize,
    n: usize,
    row: impl Fn(usize, usize) -> &'a [f32],
) -> Result<AttentionTile> {
    let mut values = vec![0.0f32; heads * n * n];
    for h in 0..heads {
        for i in 0..n {
            let band = row(h, first + i);
            let dst = &mut values[(h * n + i) * n..(h * n + i + 1) * n];
            for (k, &v) in band.iter().enumerate().take(i + 1) {
                dst[i - k] = v;
            }
        }
    }
    AttentionTile::new(layer, heads, n, n, 0, values)
}

/// A stream of trace tokens.
pub trait TraceSource {
    fn header(&self) -> &TraceHeader;
    fn needles(&self) -> &[Needle];
    /// Next `len` tokens, fewer at the end of the trace, `None` once exhausted.
    fn next_chunk(&mut self, len: usize) -> Result<Option<TokenChunk>>;
}

fn write_header<W: Write>(w: &mut W, h: &TraceHeader, sections: u32) -> Result<()> {
    w.write_all(TRACE_MAGIC)?;
    w.write_u32::<LittleEndian>(TRACE_VERSION)?;
    w.write_u32::<LittleEndian>(h.layers as u32)?;
    w.write_u32::<LittleEndian>(h.heads as u32)?;
    w.write_u32::<LittleEndian>(h.d as u32)?;
    w.write_u32::<LittleEndian>(h.block_size as u32)?;
    w.write_u64::<LittleEndian>(h.token_count as u64)?;
    w.write_u64::<LittleEndian>(h.prefill_tokens as u64)?;
    w.write_u32::<LittleEndian>(h.band as u32)?;
    w.write_u32::<LittleEndian>(sections)?;
    Ok(())
}

/// Writes `source` to `path` in sections of `section_len` tokens.
pub fn write_trace<S: TraceSource + ?Sized>(source: &mut S, path: &Path, section_len: usize) -> Result<()> {
    if section_len == 0 {
        return Err(LtriError::config("section length must be positive"));
    }
    let header = *source.header();
    header.validate()?;
    let mut needles = source.needles().to_vec();
    needles.sort();
    let mut w = BufWriter::new(File::create(path)?);
    let sections = header.token_count.div_ceil(section_len);
    write_header(&mut w, &header, sections as u32)?;
    let mut written = 0usize;
    while let Some(chunk) = source.next_chunk(section_len)? {
        let own: Vec<Needle> = needles
            .iter()
            .filter(|n| n.start >= chunk.start && n.start < chunk.end())
            .copied()
            .collect();
        w.write_u64::<LittleEndian>(chunk.start as u64)?;
        w.write_u32::<LittleEndian>(chunk.len as u32)?;
        w.write_u32::<LittleEndian>(own.len() as u32)?;
        for part in [&chunk.attention, &chunk.keys, &chunk.queries] {
            for layer in part {
                for &v in layer {
                    w.write_f32::<LittleEndian>(v)?;
                }
            }
        }
        for n in own {
            w.write_u64::<LittleEndian>(n.start as u64)?;
            w.write_u64::<LittleEndian>(n.end as u64)?;
        }
        written += 1;
    }
    if written != sections {
        return Err(LtriError::internal(format!(
            "source produced {written} sections, expected {sections}"
        )));
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy)]
struct SectionEntry {
    offset: u64,
    start: usize,
    len: usize,
}

/// Reads a trace file section by section.
#[derive(Debug)]
pub struct TraceReader {
    header: TraceHeader,
    needles: Vec<Needle>,
    sections: Vec<SectionEntry>,
    next_section: usize,
    reader: BufReader<File>,
    pending: Option<TokenChunk>,
}

impl TraceReader {
    /// Opens `path`, indexing sections and collecting needle annotations.
    pub fn open(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let file_len = r.get_ref().metadata()?.len();
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| LtriError::trace("file too short for a trace header"))?;
        if &magic != TRACE_MAGIC {
            return Err(LtriError::trace("bad magic"));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != TRACE_VERSION {
            return Err(LtriError::trace(format!("unsupported trace version {version}")));
        }
        let header = TraceHeader {
            layers: r.read_u32::<LittleEndian>()? as usize,
            heads: r.read_u32::<LittleEndian>()? as usize,
            d: r.read_u32::<LittleEndian>()? as usize,
            block_size: r.read_u32::<LittleEndian>()? as usize,
            token_count: r.read_u64::<LittleEndian>()? as usize,
            prefill_tokens: r.read_u64::<LittleEndian>()? as usize,
            band: r.read_u32::<LittleEndian>()? as usize,
        };
        let section_count = r.read_u32::<LittleEndian>()? as usize;
        header.validate()?;

        let per_token = 4 * header.layers as u64 * (header.attention_width() + 2 * header.vector_width()) as u64;
        let mut sections = Vec::with_capacity(section_count);
        let mut needles = Vec::new();
        let mut offset = HEADER_BYTES;
        let mut expect_start = 0usize;
        for _ in 0..section_count {
            if offset + SECTION_HEAD_BYTES > file_len {
                return Err(LtriError::trace("truncated section header"));
            }
            r.seek(SeekFrom::Start(offset))?;
            let start = r.read_u64::<LittleEndian>()? as usize;
            let len = r.read_u32::<LittleEndian>()? as usize;
            let needle_count = r.read_u32::<LittleEndian>()? as u64;
            if start != expect_start {
                return Err(LtriError::trace(format!(
                    "position gap: section starts at {start}, expected {expect_start}"
                )));
            }
            let data = len as u64 * per_token;
            let ann_at = offset + SECTION_HEAD_BYTES + data;
            if ann_at + needle_count * 16 > file_len {
                return Err(LtriError::trace("truncated section"));
            }
            r.seek(SeekFrom::Start(ann_at))?;
            for _ in 0..needle_count {
                let s = r.read_u64::<LittleEndian>()? as usize;
                let e = r.read_u64::<LittleEndian>()? as usize;
                if s > e || e >= header.token_count {
                    return Err(LtriError::trace(format!("needle [{s}, {e}] outside trace")));
                }
                needles.push(Needle { start: s, end: e });
            }
            sections.push(SectionEntry { offset, start, len });
            offset = ann_at + needle_count * 16;
            expect_start = start + len;
        }
        if expect_start != header.token_count {
            return Err(LtriError::trace(format!(
                "sections cover {expect_start} tokens, header says {}",
                header.token_count
            )));
        }
        if offset != file_len {
            return Err(LtriError::trace("trailing bytes after last section"));
        }
        needles.sort();
        Ok(TraceReader {
            header,
            needles,
            sections,
            next_section: 0,
            reader: r,
            pending: None,
        })
    }

    fn read_section(&mut self, entry: SectionEntry) -> Result<TokenChunk> {
        let h = self.header;
        self.reader.seek(SeekFrom::Start(entry.offset + SECTION_HEAD_BYTES))?;
        let mut chunk = TokenChunk::empty(entry.start, h.layers);
        chunk.len = entry.len;
        let widths = [h.attention_width(), h.vector_width(), h.vector_width()];
        for (part, width) in [&mut chunk.attention, &mut chunk.keys, &mut chunk.queries]
            .into_iter()
            .zip(widths)
        {
            for layer in part.iter_mut() {
                let mut buf = vec![0.0f32; entry.len * width];
                self.reader.read_f32_into::<LittleEndian>(&mut buf)?;
                *layer = buf;
            }
        }
        chunk.validate(&h)?;
        Ok(chunk)
    }
}

impl TraceSource for TraceReader {
    fn header(&self) -> &TraceHeader {
        &self.header
    }

    fn needles(&self) -> &[Needle] {
        &self.needles
    }

    fn next_chunk(&mut self, len: usize) -> Result<Option<TokenChunk>> {
        if len == 0 {
            return Err(LtriError::config("chunk length must be positive"));
        }
        while self.pending.as_ref().map_or(0, |p| p.len) < len && self.next_section < self.sections.len() {
            let entry = self.sections[self.next_section];
            self.next_section += 1;
            let section = self.read_section(entry)?;
            match &mut self.pending {
                Some(p) => p.append(section)?,
                None => self.pending = Some(section),
            }
        }
        let header = self.header;
        match &mut self.pending {
            None => Ok(None),
            Some(p) if p.len == 0 => Ok(None),
            Some(p) => Ok(Some(p.take_front(len, &header))),
        }
    }
}

/// A fully materialized trace, mostly for tests.
#[derive(Debug, Clone)]
pub struct MemoryTrace {
    pub header: TraceHeader,
    pub needles: Vec<Needle>,
    pub rest: TokenChunk,
}

impl TraceSource for MemoryTrace {
    fn header(&self) -> &TraceHeader {
        &self.header
    }

    fn needles(&self) -> &[Needle] {
        &self.needles
    }

    fn next_chunk(&mut self, len: usize) -> Result<Option<TokenChunk>> {
        if self.rest.len == 0 {
            return Ok(None);
        }
        let header = self.header;
        Ok(Some(self.rest.take_front(len, &header)))
    }
}
