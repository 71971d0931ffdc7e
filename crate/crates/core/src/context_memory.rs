//! Tiered context storage.
//!
//! Every token is initial (attention sink), local (sliding window) or
//! evicted. Evicted blocks keep full keys/values in the cold tier and only
//! their span index vectors in the hot tier. A small LRU resident set stands
//! in for blocks currently loaded for attention.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{LtriError, Result};
use crate::span_divider::SpanPartition;
use crate::span_indexer::SpanIndex;

/// Streaming layout shared by the engine and memory tiers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamConfig {
    pub l_init: usize,
    pub l_win: usize,
    pub block_size: usize,
    pub chunk_size: usize,
    pub gpu_cache_blocks: usize,
    pub score_decay: f64,
    pub max_spans: usize,
    pub block_budget: usize,
    pub prefill_last_chunk: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            l_init: 128,
            l_win: 4096,
            block_size: 128,
            chunk_size: 512,
            gpu_cache_blocks: 32,
            score_decay: 0.1,
            max_spans: 4,
            block_budget: 12,
            prefill_last_chunk: 32,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("l_init", self.l_init),
            ("l_win", self.l_win),
            ("block_size", self.block_size),
            ("chunk_size", self.chunk_size),
            ("gpu_cache_blocks", self.gpu_cache_blocks),
            ("max_spans", self.max_spans),
            ("block_budget", self.block_budget),
            ("prefill_last_chunk", self.prefill_last_chunk),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(LtriError::config(format!("{name} must be positive")));
        }
        if !(0.0..1.0).contains(&self.score_decay) {
            return Err(LtriError::config(format!(
                "score_decay {} outside [0, 1)",
                self.score_decay
            )));
        }
        if self.prefill_last_chunk > self.chunk_size {
            return Err(LtriError::config("prefill_last_chunk exceeds chunk_size"));
        }
        if self.max_spans > self.block_size {
            return Err(LtriError::config("max_spans exceeds block_size"));
        }
        Ok(())
    }

    /// Block id of the block starting at `start`.
    pub fn block_of(&self, token: usize) -> Option<usize> {
        token
            .checked_sub(self.l_init)
            .map(|t| t / self.block_size)
    }

    /// Token range `[start, end)` of block `id`.
    pub fn block_range(&self, id: usize) -> (usize, usize) {
        let s = self.l_init + id * self.block_size;
        (s, s + self.block_size)
    }
}

/// Element width used for byte accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StorageMode {
    #[default]
    F32,
    F16,
}

impl StorageMode {
    pub fn bytes(self) -> u64 {
        match self {
            StorageMode::F32 => 4,
            StorageMode::F16 => 2,
        }
    }
}

/// Full keys (and optional values) of one evicted block for one layer,
/// laid out `[token][width]` with `width = kv_heads * d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ColdPayload {
    pub block_id: usize,
    pub start: usize,
    pub len: usize,
    pub keys: Vec<f32>,
    pub values: Option<Vec<f32>>,
}

/// Hot-tier entry of an evicted block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub block_id: usize,
    pub start: usize,
    pub len: usize,
    pub partition: Option<SpanPartition>,
    pub span_indexes: Vec<SpanIndex>,
    pub needle_overlap: Option<(usize, usize)>,
}

impl BlockRecord {
    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn vector_count(&self) -> usize {
        self.span_indexes.iter().map(|s| s.vector_count()).sum()
    }

    pub fn hot_bytes(&self, index_dim: usize, storage: StorageMode) -> u64 {
        self.vector_count() as u64 * index_dim as u64 * storage.bytes()
    }
}

const SPILL_MAGIC: &[u8; 4] = b"LTRI";
const SPILL_VERSION: u32 = 1;
const SPILL_HEADER: u64 = 16;
const SPILL_RECORD_HEAD: u64 = 24;
/// Records per spill file.
pub const SPILL_BLOCKS_PER_FILE: usize = 1024;

#[derive(Debug)]
struct SpillStore {
    dir: PathBuf,
    prefix: String,
    width: usize,
    block_size: usize,
    // block_id -> (file number, slot)
    slots: BTreeMap<usize, (usize, usize)>,
    next_slot: usize,
}

impl SpillStore {
    fn record_stride(&self) -> u64 {
        SPILL_RECORD_HEAD + 2 * (self.block_size * self.width * 4) as u64
    }

    fn file_path(&self, file_no: usize) -> PathBuf {
        self.dir.join(format!("{}-{file_no:05}.bin", self.prefix))
    }

    fn write(&mut self, p: &ColdPayload) -> Result<()> {
        let (file_no, slot) = (self.next_slot / SPILL_BLOCKS_PER_FILE, self.next_slot % SPILL_BLOCKS_PER_FILE);
        let path = self.file_path(file_no);
        let mut f = OpenOptions::new().create(true).append(true).open(&path)?;
        let mut w = BufWriter::new(&mut f);
        if slot == 0 {
            w.write_all(SPILL_MAGIC)?;
            w.write_u32::<LittleEndian>(SPILL_VERSION)?;
            w.write_u32::<LittleEndian>(self.width as u32)?;
            w.write_u32::<LittleEndian>(self.block_size as u32)?;
        }
        w.write_u64::<LittleEndian>(p.block_id as u64)?;
        w.write_u64::<LittleEndian>(p.start as u64)?;
        w.write_u32::<LittleEndian>(p.len as u32)?;
        w.write_u32::<LittleEndian>(u32::from(p.values.is_some()))?;
        let full = self.block_size * self.width;
        let write_padded = |w: &mut BufWriter<&mut File>, data: &[f32]| -> Result<()> {
            for &v in data {
                w.write_f32::<LittleEndian>(v)?;
            }
            for _ in data.len()..full {
                w.write_f32::<LittleEndian>(0.0)?;
            }
            Ok(())
        };
        write_padded(&mut w, &p.keys)?;
        write_padded(&mut w, p.values.as_deref().unwrap_or(&[]))?;
        w.flush()?;
        self.slots.insert(p.block_id, (file_no, slot));
        self.next_slot += 1;
        Ok(())
    }

    fn read(&self, block_id: usize) -> Result<ColdPayload> {
        let &(file_no, slot) = self
            .slots
            .get(&block_id)
            .ok_or_else(|| LtriError::index(format!("block {block_id} not in spill store")))?;
        let mut r = BufReader::new(File::open(self.file_path(file_no))?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        let version = r.read_u32::<LittleEndian>()?;
        let width = r.read_u32::<LittleEndian>()? as usize;
        let block_size = r.read_u32::<LittleEndian>()? as usize;
        if &magic != SPILL_MAGIC || version != SPILL_VERSION || width != self.width || block_size != self.block_size {
            return Err(LtriError::internal("spill file header mismatch"));
        }
        r.seek(SeekFrom::Start(SPILL_HEADER + slot as u64 * self.record_stride()))?;
        let id = r.read_u64::<LittleEndian>()? as usize;
        let start = r.read_u64::<LittleEndian>()? as usize;
        let len = r.read_u32::<LittleEndian>()? as usize;
        let flags = r.read_u32::<LittleEndian>()?;
        if id != block_id {
            return Err(LtriError::internal(format!("spill slot holds block {id}, expected {block_id}")));
        }
        let full = self.block_size * self.width;
        let read_block = |r: &mut BufReader<File>| -> Result<Vec<f32>> {
            let mut v = vec![0.0f32; full];
            r.read_f32_into::<LittleEndian>(&mut v)?;
            v.truncate(len * self.width);
            Ok(v)
        };
        let keys = read_block(&mut r)?;
        let values = read_block(&mut r)?;
        Ok(ColdPayload {
            block_id,
            start,
            len,
            keys,
            values: (flags & 1 == 1).then_some(values),
        })
    }
}

/// Where cold payloads live.
#[derive(Debug)]
enum ColdStore {
    Memory(BTreeMap<usize, Arc<ColdPayload>>),
    Spill(SpillStore),
}

/// LRU set of resident block ids with hit/miss counters.
#[derive(Debug, Clone, Default)]
pub struct LruSet<T> {
    capacity: usize,
    tick: u64,
    by_id: BTreeMap<usize, (u64, T)>,
    by_tick: BTreeMap<u64, usize>,
    pub hits: u64,
    pub misses: u64,
}

impl<T: Clone> LruSet<T> {
    pub fn new(capacity: usize) -> Self {
        LruSet {
            capacity,
            tick: 0,
            by_id: BTreeMap::new(),
            by_tick: BTreeMap::new(),
            hits: 0,
            misses: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    pub fn contains(&self, id: usize) -> bool {
        self.by_id.contains_key(&id)
    }

    /// Returns the cached item on a hit and refreshes its recency.
    pub fn get(&mut self, id: usize) -> Option<T> {
        let (old, item) = self.by_id.get(&id).cloned()?;
        self.by_tick.remove(&old);
        self.tick += 1;
        self.by_tick.insert(self.tick, id);
        self.by_id.insert(id, (self.tick, item.clone()));
        self.hits += 1;
        Some(item)
    }

    /// Records a miss and inserts `item`, evicting the least recent entry.
    pub fn insert_miss(&mut self, id: usize, item: T) {
        self.misses += 1;
        if self.capacity == 0 {
            return;
        }
        if let Some((old, _)) = self.by_id.remove(&id) {
            self.by_tick.remove(&old);
        }
        while self.by_id.len() >= self.capacity {
            let (&t, &victim) = self.by_tick.iter().next().expect("non-empty");
            self.by_tick.remove(&t);
            self.by_id.remove(&victim);
        }
        self.tick += 1;
        self.by_tick.insert(self.tick, id);
        self.by_id.insert(id, (self.tick, item));
    }
}

/// Per-layer accounting parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerShape {
    pub layer: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    /// Heads of this layer whose index vectors are kept hot.
    pub index_heads: usize,
}

/// Evicted-block memory for one layer.
#[derive(Debug)]
pub struct LayerMemory {
    shape: LayerShape,
    block_size: usize,
    storage: StorageMode,
    records: BTreeMap<usize, BlockRecord>,
    cold: ColdStore,
    resident: LruSet<Arc<ColdPayload>>,
    hot_bytes: u64,
    cold_bytes: u64,
    tokens_evicted: u64,
}

impl LayerMemory {
    pub fn new(shape: LayerShape, config: &StreamConfig, storage: StorageMode) -> Self {
        LayerMemory {
            shape,
            block_size: config.block_size,
            storage,
            records: BTreeMap::new(),
            cold: ColdStore::Memory(BTreeMap::new()),
            resident: LruSet::new(config.gpu_cache_blocks),
            hot_bytes: 0,
            cold_bytes: 0,
            tokens_evicted: 0,
        }
    }

    /// Cold payloads go to files in `dir`, one file per 1024 blocks.
    pub fn with_spill(mut self, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        self.cold = ColdStore::Spill(SpillStore {
            dir: dir.to_path_buf(),
            prefix: format!("cold-layer{:03}", self.shape.layer),
            width: self.shape.kv_heads * self.shape.head_dim,
            block_size: self.block_size,
            slots: BTreeMap::new(),
            next_slot: 0,
        });
        Ok(self)
    }

    pub fn shape(&self) -> &LayerShape {
        &self.shape
    }

    pub fn is_indexed(&self) -> bool {
        self.shape.index_heads > 0
    }

    /// Moves a block to the cold tier and registers its index vectors hot.
    /// Indexed layers need at least one index vector per span; unindexed
    /// layers must pass none.
    pub fn evict_block(&mut self, record: BlockRecord, payload: ColdPayload) -> Result<&BlockRecord> {
        let id = record.block_id;
        if self.records.contains_key(&id) {
            return Err(LtriError::internal(format!(
                "block {id} already evicted on layer {}",
                self.shape.layer
            )));
        }
        if payload.block_id != id || payload.start != record.start || payload.len != record.len {
            return Err(LtriError::internal(format!("cold payload does not match block {id}")));
        }
        if record.len == 0 || record.len > self.block_size {
            return Err(LtriError::internal(format!("block {id} has length {}", record.len)));
        }
        let width = self.shape.kv_heads * self.shape.head_dim;
        if payload.keys.len() != record.len * width
            || payload.values.as_ref().is_some_and(|v| v.len() != record.len * width)
        {
            return Err(LtriError::trace(format!("block {id} keys do not match width {width}")));
        }
        if self.is_indexed() {
            if record.span_indexes.is_empty() || record.span_indexes.iter().any(|s| s.vector_count() == 0) {
                return Err(LtriError::index(format!("block {id} evicted with an empty span index")));
            }
            if record.span_indexes.iter().any(|s| s.dim != self.shape.head_dim) {
                return Err(LtriError::trace(format!("block {id} index vectors have the wrong dimension")));
            }
        } else if !record.span_indexes.is_empty() {
            return Err(LtriError::internal(format!(
                "layer {} keeps no index but block {id} carries one",
                self.shape.layer
            )));
        }

        let elems = payload.keys.len() + payload.values.as_ref().map_or(0, Vec::len);
        self.cold_bytes += elems as u64 * self.storage.bytes();
        self.hot_bytes += record.hot_bytes(self.shape.head_dim, self.storage);
        self.tokens_evicted += record.len as u64;
        match &mut self.cold {
            ColdStore::Memory(map) => {
                map.insert(id, Arc::new(payload));
            }
            ColdStore::Spill(store) => store.write(&payload)?,
        }
        Ok(self.records.entry(id).or_insert(record))
    }

    pub fn records(&self) -> impl Iterator<Item = &BlockRecord> {
        self.records.values()
    }

    pub fn record(&self, id: usize) -> Option<&BlockRecord> {
        self.records.get(&id)
    }

    pub fn block_count(&self) -> usize {
        self.records.len()
    }

    /// Cold payloads of `ids`, through the LRU resident set.
    pub fn fetch_blocks(&mut self, ids: &[usize]) -> Result<Vec<Arc<ColdPayload>>> {
        ids.iter()
            .map(|&id| {
                if !self.records.contains_key(&id) {
                    return Err(LtriError::index(format!(
                        "block {id} was never evicted on layer {}",
                        self.shape.layer
                    )));
                }
                if let Some(p) = self.resident.get(id) {
                    return Ok(p);
                }
                let p = match &self.cold {
                    ColdStore::Memory(map) => Arc::clone(&map[&id]),
                    ColdStore::Spill(store) => Arc::new(store.read(id)?),
                };
                self.resident.insert_miss(id, Arc::clone(&p));
                Ok(p)
            })
            .collect()
    }

    pub fn cache_stats(&self) -> (u64, u64) {
        (self.resident.hits, self.resident.misses)
    }

    pub fn hot_bytes(&self) -> u64 {
        self.hot_bytes
    }

    /// Hot bytes summed again from the records.
    pub fn recompute_hot_bytes(&self) -> u64 {
        self.records
            .values()
            .map(|r| r.hot_bytes(self.shape.head_dim, self.storage))
            .sum()
    }

    pub fn accounting(&self, budget: usize) -> TierAccounting {
        TierAccounting::from_layers([self], self.block_size, budget)
    }
}

fn ser_ratio<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str("inf")
    }
}

fn de_ratio<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Ratio {
        Finite(f64),
        Text(String),
    }
    match Ratio::deserialize(d)? {
        Ratio::Finite(v) => Ok(v),
        Ratio::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Ratio::Text(t) => Err(serde::de::Error::custom(format!("bad ratio '{t}'"))),
    }
}

/// Byte counts over all layers. A ratio with no hot bytes is reported as
/// the string `"inf"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierAccounting {
    pub tokens_evicted: u64,
    pub blocks_evicted: u64,
    pub index_vectors: u64,
    pub hot_bytes: u64,
    pub cold_bytes: u64,
    pub blocks_resident_hot: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    #[serde(serialize_with = "ser_ratio", deserialize_with = "de_ratio")]
    pub compression_ratio: f64,
    #[serde(serialize_with = "ser_ratio", deserialize_with = "de_ratio")]
    pub lower_bound: f64,
}

impl TierAccounting {
    /// `tokens_evicted` counts tokens once; the ratio multiplies by the kv
    /// width of every layer. `budget` is the per-block vector budget M.
    pub fn from_layers<'a>(
        layers: impl IntoIterator<Item = &'a LayerMemory>,
        block_size: usize,
        budget: usize,
    ) -> Self {
        let mut acc = TierAccounting {
            tokens_evicted: 0,
            blocks_evicted: 0,
            index_vectors: 0,
            hot_bytes: 0,
            cold_bytes: 0,
            blocks_resident_hot: 0,
            cache_hits: 0,
            cache_misses: 0,
            compression_ratio: f64::INFINITY,
            lower_bound: f64::INFINITY,
        };
        let mut evicted_kv_bytes = 0u64;
        let mut kv_heads = 0usize;
        let mut index_heads = 0usize;
        for l in layers {
            acc.tokens_evicted = acc.tokens_evicted.max(l.tokens_evicted);
            acc.blocks_evicted = acc.blocks_evicted.max(l.records.len() as u64);
            acc.index_vectors += l.records.values().map(|r| r.vector_count() as u64).sum::<u64>();
            acc.hot_bytes += l.hot_bytes;
            acc.cold_bytes += l.cold_bytes;
            acc.blocks_resident_hot += l.resident.len() as u64;
            acc.cache_hits += l.resident.hits;
            acc.cache_misses += l.resident.misses;
            evicted_kv_bytes +=
                l.tokens_evicted * (l.shape.kv_heads * l.shape.head_dim) as u64 * l.storage.bytes();
            kv_heads += l.shape.kv_heads;
            index_heads += l.shape.index_heads;
        }
        if acc.hot_bytes > 0 {
            acc.compression_ratio = evicted_kv_bytes as f64 / acc.hot_bytes as f64;
        }
        if index_heads > 0 && budget > 0 {
            acc.lower_bound = compression_lower_bound(block_size, kv_heads, budget, index_heads);
        }
        acc
    }
}

/// `B·H / (M·h)`.
pub fn compression_lower_bound(block_size: usize, kv_heads: usize, budget: usize, index_heads: usize) -> f64 {
    (block_size * kv_heads) as f64 / (budget * index_heads) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::span_divider::Span;
    use crate::span_indexer::{SpanIndex, VectorRows};

    fn shape(index_heads: usize) -> LayerShape {
        LayerShape {
            layer: 0,
            kv_heads: 2,
            head_dim: 4,
            index_heads,
        }
    }

    fn cfg() -> StreamConfig {
        StreamConfig {
            l_init: 4,
            l_win: 16,
            block_size: 8,
            gpu_cache_blocks: 32,
            ..StreamConfig::default()
        }
    }

    fn block(id: usize, vectors: usize) -> (BlockRecord, ColdPayload) {
        let start = 4 + id * 8;
        let keys: Vec<f32> = (0..8 * 8).map(|i| (i + id) as f32).collect();
        let idx_keys = vec![1.0f32; 8 * 4];
        let rows = VectorRows::new(&idx_keys, 4).unwrap();
        let span = Span::new(start, start + 7, 1.0);
        let index = SpanIndex::from_tokens(span, (0..vectors).collect(), &rows, 1.0);
        (
            BlockRecord {
                block_id: id,
                start,
                len: 8,
                partition: None,
                span_indexes: if vectors > 0 { vec![index] } else { vec![] },
                needle_overlap: None,
            },
            ColdPayload {
                block_id: id,
                start,
                len: 8,
                keys,
                values: None,
            },
        )
    }

    #[test]
    fn defaults_and_validation() {
        let c = StreamConfig::default();
        assert_eq!(
            (c.l_init, c.l_win, c.block_size, c.gpu_cache_blocks, c.chunk_size, c.score_decay),
            (128, 4096, 128, 32, 512, 0.1)
        );
        c.validate().unwrap();
        assert!(StreamConfig { block_size: 0, ..c.clone() }.validate().is_err());
        assert!(StreamConfig { score_decay: 1.0, ..c.clone() }.validate().is_err());
        assert_eq!(c.block_of(127), None);
        assert_eq!(c.block_of(128 + 130), Some(1));
        assert_eq!(c.block_range(2), (384, 512));
    }

    #[test]
    fn first_eviction_accounting() {
        let mut m = LayerMemory::new(shape(1), &cfg(), StorageMode::F32);
        let acc = m.accounting(12);
        assert_eq!(acc.hot_bytes, 0);
        assert!(acc.compression_ratio.is_infinite());
        let json = serde_json::to_value(&acc).unwrap();
        assert_eq!(json["compression_ratio"], "inf");
        let back: TierAccounting = serde_json::from_value(json).unwrap();
        assert!(back.compression_ratio.is_infinite());

        let (r, p) = block(0, 3);
        m.evict_block(r, p).unwrap();
        assert_eq!(m.hot_bytes(), 3 * 4 * 4);
        assert_eq!(m.recompute_hot_bytes(), m.hot_bytes());
        let acc = m.accounting(12);
        assert_eq!(acc.tokens_evicted, 8);
        assert_eq!(acc.compression_ratio, (8 * 2 * 4 * 4) as f64 / 48.0);
    }

    #[test]
    fn eviction_errors() {
        let mut m = LayerMemory::new(shape(1), &cfg(), StorageMode::F32);
        let (r, p) = block(0, 0);
        assert!(matches!(m.evict_block(r, p), Err(LtriError::Index(_))));
        let (r, p) = block(1, 2);
        m.evict_block(r.clone(), p.clone()).unwrap();
        assert!(matches!(m.evict_block(r, p), Err(LtriError::Internal(_))));

        let mut plain = LayerMemory::new(shape(0), &cfg(), StorageMode::F32);
        let (r, p) = block(0, 0);
        plain.evict_block(r, p).unwrap();
        assert_eq!(plain.hot_bytes(), 0);
    }

    #[test]
    fn lru_hits() {
        let mut m = LayerMemory::new(shape(1), &cfg(), StorageMode::F32);
        for id in 0..40 {
            let (r, p) = block(id, 1);
            m.evict_block(r, p).unwrap();
        }
        let ids: Vec<usize> = (0..16).collect();
        m.fetch_blocks(&ids).unwrap();
        m.fetch_blocks(&ids).unwrap();
        assert_eq!(m.cache_stats(), (16, 16));

        let mut m2 = LayerMemory::new(shape(1), &cfg(), StorageMode::F32);
        for id in 0..40 {
            let (r, p) = block(id, 1);
            m2.evict_block(r, p).unwrap();
        }
        let ids: Vec<usize> = (0..33).collect();
        m2.fetch_blocks(&ids).unwrap();
        m2.fetch_blocks(&[0]).unwrap();
        assert_eq!(m2.cache_stats(), (0, 34));
        assert!(matches!(m2.fetch_blocks(&[99]), Err(LtriError::Index(_))));
    }

    #[test]
    fn spill_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = LayerMemory::new(shape(1), &cfg(), StorageMode::F32)
            .with_spill(dir.path())
            .unwrap();
        let mut expect = Vec::new();
        for id in 0..5 {
            let (r, mut p) = block(id, 1);
            if id == 2 {
                p.values = Some(vec![7.0; 64]);
            }
            expect.push(p.clone());
            m.evict_block(r, p).unwrap();
        }
        let got = m.fetch_blocks(&[3, 2, 0]).unwrap();
        assert_eq!(*got[0], expect[3]);
        assert_eq!(*got[1], expect[2]);
        assert_eq!(*got[2], expect[0]);
        let bytes = fs::read(dir.path().join("cold-layer000-00000.bin")).unwrap();
        assert_eq!(&bytes[..4], b"LTRI");
        assert_eq!(bytes.len() as u64, SPILL_HEADER + 5 * (SPILL_RECORD_HEAD + 2 * 64 * 4));
    }

    #[test]
    fn lower_bound_formula() {
        assert!((compression_lower_bound(128, 14, 12, 14) - 128.0 / 12.0).abs() < 1e-12);
    }

    /// Reference LRU over a plain recency list.
    fn lru_oracle(cap: usize, accesses: &[usize]) -> (u64, u64) {
        let mut list: Vec<usize> = Vec::new();
        let (mut h, mut m) = (0, 0);
        for &a in accesses {
            if let Some(pos) = list.iter().position(|&x| x == a) {
                h += 1;
                list.remove(pos);
            } else {
                m += 1;
                if list.len() == cap {
                    list.remove(0);
                }
            }
            list.push(a);
        }
        (h, m)
    }

    proptest::proptest! {
        #[test]
        fn lru_matches_oracle(cap in 1usize..10, accesses in proptest::collection::vec(0usize..20, 0..200)) {
            let mut l: LruSet<()> = LruSet::new(cap);
            for &a in &accesses {
                if l.get(a).is_none() {
                    l.insert_miss(a, ());
                }
            }
            proptest::prop_assert_eq!((l.hits, l.misses), lru_oracle(cap, &accesses));
        }
    }
}
