//! Streaming engine.
//!
//! Each chunk runs three steps. Step one drains whole blocks that fell out
//! of the local window: they are divided into spans, indexed, and moved to
//! the memory tiers. Step two divides the incoming chunk, builds query index
//! vectors, and ranks and votes over evicted blocks. Step three assembles
//! the attended set (initial, retrieved, local, current) and appends the
//! chunk to the local window.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::context_memory::{
    BlockRecord, ColdPayload, LayerMemory, LayerShape, StorageMode, StreamConfig, TierAccounting,
};
use crate::error::{LtriError, Result};
use crate::retriever::{
    inject_into, llama3_retrieval_heads, progressive_vote, rank_blocks, vote, BlockIndexView, RankedBlock,
    RetrievalHead, RetrievalResult, ScoreBook, VotedBlock, DEFAULT_TOP_K,
};
use crate::span_divider::{divide_tile, Division, DivisionParams, PresetTable, SpanPartition};
use crate::span_indexer::{
    dynamic_index, mean_pooled_index, static_index, token_votes, DynamicParams, RatioMode, SpanIndex, TokenVote,
    VectorRows,
};
use crate::trace::{dense_tile, Needle, TokenChunk, TraceHeader, TraceSource};
use crate::tri_attention::{TaScoreField, Threshold};

/// Which retrieval mechanisms are enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Reuse the final prefill retrieval for every decode step.
    pub persistent: bool,
    /// Rank with retrieval heads only, weighting votes by head score.
    pub retrieval_heads: bool,
    /// Share one voted block set across layers.
    pub voting: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            persistent: true,
            retrieval_heads: true,
            voting: true,
        }
    }
}

impl Ablation {
    /// Disables the comma-separated mechanisms among `P`, `RH`, `V`.
    pub fn with_ablated(mut self, list: &str) -> Result<Self> {
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item.to_ascii_uppercase().as_str() {
                "P" => self.persistent = false,
                "RH" => self.retrieval_heads = false,
                "V" => self.voting = false,
                other => return Err(LtriError::config(format!("unknown ablation flag '{other}'"))),
            }
        }
        Ok(self)
    }

    /// All eight on/off combinations, all-on first.
    pub fn grid() -> Vec<Ablation> {
        (0..8u8)
            .map(|m| Ablation {
                persistent: m & 4 == 0,
                retrieval_heads: m & 2 == 0,
                voting: m & 1 == 0,
            })
            .collect()
    }

    /// Such as `P+RH+V` or `P-RH-V`; a minus marks a disabled mechanism.
    pub fn label(&self) -> String {
        let mark = |on: bool| if on { "+" } else { "-" };
        format!(
            "{}P{}RH{}V",
            mark(self.persistent),
            mark(self.retrieval_heads),
            mark(self.voting)
        )
        .trim_start_matches('+')
        .to_string()
    }
}

impl FromStr for Ablation {
    type Err = LtriError;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::default().with_ablated(s)
    }
}

/// How index vectors are chosen for a span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IndexPolicy {
    /// Confidence-sized top-vote keys.
    #[default]
    Dynamic,
    /// `total / spans` top-vote keys per span.
    Static { total: usize },
    /// One mean key per span; comparison only.
    MeanPooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub stream: StreamConfig,
    pub top_k: usize,
    pub theta: Threshold,
    pub iou_threshold: f64,
    /// Built-in per-layer θ/φ table; overrides `theta` and `iou_threshold`.
    pub preset: Option<String>,
    pub lambda: f64,
    pub lambda_overrides: BTreeMap<usize, f64>,
    pub min_vectors: usize,
    pub max_per_span: usize,
    pub ratio_mode: RatioMode,
    pub index_policy: IndexPolicy,
    pub retrieval_heads: Vec<RetrievalHead>,
    pub ablation: Ablation,
    /// Layer `l` votes only over ranking layers up to `l`.
    pub progressive_vote: bool,
    pub inject_evidence: bool,
    pub storage: StorageMode,
    pub spill_dir: Option<PathBuf>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            stream: StreamConfig::default(),
            top_k: DEFAULT_TOP_K,
            theta: Threshold::default(),
            iou_threshold: crate::span_divider::DEFAULT_IOU_THRESHOLD,
            preset: None,
            lambda: 3.0,
            lambda_overrides: BTreeMap::new(),
            min_vectors: 1,
            max_per_span: 12,
            ratio_mode: RatioMode::Row,
            index_policy: IndexPolicy::Dynamic,
            retrieval_heads: llama3_retrieval_heads(),
            ablation: Ablation::default(),
            progressive_vote: false,
            inject_evidence: false,
            storage: StorageMode::F32,
            spill_dir: None,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        self.stream.validate()?;
        if self.top_k == 0 {
            return Err(LtriError::config("top_k must be positive"));
        }
        if !(0.0 < self.iou_threshold && self.iou_threshold < 1.0) {
            return Err(LtriError::config(format!(
                "iou threshold {} outside (0, 1)",
                self.iou_threshold
            )));
        }
        for lambda in std::iter::once(&self.lambda).chain(self.lambda_overrides.values()) {
            self.dynamic_params(*lambda).validate(self.stream.max_spans)?;
        }
        if let IndexPolicy::Static { total } = self.index_policy {
            if total < self.stream.max_spans {
                return Err(LtriError::config("static index total below max spans"));
            }
        }
        if let Some(p) = &self.preset {
            PresetTable::builtin(p)?;
        }
        Ok(())
    }

    fn dynamic_params(&self, lambda: f64) -> DynamicParams {
        DynamicParams {
            lambda,
            min_vectors: self.min_vectors,
            max_per_span: self.max_per_span,
            block_budget: self.stream.block_budget,
            mode: self.ratio_mode,
        }
    }

    fn division_for(&self, layer: usize, presets: Option<&PresetTable>) -> DivisionParams {
        let (theta, iou) = match presets.and_then(|p| p.get(layer)) {
            Some(p) => (Threshold::Percentile(p.theta_quantile), p.iou_threshold),
            None => (self.theta, self.iou_threshold),
        };
        DivisionParams {
            theta,
            iou_threshold: iou,
            max_spans: self.stream.max_spans,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Prefill,
    Decode,
}

/// Row-major per-token rows for a sliding range of tokens.
#[derive(Debug, Clone)]
struct RowBuffer {
    width: usize,
    first: usize,
    skip: usize,
    data: Vec<f32>,
}

impl RowBuffer {
    fn new(width: usize, first: usize) -> Self {
        RowBuffer {
            width,
            first,
            skip: 0,
            data: Vec::new(),
        }
    }

    fn end(&self) -> usize {
        self.first + (self.data.len() / self.width - self.skip)
    }

    fn push(&mut self, rows: &[f32]) {
        self.data.extend_from_slice(rows);
    }

    #[inline]
    fn row(&self, token: usize) -> &[f32] {
        let r = token - self.first + self.skip;
        &self.data[r * self.width..(r + 1) * self.width]
    }

    fn rows(&self, start: usize, n: usize) -> &[f32] {
        let r = start - self.first + self.skip;
        &self.data[r * self.width..(r + n) * self.width]
    }

    fn drop_front(&mut self, n: usize) {
        self.skip += n;
        self.first += n;
        if self.skip * 2 >= self.data.len() / self.width {
            self.data.drain(..self.skip * self.width);
            self.skip = 0;
        }
    }
}

struct LayerState {
    layer: usize,
    memory: LayerMemory,
    book: ScoreBook,
    attn: RowBuffer,
    keys: RowBuffer,
    division: DivisionParams,
    params: DynamicParams,
    /// Heads whose index vectors are kept and ranked.
    index_heads: Vec<usize>,
    weight: f64,
}

/// Per-layer view of one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStepLog {
    pub layer: usize,
    /// Whether this layer ranked blocks itself.
    pub ranking: bool,
    /// Whether this layer is a row of the recall matrix.
    pub recall_row: bool,
    pub attended_blocks: Vec<usize>,
    pub attended_tokens: usize,
    pub needle_recalled: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub phase: Phase,
    pub chunk_start: usize,
    pub chunk_len: usize,
    pub position: usize,
    pub evicted_blocks: Vec<usize>,
    pub needle_blocks: Vec<usize>,
    pub retrieval: Option<RetrievalResult>,
    pub layers: Vec<LayerStepLog>,
    pub accounting: TierAccounting,
}

/// One line of the per-step retrieval log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalLogLine<'a> {
    pub step: usize,
    pub layer: usize,
    pub topk: &'a [RankedBlock],
    pub voted: &'a [VotedBlock],
    pub needle_recalled: Option<bool>,
}

impl StepReport {
    pub fn retrieval_log(&self) -> Vec<RetrievalLogLine<'_>> {
        let Some(r) = &self.retrieval else {
            return Vec::new();
        };
        self.layers
            .iter()
            .map(|l| RetrievalLogLine {
                step: self.step,
                layer: l.layer,
                topk: r.per_layer.get(&l.layer).map_or(&[][..], Vec::as_slice),
                voted: &r.voted,
                needle_recalled: l.needle_recalled,
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
struct PersistentSlot {
    result: RetrievalResult,
    per_layer: Vec<Vec<usize>>,
}

/// Streaming engine over one trace.
pub struct StreamEngine {
    config: EngineConfig,
    header: TraceHeader,
    needles: Vec<Needle>,
    layers: Vec<LayerState>,
    /// Layers that rank blocks themselves.
    ranking_layers: Vec<usize>,
    phase: Phase,
    position: usize,
    frontier: usize,
    step: usize,
    persistent: Option<PersistentSlot>,
}

impl StreamEngine {
    pub fn new(config: EngineConfig, header: TraceHeader, needles: Vec<Needle>) -> Result<Self> {
        config.validate()?;
        header.validate()?;
        if header.block_size != config.stream.block_size {
            return Err(LtriError::config(format!(
                "trace block size {} differs from configured {}",
                header.block_size, config.stream.block_size
            )));
        }
        if config.inject_evidence && needles.is_empty() {
            return Err(LtriError::config("evidence injection requested but the trace has no needles"));
        }
        let presets = config.preset.as_deref().map(PresetTable::builtin).transpose()?;

        let mut heads_by_layer: BTreeMap<usize, RetrievalHead> = BTreeMap::new();
        for h in crate::retriever::adopt_heads(&config.retrieval_heads) {
            if h.layer < header.layers {
                if h.head >= header.heads {
                    return Err(LtriError::config(format!(
                        "retrieval head ({}, {}) outside {} heads",
                        h.layer, h.head, header.heads
                    )));
                }
                heads_by_layer.insert(h.layer, h);
            }
        }
        let rh = config.ablation.retrieval_heads;
        if rh && heads_by_layer.is_empty() {
            return Err(LtriError::config("no retrieval head adopted on any trace layer"));
        }

        let mut layers = Vec::with_capacity(header.layers);
        let mut ranking_layers = Vec::new();
        for l in 0..header.layers {
            let (index_heads, weight) = if rh {
                match heads_by_layer.get(&l) {
                    Some(h) => (vec![h.head], h.score),
                    None => (Vec::new(), 0.0),
                }
            } else {
                ((0..header.heads).collect(), 1.0)
            };
            if !index_heads.is_empty() {
                ranking_layers.push(l);
            }
            let shape = LayerShape {
                layer: l,
                kv_heads: header.heads,
                head_dim: header.d,
                index_heads: index_heads.len(),
            };
            let mut memory = LayerMemory::new(shape, &config.stream, config.storage);
            if let Some(dir) = &config.spill_dir {
                memory = memory.with_spill(dir)?;
            }
            let lambda = config.lambda_overrides.get(&l).copied().unwrap_or(config.lambda);
            layers.push(LayerState {
                layer: l,
                memory,
                book: ScoreBook::default(),
                attn: RowBuffer::new(header.heads * header.band, config.stream.l_init),
                keys: RowBuffer::new(header.heads * header.d, config.stream.l_init),
                division: config.division_for(l, presets.as_ref()),
                params: config.dynamic_params(lambda),
                index_heads,
                weight,
            });
        }
        let frontier = config.stream.l_init;
        Ok(StreamEngine {
            config,
            header,
            needles,
            layers,
            ranking_layers,
            phase: Phase::Prefill,
            position: 0,
            frontier,
            step: 0,
            persistent: None,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn position(&self) -> usize {
        self.position
    }

    /// First token still in the local window.
    pub fn frontier(&self) -> usize {
        self.frontier
    }

    /// Width of the local attention map in tokens.
    pub fn local_width(&self) -> usize {
        self.position.saturating_sub(self.frontier)
    }

    pub fn ranking_layers(&self) -> &[usize] {
        &self.ranking_layers
    }

    /// Layers whose recall is reported: ranking layers with retrieval heads
    /// enabled, every layer otherwise.
    pub fn recall_layers(&self) -> Vec<usize> {
        if self.config.ablation.retrieval_heads {
            self.ranking_layers.clone()
        } else {
            (0..self.layers.len()).collect()
        }
    }

    pub fn persistent_result(&self) -> Option<&RetrievalResult> {
        self.persistent.as_ref().map(|p| &p.result)
    }

    pub fn memory(&self, layer: usize) -> &LayerMemory {
        &self.layers[layer].memory
    }

    pub fn accounting(&self) -> TierAccounting {
        TierAccounting::from_layers(
            self.layers.iter().map(|l| &l.memory),
            self.config.stream.block_size,
            self.config.stream.block_budget,
        )
    }

    pub fn layer_summaries(&self) -> Vec<LayerSummary> {
        self.layers
            .iter()
            .map(|s| LayerSummary {
                layer: s.layer,
                blocks: s.memory.block_count(),
                index_vectors: s.memory.records().map(BlockRecord::vector_count).sum(),
                hot_bytes: s.memory.hot_bytes(),
            })
            .collect()
    }

    fn evicted_blocks(&self) -> usize {
        (self.frontier - self.config.stream.l_init) / self.config.stream.block_size
    }

    /// Evicted blocks overlapping any needle.
    pub fn needle_blocks(&self) -> Vec<usize> {
        let s = &self.config.stream;
        let mut out = Vec::new();
        for b in 0..self.evicted_blocks() {
            let (lo, hi) = s.block_range(b);
            if self.needles.iter().any(|n| n.overlaps(lo, hi)) {
                out.push(b);
            }
        }
        out
    }

    /// Prefill step for a chunk of at most `chunk_size` tokens.
    pub fn step(&mut self, chunk: &TokenChunk) -> Result<StepReport> {
        if self.phase != Phase::Prefill {
            return Err(LtriError::state("prefill step after prefill finished"));
        }
        if chunk.len == 0 || chunk.len > self.config.stream.chunk_size {
            return Err(LtriError::config(format!(
                "chunk of {} tokens outside [1, {}]",
                chunk.len, self.config.stream.chunk_size
            )));
        }
        self.advance(chunk, Phase::Prefill, false)
    }

    /// Final prefill chunk; its retrieval result becomes the persistent set.
    pub fn finish_prefill(&mut self, chunk: &TokenChunk) -> Result<StepReport> {
        if self.phase != Phase::Prefill {
            return Err(LtriError::state("prefill already finished"));
        }
        if chunk.len == 0 || chunk.len > self.config.stream.prefill_last_chunk {
            return Err(LtriError::config(format!(
                "last prefill chunk of {} tokens outside [1, {}]",
                chunk.len, self.config.stream.prefill_last_chunk
            )));
        }
        let report = self.advance(chunk, Phase::Prefill, false)?;
        self.phase = Phase::Decode;
        if !self.config.ablation.persistent {
            self.persistent = None;
        }
        Ok(report)
    }

    /// One generated token.
    pub fn decode_step(&mut self, token: &TokenChunk) -> Result<StepReport> {
        if self.phase != Phase::Decode {
            return Err(LtriError::state("decode step before prefill finished"));
        }
        if token.len != 1 {
            return Err(LtriError::config(format!("decode step got {} tokens", token.len)));
        }
        let reuse = self.config.ablation.persistent;
        self.advance(token, Phase::Decode, reuse)
    }

    fn advance(&mut self, chunk: &TokenChunk, phase: Phase, reuse_persistent: bool) -> Result<StepReport> {
        if chunk.start != self.position {
            return Err(LtriError::trace(format!(
                "position gap: engine at {}, chunk starts at {}",
                self.position, chunk.start
            )));
        }
        chunk.validate(&self.header)?;

        // step 1: drain aged blocks
        let evicted = self.evict_aged()?;

        // step 2: retrieval for the incoming tokens
        let needle_blocks = self.needle_blocks();
        let (retrieval, per_layer_sets) = if reuse_persistent {
            match &self.persistent {
                Some(p) => {
                    let mut r = p.result.clone();
                    r.step = self.step;
                    (Some(r), p.per_layer.clone())
                }
                None => (None, vec![Vec::new(); self.layers.len()]),
            }
        } else if self.evicted_blocks() == 0 {
            (None, vec![Vec::new(); self.layers.len()])
        } else {
            let (r, sets) = self.retrieve(chunk, &needle_blocks)?;
            (Some(r), sets)
        };
        if phase == Phase::Prefill && self.config.ablation.persistent {
            if let Some(r) = &retrieval {
                self.persistent = Some(PersistentSlot {
                    result: RetrievalResult {
                        persistent: true,
                        ..r.clone()
                    },
                    per_layer: per_layer_sets.clone(),
                });
            }
        }

        // step 3: append the chunk and assemble attended sets
        self.append_local(chunk);
        let mut logs = Vec::with_capacity(self.layers.len());
        for (l, set) in per_layer_sets.iter().enumerate() {
            let state = &mut self.layers[l];
            state.memory.fetch_blocks(set)?;
            let retrieved: usize = set.iter().filter_map(|&b| state.memory.record(b)).map(|r| r.len).sum();
            let attended_tokens =
                self.position.min(self.config.stream.l_init) + retrieved + self.position.saturating_sub(self.frontier);
            let needle_recalled =
                (!self.needles.is_empty()).then(|| needle_blocks.iter().all(|b| set.contains(b)));
            logs.push(LayerStepLog {
                layer: l,
                ranking: self.ranking_layers.contains(&l),
                recall_row: !self.config.ablation.retrieval_heads || self.ranking_layers.contains(&l),
                attended_blocks: set.clone(),
                attended_tokens,
                needle_recalled,
            });
        }

        let report = StepReport {
            step: self.step,
            phase,
            chunk_start: chunk.start,
            chunk_len: chunk.len,
            position: self.position,
            evicted_blocks: evicted,
            needle_blocks,
            retrieval,
            layers: logs,
            accounting: self.accounting(),
        };
        self.step += 1;
        Ok(report)
    }

    fn append_local(&mut self, chunk: &TokenChunk) {
        let l_init = self.config.stream.l_init;
        let skip = l_init.saturating_sub(chunk.start).min(chunk.len);
        for (l, state) in self.layers.iter_mut().enumerate() {
            let aw = state.attn.width;
            let kw = state.keys.width;
            state.attn.push(&chunk.attention[l][skip * aw..]);
            state.keys.push(&chunk.keys[l][skip * kw..]);
            debug_assert_eq!(state.attn.end(), chunk.end().max(l_init));
        }
        self.position = chunk.end();
    }

    fn evict_aged(&mut self) -> Result<Vec<usize>> {
        let s = self.config.stream.clone();
        let mut evicted = Vec::new();
        while self.position >= self.frontier
            && self.position - self.frontier > s.l_win
            && self.frontier + s.block_size <= self.position
        {
            let block_id = self.evicted_blocks();
            let start = self.frontier;
            let needle_overlap = self
                .needles
                .iter()
                .find(|n| n.overlaps(start, start + s.block_size))
                .map(|n| (n.start, n.end));
            for state in &mut self.layers {
                evict_one(state, &self.header, block_id, start, s.block_size, self.position, needle_overlap, &self.config)?;
            }
            self.frontier += s.block_size;
            evicted.push(block_id);
        }
        Ok(evicted)
    }

    fn retrieve(&mut self, chunk: &TokenChunk, needle_blocks: &[usize]) -> Result<(RetrievalResult, Vec<Vec<usize>>)> {
        let k = self.config.top_k;
        let decay = self.config.stream.score_decay;
        let bounds = sub_blocks(chunk.start, chunk.end(), &self.config.stream);
        let mut per_layer: BTreeMap<usize, Vec<RankedBlock>> = BTreeMap::new();
        for &l in &self.ranking_layers {
            let state = &mut self.layers[l];
            let queries = query_indexes(state, &self.header, chunk, &bounds, &self.config)?;
            let views = state.memory.records().map(|r| BlockIndexView {
                block: r.block_id,
                spans: &r.span_indexes,
            });
            let mut ranked = rank_blocks(views, &queries, &mut state.book, decay)?;
            ranked.truncate(k);
            per_layer.insert(l, ranked);
        }

        let weighted: Vec<(f64, &[RankedBlock])> = self
            .ranking_layers
            .iter()
            .map(|l| (self.layers[*l].weight, per_layer[l].as_slice()))
            .collect();
        let total_weight: f64 = weighted.iter().map(|w| w.0).sum();
        let mut voted = if self.config.ablation.voting { vote(&weighted, k) } else { Vec::new() };
        let progressive = (self.config.ablation.voting && self.config.progressive_vote)
            .then(|| progressive_vote(&weighted, k));

        let n_layers = self.layers.len();
        let mut sets: Vec<Vec<VotedBlock>> = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let set = if let Some(prog) = &progressive {
                // votes of ranking layers up to and including l
                let upto = self.ranking_layers.iter().filter(|&&r| r <= l).count().max(1);
                prog[upto - 1].clone()
            } else if self.config.ablation.voting {
                voted.clone()
            } else {
                let src = self
                    .ranking_layers
                    .iter()
                    .rev()
                    .find(|&&r| r <= l)
                    .or_else(|| self.ranking_layers.first())
                    .copied()
                    .expect("at least one ranking layer");
                per_layer[&src]
                    .iter()
                    .map(|b| VotedBlock {
                        block: b.block,
                        weight: b.score,
                    })
                    .collect()
            };
            sets.push(set);
        }
        if self.config.inject_evidence && !needle_blocks.is_empty() {
            for set in &mut sets {
                inject_into(set, needle_blocks, k, total_weight);
            }
            if self.config.ablation.voting {
                inject_into(&mut voted, needle_blocks, k, total_weight);
            }
        }
        let ids = sets.into_iter().map(|s| s.into_iter().map(|v| v.block).collect()).collect();
        Ok((
            RetrievalResult {
                step: self.step,
                per_layer,
                voted,
                persistent: false,
            },
            ids,
        ))
    }
}

/// Boundaries of the block-aligned pieces of `[start, end)`.
fn sub_blocks(start: usize, end: usize, s: &StreamConfig) -> Vec<(usize, usize)> {
    let mut cuts = vec![start];
    let mut next = if start < s.l_init {
        s.l_init
    } else {
        s.l_init + ((start - s.l_init) / s.block_size + 1) * s.block_size
    };
    while next < end {
        cuts.push(next);
        next += s.block_size;
    }
    cuts.push(end);
    cuts.windows(2).map(|w| (w[0], w[1])).collect()
}

/// Vectors of `head` from `[token][head][d]` rows.
fn head_vectors(rows: &[f32], heads: usize, d: usize, head: usize) -> Vec<f32> {
    rows.chunks_exact(heads * d)
        .flat_map(|r| r[head * d..(head + 1) * d].iter().copied())
        .collect()
}

fn build_index(
    policy: IndexPolicy,
    field: &TaScoreField,
    partition: &SpanPartition,
    vectors: &VectorRows<'_>,
    votes: &[TokenVote],
    params: &DynamicParams,
) -> Result<Vec<SpanIndex>> {
    match policy {
        IndexPolicy::Dynamic => dynamic_index(field, partition, vectors, votes, params),
        IndexPolicy::Static { total } => static_index(partition, votes, total, vectors),
        IndexPolicy::MeanPooled => Ok(mean_pooled_index(partition, vectors)),
    }
}

#[allow(clippy::too_many_arguments)]
fn evict_one(
    state: &mut LayerState,
    header: &TraceHeader,
    block_id: usize,
    start: usize,
    len: usize,
    window_end: usize,
    needle_overlap: Option<(usize, usize)>,
    config: &EngineConfig,
) -> Result<()> {
    let (heads, band, d) = (header.heads, header.band, header.d);
    let keys_rows = state.keys.rows(start, len).to_vec();
    let mut span_indexes = Vec::new();
    let mut partition = None;
    if !state.index_heads.is_empty() {
        let attn = &state.attn;
        let tile = dense_tile(state.layer, heads, start, len, |h, t| &attn.row(t)[h * band..(h + 1) * band])?;
        let Division { field, partition: part, .. } = divide_tile(&tile, &state.division)?;
        // attention each block token receives from the local window rows
        let votes: Vec<TokenVote> = (0..len)
            .map(|x| {
                let tok = start + x;
                let last = (tok + band).min(window_end);
                let mut v = 0.0f64;
                for i in tok..last {
                    let row = attn.row(i);
                    for h in 0..heads {
                        v += row[h * band + (i - tok)] as f64;
                    }
                }
                TokenVote { token: x, score: v }
            })
            .collect();
        for &h in &state.index_heads {
            let hv = head_vectors(&keys_rows, heads, d, h);
            let rows = VectorRows::new(&hv, d)?;
            let idx = build_index(config.index_policy, &field, &part, &rows, &votes, &state.params)?;
            span_indexes.extend(idx.into_iter().map(|i| i.with_head(h).shifted(start)));
        }
        let mut part = part;
        part.block_id = block_id;
        for sp in &mut part.spans {
            *sp = sp.shifted(start);
        }
        partition = Some(part);
    }
    let record = BlockRecord {
        block_id,
        start,
        len,
        partition,
        span_indexes,
        needle_overlap,
    };
    let payload = ColdPayload {
        block_id,
        start,
        len,
        keys: keys_rows,
        values: None,
    };
    state.memory.evict_block(record, payload)?;
    state.attn.drop_front(len);
    state.keys.drop_front(len);
    debug_assert_eq!(state.attn.first, start + len);
    Ok(())
}

fn query_indexes(
    state: &LayerState,
    header: &TraceHeader,
    chunk: &TokenChunk,
    bounds: &[(usize, usize)],
    config: &EngineConfig,
) -> Result<Vec<SpanIndex>> {
    let (heads, d) = (header.heads, header.d);
    let l = state.layer;
    let mut out = Vec::new();
    for &(a, b) in bounds {
        let n = b - a;
        let tile = dense_tile(l, heads, a, n, |h, t| chunk.attention_row(header, l, t - chunk.start, h))?;
        let Division { field, partition: part, .. } = divide_tile(&tile, &state.division)?;
        let votes = token_votes(&tile, (0, n - 1))?;
        let qrows = &chunk.queries[l][(a - chunk.start) * heads * d..(b - chunk.start) * heads * d];
        for &h in &state.index_heads {
            let hv = head_vectors(qrows, heads, d, h);
            let rows = VectorRows::new(&hv, d)?;
            let idx = build_index(config.index_policy, &field, &part, &rows, &votes, &state.params)?;
            out.extend(idx.into_iter().map(|i| i.with_head(h).shifted(a)));
        }
    }
    Ok(out)
}

/// Reports and summary of a full stream.
#[derive(Debug, Clone, Serialize)]
pub struct RunOutput {
    pub reports: Vec<StepReport>,
    pub summary: RunSummary,
}

/// Index statistics of one layer at the end of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: usize,
    pub blocks: usize,
    pub index_vectors: usize,
    pub hot_bytes: u64,
}

impl LayerSummary {
    /// Index vectors per evicted block; 0 on a layer that keeps no index.
    pub fn vectors_per_block(&self) -> f64 {
        if self.blocks == 0 {
            0.0
        } else {
            self.index_vectors as f64 / self.blocks as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub tokens: usize,
    pub blocks: usize,
    pub layers: Vec<LayerSummary>,
    pub recall_layers: Vec<usize>,
    /// `[layer][decode step]`, rows in `recall_layers` order.
    pub recall_matrix: Vec<Vec<bool>>,
    pub aggregate_recall: Option<f64>,
    pub accounting: TierAccounting,
    pub config_echo: EngineConfig,
}

/// Recall matrix over decode steps for `layers`; `None` without needles.
pub fn recall_matrix(reports: &[StepReport], layers: &[usize]) -> Option<Vec<Vec<bool>>> {
    let decode: Vec<&StepReport> = reports.iter().filter(|r| r.phase == Phase::Decode).collect();
    layers
        .iter()
        .map(|&l| {
            decode
                .iter()
                .map(|r| r.layers.get(l).and_then(|x| x.needle_recalled))
                .collect::<Option<Vec<bool>>>()
        })
        .collect()
}

/// Mean of a recall matrix; `None` when it is empty.
pub fn aggregate(matrix: &[Vec<bool>]) -> Option<f64> {
    let cells: usize = matrix.iter().map(Vec::len).sum();
    (cells > 0).then(|| matrix.iter().flatten().filter(|&&b| b).count() as f64 / cells as f64)
}

/// Drives a whole trace: prefill chunks, the final question chunk, then
/// one decode step per remaining token. `on_report` sees every report in
/// order.
pub fn run_stream_with(
    source: &mut dyn TraceSource,
    config: &EngineConfig,
    mut on_report: impl FnMut(&StepReport) -> Result<()>,
) -> Result<RunSummary> {
    let header = *source.header();
    let mut engine = StreamEngine::new(config.clone(), header, source.needles().to_vec())?;
    let s = &config.stream;
    let last = s.prefill_last_chunk.min(header.prefill_tokens);
    let bulk_end = header.prefill_tokens - last;
    let mut decode_layers_matrix: Vec<Vec<bool>> = Vec::new();
    let recall_layers = engine.recall_layers();
    let mut any_needles = !engine.needles.is_empty();
    let mut record = |r: &StepReport, matrix: &mut Vec<Vec<bool>>| -> Result<()> {
        if r.phase == Phase::Decode && any_needles {
            if matrix.is_empty() {
                matrix.resize(recall_layers.len(), Vec::new());
            }
            for (row, &l) in matrix.iter_mut().zip(&recall_layers) {
                match r.layers[l].needle_recalled {
                    Some(b) => row.push(b),
                    None => any_needles = false,
                }
            }
        }
        on_report(r)
    };

    while engine.position() < bulk_end {
        let want = s.chunk_size.min(bulk_end - engine.position());
        let chunk = source
            .next_chunk(want)?
            .ok_or_else(|| LtriError::trace("trace ended during prefill"))?;
        if chunk.len != want {
            return Err(LtriError::trace("trace ended during prefill"));
        }
        let r = engine.step(&chunk)?;
        record(&r, &mut decode_layers_matrix)?;
    }
    let chunk = source
        .next_chunk(last)?
        .ok_or_else(|| LtriError::trace("trace ended before the final prefill chunk"))?;
    let r = engine.finish_prefill(&chunk)?;
    record(&r, &mut decode_layers_matrix)?;
    while let Some(tok) = source.next_chunk(1)? {
        let r = engine.decode_step(&tok)?;
        record(&r, &mut decode_layers_matrix)?;
    }
    if engine.position() != header.token_count {
        return Err(LtriError::trace(format!(
            "trace delivered {} tokens, header says {}",
            engine.position(),
            header.token_count
        )));
    }
    let matrix = if any_needles { decode_layers_matrix } else { Vec::new() };
    Ok(RunSummary {
        tokens: engine.position(),
        blocks: engine.evicted_blocks(),
        layers: engine.layer_summaries(),
        recall_layers: engine.recall_layers(),
        aggregate_recall: aggregate(&matrix),
        recall_matrix: matrix,
        accounting: engine.accounting(),
        config_echo: config.clone(),
    })
}

/// [`run_stream_with`] collecting every report.
pub fn run_stream(source: &mut dyn TraceSource, config: &EngineConfig) -> Result<RunOutput> {
    let mut reports = Vec::new();
    let summary = run_stream_with(source, config, |r| {
        reports.push(r.clone());
        Ok(())
    })?;
    Ok(RunOutput { reports, summary })
}
