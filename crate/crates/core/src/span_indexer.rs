//! Span index vectors: which key vectors represent a span in the hot tier.
//!
//! Static indexing keeps a fixed quota of top-vote keys per span. Dynamic
//! indexing sizes each span's quota from its confidence ratio `r_a` through
//! `r_v = exp(-λ (1 - r_a))`, under a per-block budget.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{LtriError, Result};
use crate::span_divider::{Span, SpanPartition};
use crate::tri_attention::{AttentionTile, TaScoreField};

/// Default λ grid searched by calibration.
pub const DEFAULT_LAMBDA_GRID: [f64; 9] = [3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 20.0];

/// Attention received by one token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenVote {
    pub token: usize,
    pub score: f64,
}

/// Votes for every column of `tile`, summed over heads and the query rows
/// `window.0..=window.1` (tile-relative).
pub fn token_votes(tile: &AttentionTile, window: (usize, usize)) -> Result<Vec<TokenVote>> {
    let (r0, r1) = window;
    if r0 > r1 || r1 >= tile.rows() {
        return Err(LtriError::index(format!(
            "vote window [{r0}, {r1}] outside tile with {} rows",
            tile.rows()
        )));
    }
    let mut acc = vec![0.0f64; tile.cols()];
    for h in 0..tile.heads() {
        for i in r0..=r1 {
            for (a, &v) in acc.iter_mut().zip(tile.row(h, i)) {
                *a += v as f64;
            }
        }
    }
    Ok(acc
        .into_iter()
        .enumerate()
        .map(|(token, score)| TokenVote { token, score })
        .collect())
}

/// Row-major view of per-token vectors.
#[derive(Debug, Clone, Copy)]
pub struct VectorRows<'a> {
    data: &'a [f32],
    dim: usize,
}

impl<'a> VectorRows<'a> {
    pub fn new(data: &'a [f32], dim: usize) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(LtriError::trace(format!(
                "vector buffer of {} floats is not a multiple of dimension {dim}",
                data.len()
            )));
        }
        Ok(VectorRows { data, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, token: usize) -> &'a [f32] {
        &self.data[token * self.dim..(token + 1) * self.dim]
    }
}

/// Index vectors chosen for one span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanIndex {
    pub span: Span,
    /// Attention head whose keys (or queries) the vectors come from.
    #[serde(default)]
    pub head: usize,
    pub dim: usize,
    /// `source_tokens.len() * dim` floats, one row per source token.
    pub vectors: Vec<f32>,
    pub source_tokens: Vec<usize>,
    pub r_v: f64,
    /// Component-wise sum of `vectors`, the only quantity retrieval needs.
    pub sum: Vec<f64>,
}

impl SpanIndex {
    pub fn from_tokens(span: Span, tokens: Vec<usize>, keys: &VectorRows<'_>, r_v: f64) -> Self {
        let dim = keys.dim();
        let mut vectors = Vec::with_capacity(tokens.len() * dim);
        let mut sum = vec![0.0f64; dim];
        for &t in &tokens {
            let row = keys.get(t);
            vectors.extend_from_slice(row);
            for (s, &v) in sum.iter_mut().zip(row) {
                *s += v as f64;
            }
        }
        SpanIndex {
            span,
            head: 0,
            dim,
            vectors,
            source_tokens: tokens,
            r_v,
            sum,
        }
    }

    pub fn vector_count(&self) -> usize {
        self.source_tokens.len()
    }

    pub fn vector(&self, k: usize) -> &[f32] {
        &self.vectors[k * self.dim..(k + 1) * self.dim]
    }

    pub fn with_head(mut self, head: usize) -> Self {
        self.head = head;
        self
    }

    /// Same index with spans and source tokens moved by `offset`.
    pub fn shifted(mut self, offset: usize) -> Self {
        self.span = self.span.shifted(offset);
        for t in &mut self.source_tokens {
            *t += offset;
        }
        self
    }
}

/// The `n` highest-vote tokens of `span`, ties to the lower index, in rank order.
pub fn top_tokens(span: &Span, votes: &[TokenVote], n: usize) -> Vec<usize> {
    let mut members: Vec<&TokenVote> = votes.iter().filter(|v| span.contains(v.token)).collect();
    members.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.token.cmp(&b.token)));
    members.into_iter().take(n).map(|v| v.token).collect()
}

/// Fixed quota of `⌊total / spans⌋` top-vote keys per span.
pub fn static_index(
    partition: &SpanPartition,
    votes: &[TokenVote],
    total: usize,
    keys: &VectorRows<'_>,
) -> Result<Vec<SpanIndex>> {
    let spans = partition.span_count();
    if spans == 0 || total < spans {
        return Err(LtriError::config(format!(
            "static index total {total} below span count {spans}"
        )));
    }
    let quota = total / spans;
    Ok(partition
        .spans
        .iter()
        .map(|s| SpanIndex::from_tokens(*s, top_tokens(s, votes, quota), keys, 1.0))
        .collect())
}

/// Mean of each span's keys as its single index vector. Kept only as a
/// comparison baseline.
pub fn mean_pooled_index(partition: &SpanPartition, keys: &VectorRows<'_>) -> Vec<SpanIndex> {
    partition
        .spans
        .iter()
        .map(|s| {
            let tokens: Vec<usize> = (s.start..=s.end).collect();
            let full = SpanIndex::from_tokens(*s, tokens, keys, 1.0);
            let n = s.len() as f64;
            let mean: Vec<f64> = full.sum.iter().map(|v| v / n).collect();
            SpanIndex {
                span: *s,
                head: 0,
                dim: full.dim,
                vectors: mean.iter().map(|&v| v as f32).collect(),
                source_tokens: vec![s.start],
                r_v: 1.0,
                sum: mean,
            }
        })
        .collect()
}

/// Which neighbor regions count against a span's own mass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatioMode {
    /// Span rows attending to earlier spans of the block.
    #[default]
    Row,
    /// Later spans of the block attending to span columns.
    Col,
    RowCol,
}

impl FromStr for RatioMode {
    type Err = LtriError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "row" => Ok(RatioMode::Row),
            "col" => Ok(RatioMode::Col),
            "rowcol" => Ok(RatioMode::RowCol),
            other => Err(LtriError::config(format!("unknown ratio mode '{other}'"))),
        }
    }
}

impl fmt::Display for RatioMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RatioMode::Row => "row",
            RatioMode::Col => "col",
            RatioMode::RowCol => "rowcol",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceRatio {
    pub span: Span,
    pub mode: RatioMode,
    pub r_a: f64,
}

/// `r_a = S*_span / (S*_span + neighbor mass)` over the unthresholded field.
/// An empty or massless neighbor region gives 1.
pub fn confidence_ratio(
    field: &TaScoreField,
    partition: &SpanPartition,
    span_idx: usize,
    mode: RatioMode,
) -> Result<ConfidenceRatio> {
    let span = *partition.spans.get(span_idx).ok_or_else(|| {
        LtriError::index(format!(
            "span {span_idx} out of range for partition of {}",
            partition.span_count()
        ))
    })?;
    let block_lo = partition.spans[0].start;
    let block_hi = partition.spans[partition.span_count() - 1].end;
    if block_hi >= field.len() {
        return Err(LtriError::index("partition extends past the field"));
    }
    let own = field.cumulative(span.start, span.end);
    let row = || {
        if span.start > block_lo {
            field.rect_sum((span.start, span.end), (block_lo, span.start - 1))
        } else {
            0.0
        }
    };
    let col = || {
        if span.end < block_hi {
            field.rect_sum((span.end + 1, block_hi), (span.start, span.end))
        } else {
            0.0
        }
    };
    let neighbors = match mode {
        RatioMode::Row => row(),
        RatioMode::Col => col(),
        RatioMode::RowCol => row() + col(),
    };
    let r_a = if neighbors <= 0.0 {
        1.0
    } else {
        (own / (own + neighbors)).clamp(0.0, 1.0)
    };
    Ok(ConfidenceRatio { span, mode, r_a })
}

/// `r_v = exp(-λ (1 - r_a))`.
#[inline]
pub fn rv(r_a: f64, lambda: f64) -> f64 {
    (-lambda * (1.0 - r_a)).exp()
}

/// Dynamic indexing parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicParams {
    pub lambda: f64,
    pub min_vectors: usize,
    pub max_per_span: usize,
    pub block_budget: usize,
    pub mode: RatioMode,
}

impl Default for DynamicParams {
    fn default() -> Self {
        DynamicParams {
            lambda: 3.0,
            min_vectors: 1,
            max_per_span: 12,
            block_budget: 12,
            mode: RatioMode::Row,
        }
    }
}

impl DynamicParams {
    pub fn validate(&self, max_spans: usize) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(LtriError::config(format!("lambda {} must be positive", self.lambda)));
        }
        if self.min_vectors == 0 || self.max_per_span < self.min_vectors {
            return Err(LtriError::config(format!(
                "per-span vector bounds [{}, {}] invalid",
                self.min_vectors, self.max_per_span
            )));
        }
        if self.block_budget < max_spans * self.min_vectors {
            return Err(LtriError::config(format!(
                "block budget {} cannot hold {} spans of at least {} vectors",
                self.block_budget, max_spans, self.min_vectors
            )));
        }
        Ok(())
    }
}

/// Unreduced vector count for a span of `len` tokens.
pub fn span_quota(len: usize, r_v: f64, min_vectors: usize, max_per_span: usize) -> usize {
    let raw = (len as f64 * r_v).round() as usize;
    raw.clamp(min_vectors, max_per_span).min(len)
}

/// Trims `counts` to `budget` by repeatedly decrementing the largest entry
/// (lowest index on ties).
pub fn reduce_to_budget(counts: &mut [usize], budget: usize) {
    let mut total: usize = counts.iter().sum();
    while total > budget {
        let (i, _) = counts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("non-empty");
        counts[i] -= 1;
        total -= 1;
    }
}

/// Confidence-sized index vectors for every span of `partition`.
pub fn dynamic_index(
    field: &TaScoreField,
    partition: &SpanPartition,
    keys: &VectorRows<'_>,
    votes: &[TokenVote],
    params: &DynamicParams,
) -> Result<Vec<SpanIndex>> {
    params.validate(partition.span_count())?;
    let mut rvs = Vec::with_capacity(partition.span_count());
    let mut counts = Vec::with_capacity(partition.span_count());
    for (k, s) in partition.spans.iter().enumerate() {
        let ratio = confidence_ratio(field, partition, k, params.mode)?;
        let r_v = rv(ratio.r_a, params.lambda);
        rvs.push(r_v);
        counts.push(span_quota(s.len(), r_v, params.min_vectors, params.max_per_span));
    }
    reduce_to_budget(&mut counts, params.block_budget);
    Ok(partition
        .spans
        .iter()
        .zip(counts.iter().zip(&rvs))
        .map(|(s, (&n, &r_v))| SpanIndex::from_tokens(*s, top_tokens(s, votes, n), keys, r_v))
        .collect())
}

/// One histogram bin of r_a with its probability mass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RaBin {
    pub lo: f64,
    pub hi: f64,
    pub p: f64,
}

impl RaBin {
    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

/// Equal-width r_a counts on [0, 1]; merging is associative.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RaHistogram {
    counts: Vec<u64>,
}

impl RaHistogram {
    pub fn new(bins: usize) -> Self {
        RaHistogram {
            counts: vec![0; bins.max(1)],
        }
    }

    pub fn add(&mut self, r_a: f64) {
        let n = self.counts.len();
        let b = ((r_a.clamp(0.0, 1.0) * n as f64) as usize).min(n - 1);
        self.counts[b] += 1;
    }

    pub fn merge(&mut self, other: &RaHistogram) -> Result<()> {
        if other.counts.len() != self.counts.len() {
            return Err(LtriError::config("histograms with different bin counts"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn bins(&self) -> Vec<RaBin> {
        let n = self.counts.len() as f64;
        let total = self.total().max(1) as f64;
        self.counts
            .iter()
            .enumerate()
            .map(|(i, &c)| RaBin {
                lo: i as f64 / n,
                hi: (i + 1) as f64 / n,
                p: c as f64 / total,
            })
            .collect()
    }
}

/// Per-layer statistics gathered from calibration traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub layer: usize,
    pub bins: Vec<RaBin>,
    pub mean_span_len: f64,
    pub spans_per_block: f64,
}

/// Streaming accumulator for [`CalibrationStats`].
#[derive(Debug, Clone)]
pub struct CalibrationAccumulator {
    layer: usize,
    histogram: RaHistogram,
    spans: u64,
    span_tokens: u64,
    blocks: u64,
}

impl CalibrationAccumulator {
    pub fn new(layer: usize, bins: usize) -> Self {
        CalibrationAccumulator {
            layer,
            histogram: RaHistogram::new(bins),
            spans: 0,
            span_tokens: 0,
            blocks: 0,
        }
    }

    pub fn add_block(&mut self, field: &TaScoreField, partition: &SpanPartition, mode: RatioMode) -> Result<()> {
        for k in 0..partition.span_count() {
            let r = confidence_ratio(field, partition, k, mode)?;
            self.histogram.add(r.r_a);
            self.span_tokens += partition.spans[k].len() as u64;
        }
        self.spans += partition.span_count() as u64;
        self.blocks += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &CalibrationAccumulator) -> Result<()> {
        self.histogram.merge(&other.histogram)?;
        self.spans += other.spans;
        self.span_tokens += other.span_tokens;
        self.blocks += other.blocks;
        Ok(())
    }

    pub fn finish(&self) -> Result<CalibrationStats> {
        if self.blocks == 0 {
            return Err(LtriError::config(format!(
                "no calibration blocks for layer {}",
                self.layer
            )));
        }
        Ok(CalibrationStats {
            layer: self.layer,
            bins: self.histogram.bins(),
            mean_span_len: self.span_tokens as f64 / self.spans as f64,
            spans_per_block: self.spans as f64 / self.blocks as f64,
        })
    }
}

/// Shapes needed to turn a vector count into a compression ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionShape {
    pub block_size: usize,
    pub kv_heads: usize,
    pub index_heads: usize,
    pub min_vectors: usize,
    pub max_per_span: usize,
    pub block_budget: usize,
}

impl CompressionShape {
    /// Relaxed lower bound `B·H / (M·h)`.
    pub fn lower_bound(&self) -> f64 {
        (self.block_size * self.kv_heads) as f64 / (self.block_budget * self.index_heads) as f64
    }

    pub fn ratio(&self, vectors_per_block: f64) -> f64 {
        if vectors_per_block <= 0.0 {
            return f64::INFINITY;
        }
        (self.block_size * self.kv_heads) as f64 / (vectors_per_block * self.index_heads as f64)
    }
}

/// Expected index vectors per block under `lambda`.
pub fn expected_vectors(stats: &CalibrationStats, shape: &CompressionShape, lambda: f64) -> f64 {
    let per_span: f64 = stats
        .bins
        .iter()
        .map(|b| {
            let raw = (stats.mean_span_len * rv(b.mid(), lambda)).round();
            b.p * raw.clamp(shape.min_vectors as f64, shape.max_per_span as f64)
        })
        .sum();
    (stats.spans_per_block * per_span).min(shape.block_budget as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaEntry {
    pub lambda: f64,
    pub expected_vectors: f64,
    pub ratio: f64,
}

/// Lookup table from λ to expected vectors and compression ratio for a layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaTable {
    pub layer: usize,
    pub bins: Vec<RaBin>,
    pub grid: Vec<LambdaEntry>,
    pub target_ratio: f64,
    pub selected: Option<f64>,
}

/// Builds the λ table and picks the smallest grid λ whose ratio reaches
/// `target_ratio`.
pub fn calibrate_lambda(
    stats: &CalibrationStats,
    shape: &CompressionShape,
    target_ratio: f64,
    grid: &[f64],
) -> Result<(f64, LambdaTable)> {
    if grid.is_empty() || grid.windows(2).any(|w| w[0] >= w[1]) || grid[0] <= 0.0 {
        return Err(LtriError::config("lambda grid must be positive and strictly ascending"));
    }
    if stats.bins.is_empty() {
        return Err(LtriError::config("empty r_a histogram"));
    }
    let entries: Vec<LambdaEntry> = grid
        .iter()
        .map(|&lambda| {
            let e = expected_vectors(stats, shape, lambda);
            LambdaEntry {
                lambda,
                expected_vectors: e,
                ratio: shape.ratio(e),
            }
        })
        .collect();
    let selected = entries.iter().find(|e| e.ratio >= target_ratio).map(|e| e.lambda);
    let table = LambdaTable {
        layer: stats.layer,
        bins: stats.bins.clone(),
        grid: entries,
        target_ratio,
        selected,
    };
    match selected {
        Some(l) => Ok((l, table)),
        None => {
            let best = table.grid.iter().map(|e| e.ratio).fold(0.0f64, f64::max);
            Err(LtriError::config(format!(
                "no lambda in grid reaches compression ratio {target_ratio}; max achievable {best}"
            )))
        }
    }
}
