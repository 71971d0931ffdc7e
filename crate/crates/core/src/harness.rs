//! Evaluation drivers over synthetic and recorded traces: NIAH recall,
//! ablation grids, span recovery, threshold tuning, λ calibration and
//! sweeps, and CSV/JSON report emission.
//!
//! Every metric here is a view over the [`StepReport`] stream, so a saved
//! `steps.jsonl` is enough to rebuild it.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{aggregate, run_stream, Ablation, EngineConfig, Phase, RunSummary, StepReport};
use crate::error::{LtriError, Result};
use crate::span_divider::{
    divide_tile, tune_thresholds, DivisionParams, LabeledBlock, PresetTable, ThresholdPreset, TuneResult,
};
use crate::span_indexer::{
    calibrate_lambda, CalibrationAccumulator, CalibrationStats, CompressionShape, LambdaTable, RatioMode,
};
use crate::synth::{default_signal_heads, SyntheticTrace, TraceSpec};
use crate::trace::{dense_tile, TokenChunk, TraceHeader, TraceSource};
use crate::tri_attention::Threshold;

/// Recall is the only response-quality proxy at desk scale; reports say so.
pub const QUALITY_PROXY: &str = "needle block present in the attended set (no generation is scored)";

/// Engine and synthetic trace settings in one file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub engine: EngineConfig,
    pub trace: TraceSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::desk(0)
    }
}

impl RunConfig {
    /// Desk-scale defaults with the engine ranking on the trace's signal heads.
    pub fn desk(seed: u64) -> Self {
        let trace = TraceSpec::desk(seed);
        let engine = EngineConfig {
            retrieval_heads: trace.signal_heads.clone(),
            ..EngineConfig::default()
        };
        RunConfig { engine, trace }
    }

    /// Parses a config file. Missing sections take desk defaults; missing
    /// signal heads follow the trace shape, and missing engine retrieval
    /// heads follow the trace's signal heads.
    pub fn from_json(text: &str) -> Result<Self> {
        let bad = |e: serde_json::Error| LtriError::config(format!("config file: {e}"));
        let value: serde_json::Value = serde_json::from_str(text).map_err(bad)?;
        let obj = value
            .as_object()
            .ok_or_else(|| LtriError::config("config must be a JSON object"))?;
        for key in obj.keys() {
            if key != "engine" && key != "trace" {
                return Err(LtriError::config(format!("unknown config section '{key}'")));
            }
        }
        let trace_v = obj.get("trace").cloned().unwrap_or_else(|| serde_json::json!({}));
        let engine_v = obj.get("engine").cloned().unwrap_or_else(|| serde_json::json!({}));
        let mut trace: TraceSpec = serde_json::from_value(trace_v.clone()).map_err(bad)?;
        if trace_v.get("signal_heads").is_none() {
            trace.signal_heads = default_signal_heads(trace.layers, trace.heads);
        }
        let mut engine: EngineConfig = serde_json::from_value(engine_v.clone()).map_err(bad)?;
        if engine_v.get("retrieval_heads").is_none() {
            engine.retrieval_heads = trace.signal_heads.clone();
        }
        trace.validate()?;
        engine.validate()?;
        Ok(RunConfig { engine, trace })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| LtriError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        RunConfig {
            trace: TraceSpec {
                seed,
                ..self.trace.clone()
            },
            ..self.clone()
        }
    }
}

/// Accounting counters after one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccountingPoint {
    pub step: usize,
    pub position: usize,
    pub tokens_evicted: u64,
    pub hot_bytes: u64,
    pub cold_bytes: u64,
    pub index_vectors: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub seed: Option<u64>,
    pub ablation: Ablation,
    pub inject_evidence: bool,
    pub quality_proxy: String,
    /// Rows of `recall_matrix`.
    pub recall_layers: Vec<usize>,
    /// `[layer][decode step]`.
    pub recall_matrix: Vec<Vec<bool>>,
    pub aggregate_recall: f64,
    pub accounting_series: Vec<AccountingPoint>,
    pub config_echo: EngineConfig,
}

/// Layers and `[layer][decode step]` recall rebuilt from reports.
pub fn recall_from_steps(steps: &[StepReport]) -> Result<(Vec<usize>, Vec<Vec<bool>>)> {
    let decode: Vec<&StepReport> = steps.iter().filter(|s| s.phase == Phase::Decode).collect();
    let Some(first) = decode.first() else {
        return Ok((Vec::new(), Vec::new()));
    };
    let layers: Vec<usize> = first.layers.iter().filter(|l| l.recall_row).map(|l| l.layer).collect();
    let mut matrix = vec![Vec::with_capacity(decode.len()); layers.len()];
    for s in &decode {
        for (row, &l) in matrix.iter_mut().zip(&layers) {
            let cell = s
                .layers
                .get(l)
                .and_then(|x| x.needle_recalled)
                .ok_or_else(|| LtriError::config(format!("step {} has no needle recall for layer {l}", s.step)))?;
            row.push(cell);
        }
    }
    Ok((layers, matrix))
}

pub fn accounting_series(steps: &[StepReport]) -> Vec<AccountingPoint> {
    steps
        .iter()
        .map(|s| AccountingPoint {
            step: s.step,
            position: s.position,
            tokens_evicted: s.accounting.tokens_evicted,
            hot_bytes: s.accounting.hot_bytes,
            cold_bytes: s.accounting.cold_bytes,
            index_vectors: s.accounting.index_vectors,
        })
        .collect()
}

/// Builds a recall report from a step stream.
pub fn recall_report(steps: &[StepReport], config: &EngineConfig, seed: Option<u64>) -> Result<RecallReport> {
    let (recall_layers, recall_matrix) = recall_from_steps(steps)?;
    let aggregate_recall = aggregate(&recall_matrix)
        .ok_or_else(|| LtriError::config("no decode steps with needle recall to report"))?;
    Ok(RecallReport {
        seed,
        ablation: config.ablation,
        inject_evidence: config.inject_evidence,
        quality_proxy: QUALITY_PROXY.to_string(),
        recall_layers,
        recall_matrix,
        aggregate_recall,
        accounting_series: accounting_series(steps),
        config_echo: config.clone(),
    })
}

/// Full engine run over a trace with needle annotations.
pub fn run_niah(source: &mut dyn TraceSource, config: &EngineConfig, seed: Option<u64>) -> Result<RecallReport> {
    if source.needles().is_empty() {
        return Err(LtriError::config("NIAH run needs a trace with needle annotations"));
    }
    let out = run_stream(source, config)?;
    recall_report(&out.reports, config, seed)
}

/// Recall over many seeds of one synthetic configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NiahSweep {
    pub reports: Vec<RecallReport>,
    /// Mean over every (stream, layer, step) cell.
    pub aggregate_recall: f64,
}

impl NiahSweep {
    fn from_reports(reports: Vec<RecallReport>) -> Result<Self> {
        let matrices: Vec<Vec<bool>> = reports.iter().flat_map(|r| r.recall_matrix.iter().cloned()).collect();
        let aggregate_recall = aggregate(&matrices).ok_or_else(|| LtriError::config("empty sweep"))?;
        Ok(NiahSweep {
            reports,
            aggregate_recall,
        })
    }
}

/// Runs one NIAH stream per seed. Seeds are independent jobs; results keep
/// seed order.
pub fn niah_seeds(run: &RunConfig, seeds: Range<u64>) -> Result<NiahSweep> {
    let reports = seeds
        .into_par_iter()
        .map(|seed| {
            let cfg = run.with_seed(seed);
            let mut src = SyntheticTrace::new(cfg.trace)?;
            run_niah(&mut src, &cfg.engine, Some(seed))
        })
        .collect::<Result<Vec<_>>>()?;
    NiahSweep::from_reports(reports)
}

/// One cell of a needle-position by context-length grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub position: f64,
    pub prefill_tokens: usize,
    pub aggregate_recall: f64,
}

pub fn niah_grid(run: &RunConfig, positions: &[f64], lengths: &[usize], seeds: Range<u64>) -> Result<Vec<GridCell>> {
    let mut out = Vec::with_capacity(positions.len() * lengths.len());
    for &prefill_tokens in lengths {
        for &position in positions {
            let mut cell = run.clone();
            cell.trace.prefill_tokens = prefill_tokens;
            let needle = cell
                .trace
                .needle
                .as_mut()
                .ok_or_else(|| LtriError::config("grid needs a needle spec"))?;
            needle.position = position;
            let sweep = niah_seeds(&cell, seeds.clone())?;
            out.push(GridCell {
                position,
                prefill_tokens,
                aggregate_recall: sweep.aggregate_recall,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub label: String,
    pub ablation: Ablation,
    pub sweep: NiahSweep,
}

/// All eight {P, RH, V} combinations over the same seeds.
pub fn ablation_grid(run: &RunConfig, seeds: Range<u64>) -> Result<Vec<AblationOutcome>> {
    Ablation::grid()
        .into_iter()
        .map(|ablation| {
            let mut cfg = run.clone();
            cfg.engine.ablation = ablation;
            Ok(AblationOutcome {
                label: ablation.label(),
                ablation,
                sweep: niah_seeds(&cfg, seeds.clone())?,
            })
        })
        .collect()
}

/// Average index vectors per block for one layer at one λ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSweepRow {
    pub lambda: f64,
    pub layer: usize,
    pub blocks: usize,
    pub index_vectors: usize,
    pub vectors_per_block: f64,
}

/// Runs the same trace once per λ and records per-layer index density.
/// Layers that keep no index are skipped.
pub fn lambda_sweep(run: &RunConfig, lambdas: &[f64]) -> Result<Vec<LambdaSweepRow>> {
    let rows = lambdas
        .par_iter()
        .map(|&lambda| {
            let mut cfg = run.clone();
            cfg.engine.lambda = lambda;
            cfg.engine.lambda_overrides.clear();
            let mut src = SyntheticTrace::new(cfg.trace.clone())?;
            let summary = crate::engine::run_stream_with(&mut src, &cfg.engine, |_| Ok(()))?;
            Ok(summary
                .layers
                .iter()
                .filter(|l| l.index_vectors > 0)
                .map(|l| LambdaSweepRow {
                    lambda,
                    layer: l.layer,
                    blocks: l.blocks,
                    index_vectors: l.index_vectors,
                    vectors_per_block: l.vectors_per_block(),
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(rows.into_iter().flatten().collect())
}

/// Exact-match counts of interior span starts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundaryCounts {
    pub predicted: usize,
    pub matched: usize,
    pub planted: usize,
    pub recovered: usize,
}

impl BoundaryCounts {
    pub fn add(&mut self, o: BoundaryCounts) {
        self.predicted += o.predicted;
        self.matched += o.matched;
        self.planted += o.planted;
        self.recovered += o.recovered;
    }

    pub fn f1(&self) -> f64 {
        let p = if self.predicted == 0 { 1.0 } else { self.matched as f64 / self.predicted as f64 };
        let r = if self.planted == 0 { 1.0 } else { self.recovered as f64 / self.planted as f64 };
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

/// Compares partition boundaries with planted ones. A boundary is the start
/// of a span strictly inside a block; a predicted boundary counts only when
/// it equals a planted one.
pub fn boundary_counts(predicted: &[usize], planted: &[usize]) -> BoundaryCounts {
    BoundaryCounts {
        predicted: predicted.len(),
        matched: predicted.iter().filter(|p| planted.contains(p)).count(),
        planted: planted.len(),
        recovered: planted.iter().filter(|g| predicted.contains(g)).count(),
    }
}

/// Block tiles of a synthetic prefill, `max_blocks` per layer at most,
/// with planted spans clipped to each block (tile-relative, inclusive).
fn synthetic_blocks(spec: &TraceSpec, max_blocks: usize) -> Result<Vec<Vec<LabeledBlock>>> {
    let mut src = SyntheticTrace::new(spec.clone())?;
    let header = *src.header();
    let layout = src.layout().clone();
    let b = spec.block_size;
    let mut out = vec![Vec::new(); header.layers];
    src.next_chunk(spec.l_init)?;
    let mut taken = 0;
    while taken < max_blocks {
        let Some(c) = src.next_chunk(b)? else { break };
        if c.len < b || c.end() > spec.prefill_tokens {
            break;
        }
        let evidence: Vec<(usize, usize)> = layout
            .spans
            .iter()
            .filter(|&&(s, e)| e >= c.start && s < c.end())
            .map(|&(s, e)| (s.max(c.start) - c.start, e.min(c.end() - 1) - c.start))
            .collect();
        for (l, blocks) in out.iter_mut().enumerate() {
            let tile = dense_tile(l, header.heads, c.start, b, |h, t| c.attention_row(&header, l, t - c.start, h))?;
            blocks.push(LabeledBlock {
                tile,
                evidence: evidence.clone(),
            });
        }
        taken += 1;
    }
    Ok(out)
}

/// Partition boundary recovery on one synthetic trace.
pub fn span_recovery(spec: &TraceSpec, params: &DivisionParams, max_blocks: usize) -> Result<BoundaryCounts> {
    let mut counts = BoundaryCounts::default();
    for blocks in synthetic_blocks(spec, max_blocks)? {
        for block in blocks {
            let d = divide_tile(&block.tile, params)?;
            let predicted: Vec<usize> = d.partition.spans.iter().map(|s| s.start).filter(|&s| s > 0).collect();
            let planted: Vec<usize> = block.evidence.iter().map(|e| e.0).filter(|&s| s > 0).collect();
            counts.add(boundary_counts(&predicted, &planted));
        }
    }
    Ok(counts)
}

/// Span recovery pooled over seeds, run as independent jobs.
pub fn span_recovery_seeds(
    spec: &TraceSpec,
    params: &DivisionParams,
    max_blocks: usize,
    seeds: Range<u64>,
) -> Result<BoundaryCounts> {
    let per_seed = seeds
        .into_par_iter()
        .map(|seed| {
            span_recovery(
                &TraceSpec {
                    seed,
                    ..spec.clone()
                },
                params,
                max_blocks,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = BoundaryCounts::default();
    per_seed.into_iter().for_each(|c| total.add(c));
    Ok(total)
}

/// Per-layer θ/φ search on planted synthetic spans.
pub fn tune_synthetic(spec: &TraceSpec, max_blocks: usize, trials: usize, seed: u64) -> Result<Vec<TuneResult>> {
    let per_layer = synthetic_blocks(spec, max_blocks)?;
    per_layer
        .par_iter()
        .enumerate()
        .map(|(l, blocks)| tune_thresholds(blocks, l, trials, seed))
        .collect()
}

/// Per-layer θ/φ search on a recorded trace, labeling blocks that overlap
/// needles with the needle intervals.
pub fn tune_trace(
    source: &mut dyn TraceSource,
    l_init: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<TuneResult>> {
    let header = *source.header();
    let needles = source.needles().to_vec();
    if needles.is_empty() {
        return Err(LtriError::config("tuning a trace needs needle annotations"));
    }
    let mut per_layer: Vec<Vec<LabeledBlock>> = vec![Vec::new(); header.layers];
    for_each_block(source, l_init, |c| {
        let (lo, hi) = (c.start, c.end());
        let evidence: Vec<(usize, usize)> = needles
            .iter()
            .filter(|n| n.overlaps(lo, hi))
            .map(|n| (n.start.max(lo) - lo, n.end.min(hi - 1) - lo))
            .collect();
        if evidence.is_empty() {
            return Ok(());
        }
        for (l, blocks) in per_layer.iter_mut().enumerate() {
            let tile = dense_tile(l, header.heads, lo, c.len, |h, t| c.attention_row(&header, l, t - lo, h))?;
            blocks.push(LabeledBlock {
                tile,
                evidence: evidence.clone(),
            });
        }
        Ok(())
    })?;
    per_layer
        .par_iter()
        .enumerate()
        .map(|(l, blocks)| tune_thresholds(blocks, l, trials, seed))
        .collect()
}

pub fn preset_table(results: &[TuneResult]) -> PresetTable {
    PresetTable(
        results
            .iter()
            .map(|r| {
                (
                    r.layer,
                    ThresholdPreset {
                        theta_quantile: r.theta_quantile,
                        iou_threshold: r.iou_threshold,
                    },
                )
            })
            .collect(),
    )
}

/// Calls `f` on every full prefill block after the first `l_init` tokens.
fn for_each_block(
    source: &mut dyn TraceSource,
    l_init: usize,
    mut f: impl FnMut(&TokenChunk) -> Result<()>,
) -> Result<()> {
    let header: TraceHeader = *source.header();
    if l_init > 0 {
        source.next_chunk(l_init)?;
    }
    let b = header.block_size;
    while let Some(c) = source.next_chunk(b)? {
        if c.len < b || c.end() > header.prefill_tokens {
            break;
        }
        f(&c)?;
    }
    Ok(())
}

/// Per-layer r_a statistics over every prefill block of a trace.
pub fn calibration_stats(
    source: &mut dyn TraceSource,
    config: &EngineConfig,
    bins: usize,
) -> Result<Vec<CalibrationStats>> {
    let header = *source.header();
    let presets = config.preset.as_deref().map(PresetTable::builtin).transpose()?;
    let params: Vec<DivisionParams> = (0..header.layers)
        .map(|l| {
            let (theta, iou_threshold) = match presets.as_ref().and_then(|p| p.get(l)) {
                Some(p) => (Threshold::Percentile(p.theta_quantile), p.iou_threshold),
                None => (config.theta, config.iou_threshold),
            };
            DivisionParams {
                theta,
                iou_threshold,
                max_spans: config.stream.max_spans,
            }
        })
        .collect();
    let mut acc: Vec<CalibrationAccumulator> = (0..header.layers).map(|l| CalibrationAccumulator::new(l, bins)).collect();
    for_each_block(source, config.stream.l_init, |c| {
        for (l, a) in acc.iter_mut().enumerate() {
            let tile = dense_tile(l, header.heads, c.start, c.len, |h, t| c.attention_row(&header, l, t - c.start, h))?;
            let d = divide_tile(&tile, &params[l])?;
            a.add_block(&d.field, &d.partition, config.ratio_mode)?;
        }
        Ok(())
    })?;
    acc.iter().map(CalibrationAccumulator::finish).collect()
}

/// Calibrated λ per layer for a target compression ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub target_ratio: f64,
    pub lower_bound: f64,
    pub ratio_mode: RatioMode,
    pub tables: Vec<LambdaTable>,
    /// Drop-in `lambda_overrides` for the engine config.
    pub lambda_overrides: std::collections::BTreeMap<usize, f64>,
}

/// Calibrates every layer. `index_heads` is the number of heads each layer
/// indexes; `target` defaults to the compression lower bound.
pub fn calibrate_trace(
    source: &mut dyn TraceSource,
    config: &EngineConfig,
    index_heads: usize,
    target: Option<f64>,
    bins: usize,
    grid: &[f64],
) -> Result<Calibration> {
    let header = *source.header();
    let shape = CompressionShape {
        block_size: header.block_size,
        kv_heads: header.heads,
        index_heads,
        min_vectors: config.min_vectors,
        max_per_span: config.max_per_span,
        block_budget: config.stream.block_budget,
    };
    let lower_bound = shape.lower_bound();
    let target_ratio = target.unwrap_or(lower_bound);
    let stats = calibration_stats(source, config, bins)?;
    let mut tables = Vec::with_capacity(stats.len());
    let mut lambda_overrides = std::collections::BTreeMap::new();
    for s in &stats {
        let (lambda, table) = calibrate_lambda(s, &shape, target_ratio, grid)?;
        lambda_overrides.insert(s.layer, lambda);
        tables.push(table);
    }
    Ok(Calibration {
        target_ratio,
        lower_bound,
        ratio_mode: config.ratio_mode,
        tables,
        lambda_overrides,
    })
}

/// Writes `steps.jsonl`, `retrieval.jsonl` and `summary.json` into `dir`.
pub fn write_run(dir: &Path, steps: &[StepReport], summary: &RunSummary) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join("steps.jsonl"))?);
    let mut r = BufWriter::new(File::create(dir.join("retrieval.jsonl"))?);
    for s in steps {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
        for line in s.retrieval_log() {
            serde_json::to_writer(&mut r, &line)?;
            r.write_all(b"\n")?;
        }
    }
    w.flush()?;
    r.flush()?;
    write_json(&dir.join("summary.json"), summary)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_steps(path: &Path) -> Result<Vec<StepReport>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// One row per recall layer: `layer, step0, step1, ...` with 1 for recalled.
pub fn write_heatmap_csv(path: &Path, layers: &[usize], matrix: &[Vec<bool>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let steps = matrix.first().map_or(0, Vec::len);
    let mut head = vec!["layer".to_string()];
    head.extend((0..steps).map(|s| format!("step{s}")));
    w.write_record(&head)?;
    for (l, row) in layers.iter().zip(matrix) {
        let mut rec = vec![l.to_string()];
        rec.extend(row.iter().map(|&b| u8::from(b).to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

const GIB: f64 = (1u64 << 30) as f64;

/// Tokens seen against tier bytes, one row per step.
pub fn write_accounting_csv(path: &Path, series: &[AccountingPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "step",
        "tokens",
        "tokens_evicted",
        "index_vectors",
        "hot_bytes",
        "hot_gib",
        "cold_bytes",
    ])?;
    for p in series {
        w.write_record([
            p.step.to_string(),
            p.position.to_string(),
            p.tokens_evicted.to_string(),
            p.index_vectors.to_string(),
            p.hot_bytes.to_string(),
            format!("{:.6}", p.hot_bytes as f64 / GIB),
            p.cold_bytes.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_lambda_sweep_csv(path: &Path, rows: &[LambdaSweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["lambda", "layer", "blocks", "index_vectors", "vectors_per_block"])?;
    for r in rows {
        w.write_record([
            r.lambda.to_string(),
            r.layer.to_string(),
            r.blocks.to_string(),
            r.index_vectors.to_string(),
            format!("{:.6}", r.vectors_per_block),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Report artifacts derived from a saved run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportIndex {
    pub steps: usize,
    pub recall_layers: Vec<usize>,
    pub aggregate_recall: Option<f64>,
    pub quality_proxy: String,
    pub files: Vec<String>,
}

/// Rebuilds heatmap and accounting CSVs from `run_dir/steps.jsonl`.
pub fn report_from_run(run_dir: &Path, out_dir: &Path) -> Result<ReportIndex> {
    let steps = read_steps(&run_dir.join("steps.jsonl"))?;
    fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();
    let series = accounting_series(&steps);
    write_accounting_csv(&out_dir.join("accounting.csv"), &series)?;
    files.push("accounting.csv".to_string());
    let has_needles = steps
        .iter()
        .any(|s| s.phase == Phase::Decode && s.layers.iter().any(|l| l.needle_recalled.is_some()));
    let (layers, matrix) = if has_needles { recall_from_steps(&steps)? } else { (Vec::new(), Vec::new()) };
    if has_needles {
        write_heatmap_csv(&out_dir.join("heatmap.csv"), &layers, &matrix)?;
        files.push("heatmap.csv".to_string());
    }
    let index = ReportIndex {
        steps: steps.len(),
        aggregate_recall: aggregate(&matrix),
        recall_layers: layers,
        quality_proxy: QUALITY_PROXY.to_string(),
        files,
    };
    write_json(&out_dir.join("report.json"), &index)?;
    Ok(index)
}
