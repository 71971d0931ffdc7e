//! Semantic span division: anti-diagonal candidate filtering, non-maximum
//! suppression over span "boxes", and completion into a block partition.
//!
//! Every point `(y, x)` of a TA score field with `x <= y` is the candidate
//! span `[x, y]`. All points on one anti-diagonal (`x + y` constant) share a
//! midpoint, so only the best one per anti-diagonal is kept, which bounds
//! the NMS input at `2L - 1` candidates for a block of `L` tokens.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LtriError, Result};
use crate::tri_attention::{quantile_sorted, AttentionTile, TaScoreField, Threshold};

/// Reference θ quantile used when no tuned value is supplied.
pub const DEFAULT_THETA_QUANTILE: f64 = 0.9;
/// Reference NMS IoU threshold φ.
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.1;

/// Inclusive token interval with its thresholded TA score. Indices are
/// relative to the field the span was taken from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub score: f64,
}

/// An NMS input point; same shape as a [`Span`].
pub type SpanCandidate = Span;

impl Span {
    pub fn new(start: usize, end: usize, score: f64) -> Self {
        debug_assert!(start <= end);
        Span { start, end, score }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn anti_diagonal(&self) -> usize {
        self.start + self.end
    }

    #[inline]
    pub fn contains(&self, token: usize) -> bool {
        self.start <= token && token <= self.end
    }

    #[inline]
    pub fn overlaps(&self, start: usize, end: usize) -> bool {
        self.start <= end && start <= self.end
    }

    pub fn shifted(&self, offset: usize) -> Span {
        Span::new(self.start + offset, self.end + offset, self.score)
    }
}

/// Disjoint, sorted spans covering a block exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanPartition {
    pub block_id: usize,
    pub spans: Vec<Span>,
}

impl SpanPartition {
    pub fn span_count(&self) -> usize {
        self.spans.len()
    }

    /// True when the spans tile `range` exactly with at most `max_spans` pieces.
    pub fn is_valid_for(&self, range: (usize, usize), max_spans: usize) -> bool {
        if self.spans.is_empty() || self.spans.len() > max_spans {
            return false;
        }
        let mut next = range.0;
        for s in &self.spans {
            if s.start != next || s.end < s.start {
                return false;
            }
            next = s.end + 1;
        }
        next == range.1 + 1
    }
}

/// Best-scoring point of each anti-diagonal inside `range` (inclusive,
/// field-relative), dropping non-positive scores. Ties keep the smaller start.
pub fn generate_candidates(field: &TaScoreField, range: (usize, usize)) -> Result<Vec<SpanCandidate>> {
    let (lo, hi) = range;
    if lo > hi || hi >= field.len() {
        return Err(LtriError::index(format!(
            "block range [{lo}, {hi}] invalid for field of length {}",
            field.len()
        )));
    }
    let mut out = Vec::new();
    for diag in 2 * lo..=2 * hi {
        let x_min = lo.max(diag.saturating_sub(hi));
        let x_max = diag / 2;
        let mut best: Option<Span> = None;
        for x in x_min..=x_max {
            let y = diag - x;
            let score = field.score_unchecked(x, y);
            if best.is_none_or(|b| score > b.score) {
                best = Some(Span::new(x, y, score));
            }
        }
        if let Some(b) = best {
            if b.score > 0.0 {
                out.push(b);
            }
        }
    }
    Ok(out)
}

/// IoU of two spans embedded as squares on the attention map diagonal.
pub fn iou(a: &Span, b: &Span) -> f64 {
    let inter = (a.end.min(b.end) + 1).saturating_sub(a.start.max(b.start)) as f64;
    if inter == 0.0 {
        return 0.0;
    }
    let la = a.len() as f64;
    let lb = b.len() as f64;
    let inter2 = inter * inter;
    inter2 / (la * la + lb * lb - inter2)
}

/// Score descending, then start ascending, then end ascending.
pub fn nms_order(a: &Span, b: &Span) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.start.cmp(&b.start))
        .then(a.end.cmp(&b.end))
}

/// Greedy non-maximum suppression with IoU threshold `phi`. Output is
/// sorted by start.
///
/// Each candidate is only compared with kept spans whose start lies within
/// the longest kept length of it, since no other kept span can intersect it.
pub fn nms(candidates: &[SpanCandidate], phi: f64) -> Vec<SpanCandidate> {
    let mut order: Vec<Span> = candidates.to_vec();
    order.sort_by(nms_order);

    let mut kept: Vec<Span> = Vec::new();
    let mut by_start: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut max_len = 0usize;
    for cand in order {
        let window_lo = cand.start.saturating_sub(max_len.saturating_sub(1));
        let suppressed = by_start
            .range(window_lo..=cand.end)
            .flat_map(|(_, ids)| ids.iter())
            .any(|&k| kept[k].end >= cand.start && iou(&kept[k], &cand) > phi);
        if !suppressed {
            by_start.entry(cand.start).or_default().push(kept.len());
            max_len = max_len.max(cand.len());
            kept.push(cand);
        }
    }
    kept.sort_by(|a, b| a.start.cmp(&b.start).then(a.end.cmp(&b.end)));
    kept
}

/// Turns NMS survivors into a partition of `range` with at most `max_spans`
/// spans.
///
/// Survivors are made disjoint in score order (a later survivor keeps the
/// longest piece not covered by earlier ones), gaps become filler spans, and
/// while there are too many spans the lowest-scoring one is merged into its
/// left neighbor (the leftmost span merges right). Truncated survivors and
/// fillers are scored from `field`; a merge keeps the absorbing neighbor's
/// score, since rescoring a widened span with the θ-shifted score would make
/// it the next merge victim and collapse the block.
pub fn complete_partition(
    kept: &[SpanCandidate],
    range: (usize, usize),
    max_spans: usize,
    field: &TaScoreField,
) -> Result<SpanPartition> {
    let (lo, hi) = range;
    if lo > hi || hi >= field.len() {
        return Err(LtriError::index(format!(
            "block range [{lo}, {hi}] invalid for field of length {}",
            field.len()
        )));
    }
    if max_spans == 0 {
        return Err(LtriError::config("max spans per block must be at least 1"));
    }
    let rescore = |s: usize, e: usize| Span::new(s, e, field.score_unchecked(s, e));

    let mut ordered: Vec<Span> = kept
        .iter()
        .filter_map(|s| {
            let (s0, e0) = (s.start.max(lo), s.end.min(hi));
            (s0 <= e0).then(|| if (s0, e0) == (s.start, s.end) { *s } else { rescore(s0, e0) })
        })
        .collect();
    ordered.sort_by(nms_order);

    let mut accepted: Vec<Span> = Vec::new();
    for cand in ordered {
        let mut taken: Vec<(usize, usize)> = accepted
            .iter()
            .filter(|a| a.overlaps(cand.start, cand.end))
            .map(|a| (a.start, a.end))
            .collect();
        if taken.is_empty() {
            accepted.push(cand);
            continue;
        }
        taken.sort_unstable();
        let mut best: Option<(usize, usize)> = None;
        let mut cursor = cand.start;
        let consider = |s: usize, e: usize, best: &mut Option<(usize, usize)>| {
            if s <= e && best.is_none_or(|(bs, be)| e - s > be - bs) {
                *best = Some((s, e));
            }
        };
        for (ts, te) in taken {
            if ts > cursor {
                consider(cursor, ts - 1, &mut best);
            }
            cursor = cursor.max(te + 1);
        }
        if cursor <= cand.end {
            consider(cursor, cand.end, &mut best);
        }
        if let Some((s, e)) = best {
            accepted.push(rescore(s, e));
        }
    }
    accepted.sort_by_key(|s| s.start);

    let mut spans = Vec::with_capacity(accepted.len() * 2 + 1);
    let mut next = lo;
    for s in accepted {
        if s.start > next {
            spans.push(rescore(next, s.start - 1));
        }
        next = s.end + 1;
        spans.push(s);
    }
    if next <= hi {
        spans.push(rescore(next, hi));
    }

    while spans.len() > max_spans {
        let worst = spans
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| a.score.total_cmp(&b.score).then(a.start.cmp(&b.start)))
            .map(|(i, _)| i)
            .expect("non-empty");
        let (left, right) = if worst == 0 { (0, 1) } else { (worst - 1, worst) };
        let keep = if worst == left { spans[right].score } else { spans[left].score };
        spans[left] = Span::new(spans[left].start, spans[right].end, keep);
        spans.remove(right);
    }

    Ok(SpanPartition { block_id: 0, spans })
}

/// Per-layer tuned θ quantile and NMS threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPreset {
    pub theta_quantile: f64,
    pub iou_threshold: f64,
}

impl Default for ThresholdPreset {
    fn default() -> Self {
        ThresholdPreset {
            theta_quantile: DEFAULT_THETA_QUANTILE,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
        }
    }
}

/// Layer index → preset. Serialized as a JSON object keyed by layer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PresetTable(pub BTreeMap<usize, ThresholdPreset>);

const LLAMA3_PRESETS: &str = include_str!("../presets/llama3_8b_instruct_262k.json");

impl PresetTable {
    /// Random-search results for a 32-layer, 262K-context Llama-3-8B-Instruct.
    pub fn llama3_8b_instruct_262k() -> Self {
        serde_json::from_str(LLAMA3_PRESETS).expect("bundled preset table parses")
    }

    /// Looks up a bundled table by key.
    pub fn builtin(key: &str) -> Result<Self> {
        match key {
            "llama3-8b-instruct-262k" => Ok(Self::llama3_8b_instruct_262k()),
            other => Err(LtriError::config(format!("unknown preset table '{other}'"))),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn get(&self, layer: usize) -> Option<ThresholdPreset> {
        self.0.get(&layer).copied()
    }
}

/// Span division settings for one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivisionParams {
    pub theta: Threshold,
    pub iou_threshold: f64,
    pub max_spans: usize,
}

impl Default for DivisionParams {
    fn default() -> Self {
        DivisionParams {
            theta: Threshold::Percentile(DEFAULT_THETA_QUANTILE),
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            max_spans: 4,
        }
    }
}

/// Result of dividing one square tile.
#[derive(Debug, Clone)]
pub struct Division {
    pub field: TaScoreField,
    pub survivors: Vec<Span>,
    pub partition: SpanPartition,
}

/// Full division pipeline over a square tile covering one block.
pub fn divide_tile(tile: &AttentionTile, params: &DivisionParams) -> Result<Division> {
    let theta = params.theta.resolve(tile)?;
    let field = TaScoreField::new(tile, theta)?;
    let range = (0, field.len() - 1);
    let candidates = generate_candidates(&field, range)?;
    let survivors = nms(&candidates, params.iou_threshold);
    let partition = complete_partition(&survivors, range, params.max_spans, &field)?;
    Ok(Division {
        field,
        survivors,
        partition,
    })
}

/// A square block tile with ground-truth evidence intervals (tile-relative,
/// inclusive).
#[derive(Debug, Clone)]
pub struct LabeledBlock {
    pub tile: AttentionTile,
    pub evidence: Vec<(usize, usize)>,
}

/// Span/evidence agreement counts; survivors are the predicted spans.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct OverlapCounts {
    pub predicted: usize,
    pub true_positive: usize,
    pub evidence: usize,
    pub evidence_hit: usize,
}

impl OverlapCounts {
    pub fn add(&mut self, other: OverlapCounts) {
        self.predicted += other.predicted;
        self.true_positive += other.true_positive;
        self.evidence += other.evidence;
        self.evidence_hit += other.evidence_hit;
    }

    pub fn f1(&self) -> f64 {
        if self.predicted == 0 || self.evidence == 0 {
            return 0.0;
        }
        let p = self.true_positive as f64 / self.predicted as f64;
        let r = self.evidence_hit as f64 / self.evidence as f64;
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

/// A predicted span counts as a true positive when it shares at least one
/// token with an evidence interval; an evidence interval is recalled when
/// some predicted span touches it.
pub fn overlap_counts(predicted: &[Span], evidence: &[(usize, usize)]) -> OverlapCounts {
    OverlapCounts {
        predicted: predicted.len(),
        true_positive: predicted
            .iter()
            .filter(|s| evidence.iter().any(|&(a, b)| s.overlaps(a, b)))
            .count(),
        evidence: evidence.len(),
        evidence_hit: evidence
            .iter()
            .filter(|&&(a, b)| predicted.iter().any(|s| s.overlaps(a, b)))
            .count(),
    }
}

/// Outcome of [`tune_thresholds`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub layer: usize,
    pub theta_quantile: f64,
    pub iou_threshold: f64,
    pub f1: f64,
}

struct PreparedBlock<'a> {
    field: TaScoreField,
    sorted_nonzero: Vec<f64>,
    evidence: &'a [(usize, usize)],
}

fn prepare(blocks: &[LabeledBlock], layer: usize) -> Result<Vec<PreparedBlock<'_>>> {
    blocks
        .iter()
        .filter(|b| b.tile.layer() == layer)
        .map(|b| {
            let mut sorted: Vec<f64> = b
                .tile
                .values()
                .iter()
                .filter(|&&v| v > 0.0)
                .map(|&v| v as f64)
                .collect();
            sorted.sort_by(f64::total_cmp);
            Ok(PreparedBlock {
                field: TaScoreField::new(&b.tile, 0.0)?,
                sorted_nonzero: sorted,
                evidence: &b.evidence,
            })
        })
        .collect()
}

fn evaluate_prepared(blocks: &[PreparedBlock<'_>], theta_q: f64, phi: f64) -> Result<f64> {
    let mut counts = OverlapCounts::default();
    for b in blocks {
        let theta = quantile_sorted(&b.sorted_nonzero, theta_q).clamp(0.0, 1.0 - f64::EPSILON);
        let field = b.field.clone().with_theta(theta)?;
        let candidates = generate_candidates(&field, (0, field.len() - 1))?;
        let survivors = nms(&candidates, phi);
        counts.add(overlap_counts(&survivors, b.evidence));
    }
    Ok(counts.f1())
}

/// F1 of NMS survivors against evidence for one (θ quantile, φ) pair.
pub fn evaluate_thresholds(blocks: &[LabeledBlock], layer: usize, theta_quantile: f64, phi: f64) -> Result<f64> {
    let prepared = prepare(blocks, layer)?;
    evaluate_prepared(&prepared, theta_quantile, phi)
}

/// Uniform random search over θ quantile ∈ (0.0001, 0.95) and φ ∈ (0.01, 0.95)
/// maximizing survivor/evidence F1 on `layer`'s blocks. The first sampled
/// pair wins ties.
pub fn tune_thresholds(blocks: &[LabeledBlock], layer: usize, trials: usize, seed: u64) -> Result<TuneResult> {
    if trials == 0 {
        return Err(LtriError::config("tuning needs at least one trial"));
    }
    let prepared = prepare(blocks, layer)?;
    if prepared.is_empty() {
        return Err(LtriError::config(format!("no labeled blocks for layer {layer}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<TuneResult> = None;
    for _ in 0..trials {
        let theta_q = rng.random_range(0.0001..0.95);
        let phi = rng.random_range(0.01..0.95);
        let f1 = evaluate_prepared(&prepared, theta_q, phi)?;
        if best.is_none_or(|b| f1 > b.f1) {
            best = Some(TuneResult {
                layer,
                theta_quantile: theta_q,
                iou_threshold: phi,
                f1,
            });
        }
    }
    Ok(best.expect("trials >= 1"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tri_attention::build_tile;

    fn sp(s: usize, e: usize, score: f64) -> Span {
        Span::new(s, e, score)
    }

    /// Block-diagonal logits: strong attention inside each planted interval.
    fn planted_tile(n: usize, spans: &[(usize, usize)], strength: f32) -> AttentionTile {
        let mut raw = vec![0.0f32; n * n];
        for &(s, e) in spans {
            for i in s..=e {
                for j in s..=i {
                    raw[i * n + j] = strength;
                }
            }
        }
        build_tile(1, n, &raw, true).unwrap()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&sp(0, 9, 1.0), &sp(0, 9, 1.0)), 1.0);
        assert_eq!(iou(&sp(0, 9, 1.0), &sp(10, 19, 1.0)), 0.0);
        assert!((iou(&sp(0, 9, 1.0), &sp(5, 14, 1.0)) - 25.0 / 175.0).abs() < 1e-12);
        assert!((iou(&sp(0, 9, 1.0), &sp(0, 8, 1.0)) - 0.81).abs() < 1e-12);
    }

    #[test]
    fn nms_examples() {
        let cands = [sp(0, 9, 5.0), sp(0, 8, 4.0), sp(20, 29, 3.0)];
        assert_eq!(nms(&cands, 0.1), vec![sp(0, 9, 5.0), sp(20, 29, 3.0)]);
        assert_eq!(nms(&[sp(3, 4, 1.0)], 0.1), vec![sp(3, 4, 1.0)]);
        assert!(nms(&[], 0.1).is_empty());
        // nested, distinct spans survive a permissive threshold
        let nested = [sp(0, 19, 3.0), sp(2, 17, 2.0), sp(5, 12, 1.0)];
        assert_eq!(nms(&nested, 0.99).len(), 3);
    }

    #[test]
    fn candidates_bounded_by_antidiagonals() {
        let tile = planted_tile(128, &[(0, 19), (20, 50), (51, 127)], 5.0);
        let field = TaScoreField::new(&tile, 0.0).unwrap();
        let c = generate_candidates(&field, (0, 127)).unwrap();
        assert!(c.len() <= 255);
        assert!(matches!(generate_candidates(&field, (5, 4)), Err(LtriError::Index(_))));
    }

    #[test]
    fn planted_triangle_is_diagonal_argmax() {
        let n = 128;
        let tile = planted_tile(n, &[(20, 50)], 6.0);
        let field = TaScoreField::new(&tile, 0.02).unwrap();
        let c = generate_candidates(&field, (0, n - 1)).unwrap();
        let on70 = c.iter().find(|s| s.anti_diagonal() == 70).expect("candidate on diagonal 70");
        // exhaustive maximum along the anti-diagonal
        let best = (0..=35)
            .filter(|&x| 70 - x < n)
            .map(|x| (x, field.score(x, 70 - x).unwrap()))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .unwrap();
        assert_eq!(on70.start, best.0);
        assert_eq!((on70.start, on70.end), (20, 50));
    }

    #[test]
    fn saturated_threshold_gives_no_candidates() {
        let tile = planted_tile(16, &[(0, 15)], 0.0);
        let field = TaScoreField::new(&tile, 0.999).unwrap();
        // row 0 attends only to itself, so (0, 0) alone clears the threshold
        assert!(generate_candidates(&field, (1, 15)).unwrap().is_empty());
    }

    #[test]
    fn partition_fills_gaps() {
        let tile = planted_tile(128, &[(20, 50)], 4.0);
        let field = TaScoreField::new(&tile, 0.01).unwrap();
        let p = complete_partition(&[sp(20, 50, 9.0)], (0, 127), 4, &field).unwrap();
        let bounds: Vec<_> = p.spans.iter().map(|s| (s.start, s.end)).collect();
        assert_eq!(bounds, vec![(0, 19), (20, 50), (51, 127)]);
        assert!((p.spans[0].score - field.score(0, 19).unwrap()).abs() < 1e-12);

        let p = complete_partition(&[], (0, 127), 4, &field).unwrap();
        assert_eq!(p.spans.len(), 1);
        assert_eq!((p.spans[0].start, p.spans[0].end), (0, 127));
    }

    #[test]
    fn partition_merges_down_to_limit() {
        let tile = planted_tile(128, &[], 0.0);
        let field = TaScoreField::new(&tile, 0.0).unwrap();
        let kept: Vec<Span> = (0..7).map(|k| sp(k * 18, k * 18 + 10, 1.0 + k as f64)).collect();
        let p = complete_partition(&kept, (0, 127), 4, &field).unwrap();
        assert_eq!(p.spans.len(), 4);
        assert!(p.is_valid_for((0, 127), 4));
    }

    #[test]
    fn merge_keeps_neighbor_score() {
        let tile = planted_tile(128, &[], 0.0);
        let field = TaScoreField::new(&tile, 0.5).unwrap();
        let kept = [sp(10, 40, 9.0), sp(60, 90, 8.0), sp(100, 127, 7.0)];
        let p = complete_partition(&kept, (0, 127), 3, &field).unwrap();
        let bounds: Vec<_> = p.spans.iter().map(|s| (s.start, s.end, s.score)).collect();
        // fillers [0,9], [41,59], [91,99] score below every survivor
        assert_eq!(bounds, vec![(0, 59, 9.0), (60, 99, 8.0), (100, 127, 7.0)]);
    }

    #[test]
    fn survivor_count_not_monotone_in_phi() {
        // a survivor admitted at the looser threshold suppresses two spans
        // that the stricter threshold would have kept
        let c = [sp(14, 20, 4.0), sp(6, 20, 3.0), sp(9, 16, 2.0), sp(8, 31, 1.0)];
        assert_eq!(nms(&c, 0.20).len(), 3);
        assert_eq!(nms(&c, 0.24).len(), 2);
        assert_eq!(nms(&c, 0.30).len(), 4);
    }

    #[test]
    fn overlapping_survivors_truncated() {
        let tile = planted_tile(64, &[], 0.0);
        let field = TaScoreField::new(&tile, 0.0).unwrap();
        let kept = [sp(10, 30, 5.0), sp(25, 40, 4.0), sp(0, 63, 1.0)];
        let p = complete_partition(&kept, (0, 63), 8, &field).unwrap();
        assert!(p.is_valid_for((0, 63), 8));
        assert!(p.spans.iter().any(|s| (s.start, s.end) == (10, 30)));
        assert!(p.spans.iter().any(|s| (s.start, s.end) == (31, 40)));
    }

    #[test]
    fn divide_planted_block() {
        let tile = planted_tile(128, &[(0, 31), (32, 63), (64, 95), (96, 127)], 6.0);
        let d = divide_tile(&tile, &DivisionParams::default()).unwrap();
        assert!(d.partition.is_valid_for((0, 127), 4));
        assert!(!d.survivors.is_empty());
    }

    #[test]
    fn presets_load() {
        let t = PresetTable::llama3_8b_instruct_262k();
        assert_eq!(t.0.len(), 32);
        let l0 = t.get(0).unwrap();
        assert_eq!(l0.theta_quantile, 0.9311282274784112);
        assert_eq!(l0.iou_threshold, 0.032575607787946555);
        assert_eq!(t.get(31).unwrap().iou_threshold, 0.89644860502407);
        assert!(PresetTable::builtin("nope").is_err());
        let defaults = ThresholdPreset::default();
        assert_eq!((defaults.theta_quantile, defaults.iou_threshold), (0.9, 0.1));
    }

    #[test]
    fn tune_single_trial_returns_sample() {
        let tile = planted_tile(64, &[(10, 30)], 5.0);
        let blocks = vec![LabeledBlock {
            tile,
            evidence: vec![(10, 30)],
        }];
        let r = tune_thresholds(&blocks, 0, 1, 42).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let t: f64 = rng.random_range(0.0001..0.95);
        let p: f64 = rng.random_range(0.01..0.95);
        assert_eq!((r.theta_quantile, r.iou_threshold), (t, p));
        assert!(matches!(tune_thresholds(&[], 0, 5, 1), Err(LtriError::Config(_))));
        assert!(matches!(tune_thresholds(&blocks, 0, 0, 1), Err(LtriError::Config(_))));
    }

    /// Quadratic greedy NMS against every kept span.
    fn naive_nms(cands: &[Span], phi: f64) -> Vec<Span> {
        let mut order = cands.to_vec();
        order.sort_by(nms_order);
        let mut kept: Vec<Span> = Vec::new();
        for c in order {
            if kept.iter().all(|k| iou(k, &c) <= phi) {
                kept.push(c);
            }
        }
        kept.sort_by(|a, b| a.start.cmp(&b.start).then(a.end.cmp(&b.end)));
        kept
    }

    fn arb_spans() -> impl Strategy<Value = Vec<Span>> {
        prop::collection::vec((0usize..200, 0usize..60, -5i32..50), 0..80).prop_map(|v| {
            v.into_iter()
                .map(|(s, l, sc)| Span::new(s, s + l, sc as f64 * 0.25))
                .collect()
        })
    }

    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest, Strategy};

    proptest! {
        #[test]
        fn windowed_nms_matches_naive(cands in arb_spans(), phi in 0.0f64..1.0) {
            prop_assert_eq!(nms(&cands, phi), naive_nms(&cands, phi));
        }

        #[test]
        fn survivors_pairwise_below_phi(cands in arb_spans(), phi in 0.0f64..1.0) {
            let kept = nms(&cands, phi);
            for (i, a) in kept.iter().enumerate() {
                for b in &kept[i + 1..] {
                    prop_assert!(iou(a, b) <= phi);
                }
            }
        }

        #[test]
        fn iou_symmetric_and_bounded(a in (0usize..100, 0usize..50), b in (0usize..100, 0usize..50)) {
            let a = Span::new(a.0, a.0 + a.1, 0.0);
            let b = Span::new(b.0, b.0 + b.1, 0.0);
            let v = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&b, &a));
        }

        #[test]
        fn partition_is_exact_cover(
            n in 8usize..48,
            max_spans in 1usize..8,
            raw in prop::collection::vec(-3.0f32..3.0, 48 * 48),
            theta in 0.0f64..0.3,
            phi in 0.0f64..1.0,
        ) {
            let tile = build_tile(1, n, &raw[..n * n], true).unwrap();
            let field = TaScoreField::new(&tile, theta).unwrap();
            let range = (0, n - 1);
            let kept = nms(&generate_candidates(&field, range).unwrap(), phi);
            let p = complete_partition(&kept, range, max_spans, &field).unwrap();
            prop_assert!(p.is_valid_for(range, max_spans));
            // merges keep a constituent's score, so some sub-interval carries it
            for s in &p.spans {
                let carried = (s.start..=s.end).any(|a| {
                    (a..=s.end).any(|b| (s.score - field.score(a, b).unwrap()).abs() < 1e-9)
                });
                prop_assert!(carried);
            }
        }

        #[test]
        fn nms_is_idempotent_and_loose_phi_keeps_all(
            raw in prop::collection::vec((0usize..200, 0usize..40, 0.0f64..10.0), 0..80),
            phi in 0.0f64..1.0,
        ) {
            let c: Vec<Span> = raw.iter().map(|&(s, l, sc)| Span::new(s, s + l, sc)).collect();
            let kept = nms(&c, phi);
            prop_assert_eq!(nms(&kept, phi), kept.clone());
            prop_assert_eq!(nms(&c, 1.0).len(), c.len());
        }

        #[test]
        fn candidates_one_per_diagonal(
            n in 4usize..40,
            raw in prop::collection::vec(-3.0f32..3.0, 40 * 40),
            theta in 0.0f64..0.5,
        ) {
            let tile = build_tile(1, n, &raw[..n * n], true).unwrap();
            let field = TaScoreField::new(&tile, theta).unwrap();
            let c = generate_candidates(&field, (0, n - 1)).unwrap();
            prop_assert!(c.len() < 2 * n);
            let mut diags: Vec<usize> = c.iter().map(|s| s.anti_diagonal()).collect();
            diags.dedup();
            prop_assert_eq!(diags.len(), c.len());
            for s in &c {
                prop_assert!(s.score > 0.0);
                let d = s.anti_diagonal();
                for x in d.saturating_sub(n - 1)..=d / 2 {
                    prop_assert!(field.score(x, d - x).unwrap() <= s.score);
                }
            }
        }
    }
}
