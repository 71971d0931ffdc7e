//! Synthetic needle-in-a-haystack traces.
//!
//! Tokens are grouped into planted spans whose members attend strongly to
//! each other, so span boundaries are known ground truth. One planted span
//! is the needle. On each layer's signal head, needle keys and the final
//! question queries share a direction `u`; background keys and queries only
//! graze it. Every (layer, token) draws from its own seeded RNG, so any
//! chunking of the stream yields identical data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{LtriError, Result};
use crate::retriever::RetrievalHead;
use crate::trace::{Needle, TokenChunk, TraceHeader, TraceSource};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NeedleSpec {
    /// Needle start as a fraction of the prefill length.
    pub position: f64,
    pub length: usize,
    /// Keep the needle inside one block-aligned block.
    pub within_block: bool,
    /// Cosine floor between needle keys and question queries.
    pub rho_hi: f64,
    /// Bound on background key/query cosines with the signal direction.
    pub rho_lo: f64,
}

impl Default for NeedleSpec {
    fn default() -> Self {
        NeedleSpec {
            position: 0.5,
            length: 24,
            within_block: true,
            rho_hi: 0.9,
            rho_lo: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceSpec {
    pub seed: u64,
    pub layers: usize,
    pub heads: usize,
    pub d: usize,
    pub prefill_tokens: usize,
    pub decode_steps: usize,
    pub block_size: usize,
    /// Initial tokens before the first block; aligns needle placement.
    pub l_init: usize,
    /// Local window the trace must exceed by at least one block.
    pub window_hint: usize,
    pub band: usize,
    pub span_min: usize,
    pub span_max: usize,
    /// Logit bonus for same-span attention.
    pub attention_strength: f64,
    pub attention_noise: f64,
    /// Trailing prefill tokens that carry the question.
    pub question_tokens: usize,
    /// Alignment of decode-step queries with the signal direction.
    pub decode_alignment: f64,
    pub needle: Option<NeedleSpec>,
    /// Heads carrying the signal, with the scores used as voting weights.
    pub signal_heads: Vec<RetrievalHead>,
}

/// Retrieval-head-like scores assigned to the synthetic signal heads.
const SIGNAL_SCORES: [f64; 4] = [0.49, 0.45, 0.90, 0.30];

impl Default for TraceSpec {
    fn default() -> Self {
        TraceSpec::desk(0)
    }
}

impl TraceSpec {
    /// 512 blocks of 128 tokens, 4 layers, 2 heads, d = 32.
    pub fn desk(seed: u64) -> Self {
        let layers = 4;
        let heads = 2;
        TraceSpec {
            seed,
            layers,
            heads,
            d: 32,
            prefill_tokens: 65_536,
            decode_steps: 16,
            block_size: 128,
            l_init: 128,
            window_hint: 4096,
            band: 64,
            span_min: 24,
            span_max: 48,
            attention_strength: 4.0,
            attention_noise: 1.0,
            question_tokens: 32,
            decode_alignment: 0.5,
            needle: Some(NeedleSpec::default()),
            signal_heads: default_signal_heads(layers, heads),
        }
    }

    pub fn total_tokens(&self) -> usize {
        self.prefill_tokens + self.decode_steps
    }

    pub fn header(&self) -> TraceHeader {
        TraceHeader {
            layers: self.layers,
            heads: self.heads,
            d: self.d,
            block_size: self.block_size,
            token_count: self.total_tokens(),
            prefill_tokens: self.prefill_tokens,
            band: self.band,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.d < 2 || self.block_size == 0 || self.band == 0 {
            return Err(LtriError::config("trace dimensions must be positive (d >= 2)"));
        }
        if self.span_min == 0 || self.span_min > self.span_max {
            return Err(LtriError::config("span length range invalid"));
        }
        if self.prefill_tokens < self.window_hint + self.block_size {
            return Err(LtriError::config(format!(
                "prefill of {} tokens does not exceed the {}-token window by a block",
                self.prefill_tokens, self.window_hint
            )));
        }
        if self.question_tokens == 0 || self.question_tokens > self.prefill_tokens / 2 {
            return Err(LtriError::config("question token count invalid"));
        }
        if !(0.0..=1.0).contains(&self.decode_alignment) {
            return Err(LtriError::config("decode alignment outside [0, 1]"));
        }
        for h in &self.signal_heads {
            if h.layer >= self.layers || h.head >= self.heads {
                return Err(LtriError::config(format!(
                    "signal head ({}, {}) outside {} layers x {} heads",
                    h.layer, h.head, self.layers, self.heads
                )));
            }
        }
        if let Some(n) = &self.needle {
            if !(0.0..=1.0).contains(&n.position) {
                return Err(LtriError::config("needle position outside [0, 1]"));
            }
            if !(0.0 < n.rho_hi && n.rho_hi <= 1.0 && 0.0 <= n.rho_lo && n.rho_lo < n.rho_hi) {
                return Err(LtriError::config(format!(
                    "need 0 <= rho_lo < rho_hi <= 1, got {} and {}",
                    n.rho_lo, n.rho_hi
                )));
            }
            if n.length == 0 {
                return Err(LtriError::config("needle length must be positive"));
            }
            if n.within_block && n.length > self.block_size {
                return Err(LtriError::config(format!(
                    "needle of {} tokens cannot fit in a {}-token block",
                    n.length, self.block_size
                )));
            }
            if self.l_init + n.length + self.question_tokens > self.prefill_tokens {
                return Err(LtriError::config("needle does not fit before the question"));
            }
        }
        Ok(())
    }
}

/// One signal head per layer, alternating heads.
pub fn default_signal_heads(layers: usize, heads: usize) -> Vec<RetrievalHead> {
    (0..layers)
        .map(|layer| RetrievalHead {
            layer,
            head: layer % heads,
            score: SIGNAL_SCORES[layer % SIGNAL_SCORES.len()],
        })
        .collect()
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ a) ^ b)
}

const STREAM_LAYOUT: u64 = u64::MAX;
const STREAM_DIRECTION: u64 = u64::MAX - 1;

/// Planted span boundaries and needle placement for a spec.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanLayout {
    /// Inclusive planted spans covering every token in order.
    pub spans: Vec<(usize, usize)>,
    span_of: Vec<u32>,
    pub needle: Option<Needle>,
    pub needle_span: Option<usize>,
    pub question: (usize, usize),
}

impl SpanLayout {
    pub fn new(spec: &TraceSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, STREAM_LAYOUT, 0));
        let total = spec.total_tokens();
        let q_start = spec.prefill_tokens - spec.question_tokens;
        let question = (q_start, spec.prefill_tokens - 1);

        let needle = spec.needle.as_ref().map(|n| {
            let latest = q_start - n.length;
            let target = ((n.position * spec.prefill_tokens as f64) as usize).clamp(spec.l_init, latest);
            let start = if n.within_block {
                let b = (target - spec.l_init) / spec.block_size;
                let block_start = spec.l_init + b * spec.block_size;
                let slack = spec.block_size - n.length;
                (block_start + rng.random_range(0..=slack)).min(latest)
            } else {
                target
            };
            Needle {
                start,
                end: start + n.length - 1,
            }
        });

        // fixed spans, in order; gaps between them get random spans
        let mut fixed: Vec<(usize, usize)> = Vec::new();
        if let Some(n) = needle {
            fixed.push((n.start, n.end));
        }
        fixed.push(question);
        let mut spans = Vec::new();
        let mut cursor = 0usize;
        let fill = |from: usize, to: usize, spans: &mut Vec<(usize, usize)>, rng: &mut ChaCha8Rng| {
            let mut s = from;
            while s < to {
                let len = rng.random_range(spec.span_min..=spec.span_max);
                let e = (s + len).min(to);
                spans.push((s, e - 1));
                s = e;
            }
        };
        for &(s, e) in &fixed {
            fill(cursor, s, &mut spans, &mut rng);
            spans.push((s, e));
            cursor = e + 1;
        }
        fill(cursor, total, &mut spans, &mut rng);

        let mut span_of = vec![0u32; total];
        for (k, &(s, e)) in spans.iter().enumerate() {
            for slot in &mut span_of[s..=e] {
                *slot = k as u32;
            }
        }
        let needle_span = needle.map(|n| span_of[n.start] as usize);
        Ok(SpanLayout {
            spans,
            span_of,
            needle,
            needle_span,
            question,
        })
    }

    #[inline]
    pub fn span_of(&self, token: usize) -> usize {
        self.span_of[token] as usize
    }

    pub fn is_needle(&self, token: usize) -> bool {
        self.needle.is_some_and(|n| n.start <= token && token <= n.end)
    }

    pub fn is_question(&self, token: usize) -> bool {
        self.question.0 <= token && token <= self.question.1
    }
}

/// Data of one (layer, token).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenData {
    /// `[head][band]`
    pub attention: Vec<f32>,
    /// `[head][d]`
    pub keys: Vec<f32>,
    /// `[head][d]`
    pub queries: Vec<f32>,
}

/// Lazily generated synthetic trace.
#[derive(Debug, Clone)]
pub struct SyntheticTrace {
    spec: TraceSpec,
    header: TraceHeader,
    layout: SpanLayout,
    needles: Vec<Needle>,
    // per layer: unit signal direction and signal head
    directions: Vec<Vec<f64>>,
    signal_head: Vec<Option<usize>>,
    alpha: f64,
    position: usize,
}

impl SyntheticTrace {
    pub fn new(spec: TraceSpec) -> Result<Self> {
        let layout = SpanLayout::new(&spec)?;
        let mut directions = Vec::with_capacity(spec.layers);
        for l in 0..spec.layers {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, STREAM_DIRECTION, l as u64));
            directions.push(unit_gaussian(&mut rng, spec.d));
        }
        let mut signal_head = vec![None; spec.layers];
        for h in &spec.signal_heads {
            signal_head[h.layer] = Some(h.head);
        }
        // needle/question components along u: cos = alpha^2 = (1 + rho_hi) / 2
        let alpha = spec.needle.as_ref().map_or(1.0, |n| ((1.0 + n.rho_hi) / 2.0).sqrt());
        let trace = SyntheticTrace {
            header: spec.header(),
            needles: layout.needle.into_iter().collect(),
            layout,
            spec,
            directions,
            signal_head,
            alpha,
            position: 0,
        };
        trace.geometry_gate()?;
        Ok(trace)
    }

    pub fn spec(&self) -> &TraceSpec {
        &self.spec
    }

    pub fn layout(&self) -> &SpanLayout {
        &self.layout
    }

    pub fn direction(&self, layer: usize) -> &[f64] {
        &self.directions[layer]
    }

    /// Generates the data of one (layer, token).
    pub fn token(&self, layer: usize, t: usize) -> TokenData {
        let s = &self.spec;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(s.seed, layer as u64, t as u64));
        let my_span = self.layout.span_of(t);
        let visible = (t + 1).min(s.band);

        let mut attention = vec![0.0f32; s.heads * s.band];
        let mut logits = vec![0.0f64; visible];
        for h in 0..s.heads {
            for (k, l) in logits.iter_mut().enumerate() {
                let noise: f64 = StandardNormal.sample(&mut rng);
                let same = self.layout.span_of(t - k) == my_span;
                *l = s.attention_noise * noise + if same { s.attention_strength } else { 0.0 };
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            for (k, l) in logits.iter().enumerate() {
                attention[h * s.band + k] = ((l - max).exp() / z) as f32;
            }
        }

        let mut keys = Vec::with_capacity(s.heads * s.d);
        let mut queries = Vec::with_capacity(s.heads * s.d);
        let u = &self.directions[layer];
        let rho_lo = s.needle.as_ref().map_or(0.0, |n| n.rho_lo);
        for h in 0..s.heads {
            if self.signal_head[layer] == Some(h) {
                let key_c = if self.layout.is_needle(t) {
                    self.alpha
                } else {
                    rng.random_range(-rho_lo..=rho_lo)
                };
                let query_c = if t >= s.prefill_tokens {
                    s.decode_alignment
                } else if self.layout.is_question(t) && s.needle.is_some() {
                    self.alpha
                } else {
                    rng.random_range(-rho_lo..=rho_lo)
                };
                keys.extend(along(&mut rng, u, key_c));
                queries.extend(along(&mut rng, u, query_c));
            } else {
                keys.extend(unit_gaussian(&mut rng, s.d).into_iter().map(|v| v as f32));
                queries.extend(unit_gaussian(&mut rng, s.d).into_iter().map(|v| v as f32));
            }
        }
        TokenData {
            attention,
            keys,
            queries,
        }
    }

    /// Checks realized needle/question cosines on every signal head against
    /// the construction; fails the generation on a gross deviation.
    pub fn geometry_report(&self) -> Vec<GeometryStats> {
        let Some(needle) = self.layout.needle else {
            return Vec::new();
        };
        let Some(nspec) = self.spec.needle.as_ref() else {
            return Vec::new();
        };
        let d = self.spec.d;
        let (q0, q1) = self.layout.question;
        let mut out = Vec::new();
        for layer in 0..self.spec.layers {
            let Some(h) = self.signal_head[layer] else { continue };
            let slice = |v: &[f32]| v[h * d..(h + 1) * d].iter().map(|&x| x as f64).collect::<Vec<f64>>();
            let queries: Vec<Vec<f64>> = (q0..=q1).map(|t| slice(&self.token(layer, t).queries)).collect();
            let keys: Vec<Vec<f64>> = (needle.start..=needle.end).map(|t| slice(&self.token(layer, t).keys)).collect();
            let stride = (self.spec.prefill_tokens / 512).max(1);
            let background: Vec<Vec<f64>> = (0..q0)
                .step_by(stride)
                .filter(|&t| !self.layout.is_needle(t))
                .map(|t| slice(&self.token(layer, t).keys))
                .collect();

            let pair_stats = |ks: &[Vec<f64>]| {
                let mut sum = 0.0;
                let mut abs = 0.0;
                let mut min = f64::INFINITY;
                for k in ks {
                    for q in &queries {
                        let c = cosine(k, q);
                        sum += c;
                        abs += c.abs();
                        min = min.min(c);
                    }
                }
                let n = (ks.len() * queries.len()) as f64;
                (sum / n, abs / n, min)
            };
            let (needle_mean, _, needle_min) = pair_stats(&keys);
            let (bg_mean, bg_mean_abs, _) = pair_stats(&background);
            let expected = self.alpha * self.alpha;
            // per-pair spread of the orthogonal cross term; queries are
            // treated as one shared sample, which overstates the error
            let sigma = (1.0 - expected) / ((d - 1) as f64).sqrt() / (keys.len() as f64).sqrt();
            let passed = (needle_mean - expected).abs() <= 3.0 * sigma + 1e-12
                && needle_mean >= nspec.rho_hi
                && bg_mean_abs <= nspec.rho_lo;
            out.push(GeometryStats {
                layer,
                head: h,
                expected_needle_cos: expected,
                needle_mean_cos: needle_mean,
                needle_min_cos: needle_min,
                sigma,
                background_mean_cos: bg_mean,
                background_mean_abs_cos: bg_mean_abs,
                passed,
            });
        }
        out
    }

    fn geometry_gate(&self) -> Result<()> {
        if let Some(bad) = self.geometry_report().into_iter().find(|g| !g.passed) {
            return Err(LtriError::internal(format!(
                "geometry gate failed on layer {}: needle cos {:.4} (expected {:.4} +- {:.4}), background |cos| {:.4}",
                bad.layer,
                bad.needle_mean_cos,
                bad.expected_needle_cos,
                3.0 * bad.sigma,
                bad.background_mean_abs_cos
            )));
        }
        Ok(())
    }
}

/// Realized cosine statistics of one signal head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometryStats {
    pub layer: usize,
    pub head: usize,
    pub expected_needle_cos: f64,
    pub needle_mean_cos: f64,
    pub needle_min_cos: f64,
    pub sigma: f64,
    pub background_mean_cos: f64,
    pub background_mean_abs_cos: f64,
    pub passed: bool,
}

fn unit_gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut *rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Unit vector with cosine `c` to the unit vector `u`.
fn along(rng: &mut ChaCha8Rng, u: &[f64], c: f64) -> Vec<f32> {
    let d = u.len();
    let perp = loop {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut *rng)).collect();
        let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
        for (x, ui) in v.iter_mut().zip(u) {
            *x -= p * ui;
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            break v.into_iter().map(|x| x / n).collect::<Vec<f64>>();
        }
    };
    let s = (1.0 - c * c).max(0.0).sqrt();
    u.iter().zip(&perp).map(|(a, b)| (c * a + s * b) as f32).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

impl TraceSource for SyntheticTrace {
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
        let total = self.spec.total_tokens();
        if self.position >= total {
            return Ok(None);
        }
        let end = (self.position + len).min(total);
        let mut chunk = TokenChunk::empty(self.position, self.spec.layers);
        chunk.len = end - self.position;
        for l in 0..self.spec.layers {
            for t in self.position..end {
                let data = self.token(l, t);
                chunk.attention[l].extend_from_slice(&data.attention);
                chunk.keys[l].extend_from_slice(&data.keys);
                chunk.queries[l].extend_from_slice(&data.queries);
            }
        }
        self.position = end;
        Ok(Some(chunk))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> TraceSpec {
        TraceSpec {
            prefill_tokens: 1024,
            decode_steps: 4,
            window_hint: 512,
            ..TraceSpec::desk(seed)
        }
    }

    #[test]
    fn chunking_does_not_change_data() {
        let mut a = SyntheticTrace::new(small(3)).unwrap();
        let mut b = SyntheticTrace::new(small(3)).unwrap();
        let h = *a.header();
        let whole = a.next_chunk(2000).unwrap().unwrap();
        let mut pieces = b.next_chunk(100).unwrap().unwrap();
        while let Some(c) = b.next_chunk(333).unwrap() {
            pieces.append(c).unwrap();
        }
        assert_eq!(whole, pieces);
        assert_eq!(whole.len, 1028);
        whole.validate(&h).unwrap();
    }

    #[test]
    fn needle_within_block() {
        for seed in 0..20 {
            let spec = small(seed);
            let layout = SpanLayout::new(&spec).unwrap();
            let n = layout.needle.unwrap();
            let b0 = (n.start - spec.l_init) / spec.block_size;
            let b1 = (n.end - spec.l_init) / spec.block_size;
            assert_eq!(b0, b1);
            assert_eq!(n.end - n.start + 1, 24);
            let s = layout.needle_span.unwrap();
            assert_eq!(layout.spans[s], (n.start, n.end));
        }
    }

    #[test]
    fn layout_covers_tokens() {
        let spec = small(9);
        let layout = SpanLayout::new(&spec).unwrap();
        let mut next = 0;
        for &(s, e) in &layout.spans {
            assert_eq!(s, next);
            assert!(e >= s && e - s < spec.span_max.max(spec.question_tokens).max(24));
            next = e + 1;
        }
        assert_eq!(next, spec.total_tokens());
    }

    #[test]
    fn infeasible_specs_rejected() {
        let mut spec = small(0);
        spec.needle = Some(NeedleSpec {
            length: 200,
            ..NeedleSpec::default()
        });
        assert!(matches!(SyntheticTrace::new(spec), Err(LtriError::Config(_))));
        let mut spec = small(0);
        spec.needle = Some(NeedleSpec {
            rho_hi: 0.2,
            rho_lo: 0.3,
            ..NeedleSpec::default()
        });
        assert!(matches!(SyntheticTrace::new(spec), Err(LtriError::Config(_))));
        let spec = TraceSpec {
            prefill_tokens: 1000,
            ..TraceSpec::desk(0)
        };
        assert!(matches!(SyntheticTrace::new(spec), Err(LtriError::Config(_))));
    }

    #[test]
    fn geometry_holds() {
        let t = SyntheticTrace::new(small(5)).unwrap();
        let report = t.geometry_report();
        assert_eq!(report.len(), 4);
        for g in report {
            assert!(g.passed);
            assert!(g.needle_min_cos >= 0.9, "{g:?}");
            assert!(g.background_mean_abs_cos <= 0.3);
        }
    }

    #[test]
    fn planted_attention_is_concentrated() {
        let t = SyntheticTrace::new(small(1)).unwrap();
        let n = t.layout().needle.unwrap();
        let row = t.token(0, n.end).attention;
        let inside: f32 = row[..24].iter().sum();
        assert!(inside > 0.9, "{inside}");
    }
}
