//! Block retrieval: span-level similarity, per-layer ranking, weighted
//! voting across retrieval heads, and forced evidence injection.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{LtriError, Result};
use crate::span_indexer::SpanIndex;

/// Default number of retrieved blocks.
pub const DEFAULT_TOP_K: usize = 16;
/// Heads scoring at or below this are not adopted.
pub const HEAD_ADOPTION_THRESHOLD: f64 = 0.1;

/// A head with its retrieval score, used as a voting weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHead {
    pub layer: usize,
    pub head: usize,
    pub score: f64,
}

/// Measured retrieval heads of a 32-layer Llama-3-8B-Instruct-262K.
pub const LLAMA3_RETRIEVAL_HEADS: [(usize, usize, f64); 14] = [
    (5, 8, 0.21),
    (8, 1, 0.49),
    (10, 14, 0.45),
    (13, 6, 0.15),
    (14, 18, 0.15),
    (15, 30, 0.90),
    (16, 1, 0.50),
    (17, 29, 0.12),
    (19, 3, 0.30),
    (20, 14, 0.44),
    (22, 14, 0.33),
    (24, 27, 0.46),
    (26, 15, 0.14),
    (27, 7, 0.30),
];

/// Keeps heads scoring above 0.1, at most one per layer (the best; lower
/// head index on ties), sorted by layer.
pub fn adopt_heads(candidates: &[RetrievalHead]) -> Vec<RetrievalHead> {
    let mut best: BTreeMap<usize, RetrievalHead> = BTreeMap::new();
    for h in candidates.iter().filter(|h| h.score > HEAD_ADOPTION_THRESHOLD) {
        match best.get(&h.layer) {
            Some(b) if b.score > h.score || (b.score == h.score && b.head <= h.head) => {}
            _ => {
                best.insert(h.layer, *h);
            }
        }
    }
    best.into_values().collect()
}

pub fn llama3_retrieval_heads() -> Vec<RetrievalHead> {
    adopt_heads(
        &LLAMA3_RETRIEVAL_HEADS
            .iter()
            .map(|&(layer, head, score)| RetrievalHead { layer, head, score })
            .collect::<Vec<_>>(),
    )
}

/// Sum of all pairwise dot products between the two vector sets, computed
/// as the dot product of their sums.
pub fn span_similarity(q: &SpanIndex, k: &SpanIndex) -> Result<f64> {
    if q.sum.len() != k.sum.len() {
        return Err(LtriError::trace(format!(
            "query dimension {} does not match key dimension {}",
            q.sum.len(),
            k.sum.len()
        )));
    }
    Ok(dot(&q.sum, &k.sum))
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Carries a block's retrieval score into the next step.
///
/// The decayed history is added to the fresh similarity:
/// `score <- score * (1 - decay) + fresh`.
#[inline]
pub fn decay_score(previous: f64, fresh: f64, decay: f64) -> f64 {
    previous * (1.0 - decay) + fresh
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedBlock {
    pub block: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VotedBlock {
    pub block: usize,
    pub weight: f64,
}

/// Memory-side index vectors of one block.
pub struct BlockIndexView<'a> {
    pub block: usize,
    pub spans: &'a [SpanIndex],
}

/// Fresh similarity of one block: per head, the best (memory span, query
/// span) pair; averaged over heads that have both sides.
pub fn block_similarity(memory: &[SpanIndex], queries: &[SpanIndex]) -> Result<f64> {
    let mut per_head: BTreeMap<usize, f64> = BTreeMap::new();
    for k in memory {
        for q in queries.iter().filter(|q| q.head == k.head) {
            let s = span_similarity(q, k)?;
            per_head
                .entry(k.head)
                .and_modify(|b| *b = b.max(s))
                .or_insert(s);
        }
    }
    if per_head.is_empty() {
        return Ok(0.0);
    }
    Ok(per_head.values().sum::<f64>() / per_head.len() as f64)
}

/// Descending by score, lower block id on ties.
pub fn sort_ranked(ranked: &mut [RankedBlock]) {
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.block.cmp(&b.block)));
}

/// Per-layer decayed retrieval scores across steps.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreBook {
    scores: BTreeMap<usize, f64>,
}

impl ScoreBook {
    pub fn get(&self, block: usize) -> f64 {
        self.scores.get(&block).copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Scores every memory block against the query spans, folds in decayed
/// history, and returns all blocks ranked.
pub fn rank_blocks<'a>(
    memory: impl IntoIterator<Item = BlockIndexView<'a>>,
    queries: &[SpanIndex],
    book: &mut ScoreBook,
    decay: f64,
) -> Result<Vec<RankedBlock>> {
    let mut ranked = Vec::new();
    for view in memory {
        let fresh = block_similarity(view.spans, queries)?;
        let score = decay_score(book.get(view.block), fresh, decay);
        book.scores.insert(view.block, score);
        ranked.push(RankedBlock {
            block: view.block,
            score,
        });
    }
    sort_ranked(&mut ranked);
    Ok(ranked)
}

/// Adds `weight` to every block of each layer's list and keeps the `k`
/// heaviest, heavier first and lower id on ties.
pub fn vote(per_layer: &[(f64, &[RankedBlock])], k: usize) -> Vec<VotedBlock> {
    let mut tally: BTreeMap<usize, f64> = BTreeMap::new();
    for (weight, blocks) in per_layer {
        for b in blocks.iter().take(k) {
            *tally.entry(b.block).or_insert(0.0) += weight;
        }
    }
    let mut voted: Vec<VotedBlock> = tally
        .into_iter()
        .map(|(block, weight)| VotedBlock { block, weight })
        .collect();
    voted.sort_by(|a, b| b.weight.total_cmp(&a.weight).then(a.block.cmp(&b.block)));
    voted.truncate(k);
    voted
}

/// Layer-by-layer votes: entry `i` tallies layers `0..=i` only.
pub fn progressive_vote(per_layer: &[(f64, &[RankedBlock])], k: usize) -> Vec<Vec<VotedBlock>> {
    (1..=per_layer.len()).map(|n| vote(&per_layer[..n], k)).collect()
}

/// Retrieval outcome of one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub step: usize,
    /// Top-K of each ranking layer.
    pub per_layer: BTreeMap<usize, Vec<RankedBlock>>,
    pub voted: Vec<VotedBlock>,
    pub persistent: bool,
}

impl RetrievalResult {
    pub fn voted_ids(&self) -> Vec<usize> {
        self.voted.iter().map(|v| v.block).collect()
    }
}

/// Forces `needles` into `set`, displacing the lightest non-needle blocks
/// to stay within `k`. Needles are never displaced, so more than `k`
/// needles yields more than `k` blocks. Injected blocks get `weight`.
pub fn inject_into(set: &mut Vec<VotedBlock>, needles: &[usize], k: usize, weight: f64) {
    for &n in needles {
        if !set.iter().any(|v| v.block == n) {
            set.push(VotedBlock { block: n, weight });
        }
    }
    set.sort_by(|a, b| b.weight.total_cmp(&a.weight).then(a.block.cmp(&b.block)));
    while set.len() > k {
        match set.iter().rposition(|v| !needles.contains(&v.block)) {
            Some(i) => {
                set.remove(i);
            }
            None => break,
        }
    }
}

/// [`inject_into`] on the voted set of a result.
pub fn inject_evidence(
    mut result: RetrievalResult,
    needle_blocks: &[usize],
    k: usize,
    weight: f64,
) -> Result<RetrievalResult> {
    if needle_blocks.is_empty() {
        return Err(LtriError::config("evidence injection needs needle annotations"));
    }
    inject_into(&mut result.voted, needle_blocks, k, weight);
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::span_divider::Span;
    use crate::span_indexer::VectorRows;

    fn index(vectors: &[Vec<f32>], head: usize) -> SpanIndex {
        let dim = vectors[0].len();
        let flat: Vec<f32> = vectors.iter().flatten().copied().collect();
        let rows = VectorRows::new(&flat, dim).unwrap();
        SpanIndex::from_tokens(Span::new(0, vectors.len() - 1, 0.0), (0..vectors.len()).collect(), &rows, 1.0)
            .with_head(head)
    }

    fn ranked(ids: &[usize]) -> Vec<RankedBlock> {
        ids.iter()
            .map(|&block| RankedBlock { block, score: 1.0 })
            .collect()
    }

    #[test]
    fn appendix_heads_adopted() {
        let heads = llama3_retrieval_heads();
        assert_eq!(heads.len(), 14);
        assert_eq!(heads[0], RetrievalHead { layer: 5, head: 8, score: 0.21 });
        assert!(heads.iter().all(|h| h.score > 0.1));
        let picked = adopt_heads(&[
            RetrievalHead { layer: 1, head: 0, score: 0.3 },
            RetrievalHead { layer: 1, head: 2, score: 0.6 },
            RetrievalHead { layer: 2, head: 0, score: 0.1 },
        ]);
        assert_eq!(picked, vec![RetrievalHead { layer: 1, head: 2, score: 0.6 }]);
    }

    #[test]
    fn similarity_examples() {
        let a = index(&[vec![1.0, 0.0]], 0);
        let b = index(&[vec![0.0, 1.0]], 0);
        assert_eq!(span_similarity(&a, &b).unwrap(), 0.0);
        let u = vec![0.0f32, 1.0];
        let q = index(&[u.clone(), u.clone(), u.clone()], 0);
        assert!((span_similarity(&q, &q).unwrap() - 9.0).abs() < 1e-9);
        let c = index(&[vec![1.0, 0.0, 0.0]], 0);
        assert!(matches!(span_similarity(&a, &c), Err(LtriError::InvalidTrace(_))));
    }

    #[test]
    fn ranking_and_ties() {
        let q = vec![index(&[vec![1.0, 0.0]], 0)];
        let zero = vec![index(&[vec![0.0, 0.0]], 0)];
        let hit = vec![index(&[vec![2.0, 0.0]], 0)];
        let views = vec![
            BlockIndexView { block: 3, spans: &zero },
            BlockIndexView { block: 7, spans: &hit },
            BlockIndexView { block: 1, spans: &zero },
        ];
        let mut book = ScoreBook::default();
        let r = rank_blocks(views, &q, &mut book, 0.1).unwrap();
        assert_eq!(r.iter().map(|b| b.block).collect::<Vec<_>>(), vec![7, 1, 3]);

        // second step: history decays before fresh similarity is added
        let views = vec![BlockIndexView { block: 7, spans: &hit }];
        let r = rank_blocks(views, &q, &mut book, 0.1).unwrap();
        assert!((r[0].score - (2.0 * 0.9 + 2.0)).abs() < 1e-12);
    }

    #[test]
    fn heads_averaged() {
        let mem = vec![index(&[vec![1.0]], 0), index(&[vec![3.0]], 1)];
        let q = vec![index(&[vec![1.0]], 0), index(&[vec![1.0]], 1)];
        assert_eq!(block_similarity(&mem, &q).unwrap(), 2.0);
    }

    #[test]
    fn voting() {
        let a = ranked(&[4, 5]);
        assert_eq!(
            vote(&[(0.5, &a)], 2).iter().map(|v| v.block).collect::<Vec<_>>(),
            vec![4, 5]
        );
        let x = ranked(&[1]);
        let y = ranked(&[2]);
        assert_eq!(vote(&[(0.1, &x), (0.9, &y)], 1)[0].block, 2);
        // equal weights: plurality, ties to lower id
        let l1 = ranked(&[1, 2]);
        let l2 = ranked(&[2, 3]);
        let v = vote(&[(1.0, &l1), (1.0, &l2)], 2);
        assert_eq!(v.iter().map(|v| v.block).collect::<Vec<_>>(), vec![2, 1]);
        let p = progressive_vote(&[(1.0, &l1), (1.0, &l2)], 2);
        assert_eq!(p[0].iter().map(|v| v.block).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(p[1], v);
    }

    #[test]
    fn injection() {
        let base = RetrievalResult {
            step: 0,
            per_layer: BTreeMap::new(),
            voted: vec![VotedBlock { block: 9, weight: 0.5 }],
            persistent: false,
        };
        let r = inject_evidence(base.clone(), &[4], 1, 1.0).unwrap();
        assert_eq!(r.voted_ids(), vec![4]);
        let r = inject_evidence(base.clone(), &[4], 2, 1.0).unwrap();
        assert_eq!(r.voted_ids(), vec![4, 9]);
        assert!(matches!(inject_evidence(base, &[], 2, 1.0), Err(LtriError::Config(_))));

        let mut set = vec![
            VotedBlock { block: 1, weight: 3.0 },
            VotedBlock { block: 2, weight: 2.0 },
            VotedBlock { block: 3, weight: 1.0 },
        ];
        inject_into(&mut set, &[3, 8], 3, 0.5);
        let mut ids: Vec<usize> = set.iter().map(|v| v.block).collect();
        ids.sort();
        assert_eq!(ids, vec![1, 3, 8]);
    }

    proptest::proptest! {
        #[test]
        fn similarity_matches_pairwise(
            n in 1usize..6,
            m in 1usize..6,
            data in proptest::collection::vec(-1.0f32..1.0, 80),
        ) {
            let d = 8;
            let qs: Vec<Vec<f32>> = (0..n).map(|i| data[i * d..(i + 1) * d].to_vec()).collect();
            let ks: Vec<Vec<f32>> = (0..m).map(|i| data[40 + i * d..40 + (i + 1) * d].to_vec()).collect();
            let mut pairwise = 0.0f64;
            for q in &qs {
                for k in &ks {
                    pairwise += q.iter().zip(k).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>();
                }
            }
            let got = span_similarity(&index(&qs, 0), &index(&ks, 0)).unwrap();
            proptest::prop_assert!((got - pairwise).abs() <= 1e-4 * pairwise.abs().max(1.0));
        }
    }
}
