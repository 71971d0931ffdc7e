//! Causal attention tiles and triangular-attention (TA) score fields.
//!
//! A TA score of the token interval `[x, y]` is the attention mass that the
//! rows `x..=y` place on the columns `x..=y`, summed over heads. Because the
//! map is lower triangular this equals the mass of the quadrant "rows `0..=y`,
//! columns `x..N`", which a single 2D running sum provides for every `(x, y)`
//! at once: each cell is its row suffix sum plus the cell above it.

use serde::{Deserialize, Serialize};

use crate::error::{LtriError, Result};

/// Per-head attention over a rectangular window of query rows and key columns.
///
/// Row `i` is the query at key-column position `i + row_offset`; entries with
/// `col > i + row_offset` are causally masked and are exactly zero. Values are
/// laid out `[head][row][col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTile {
    layer: usize,
    heads: usize,
    rows: usize,
    cols: usize,
    row_offset: usize,
    values: Vec<f32>,
}

impl AttentionTile {
    /// Wraps already-normalized attention values, validating the tile
    /// invariants (finite, non-negative, zero above the causal diagonal).
    pub fn new(
        layer: usize,
        heads: usize,
        rows: usize,
        cols: usize,
        row_offset: usize,
        values: Vec<f32>,
    ) -> Result<Self> {
        check_shape(heads, rows, cols, values.len())?;
        let tile = AttentionTile {
            layer,
            heads,
            rows,
            cols,
            row_offset,
            values,
        };
        for h in 0..heads {
            for i in 0..rows {
                let row = tile.row(h, i);
                for (j, &v) in row.iter().enumerate() {
                    if !v.is_finite() {
                        return Err(LtriError::trace(format!(
                            "non-finite attention at head {h} ({i},{j})"
                        )));
                    }
                    if v < 0.0 {
                        return Err(LtriError::trace(format!(
                            "negative attention {v} at head {h} ({i},{j})"
                        )));
                    }
                    if tile.is_masked(i, j) && v != 0.0 {
                        return Err(LtriError::trace(format!(
                            "attention above the causal diagonal at head {h} ({i},{j})"
                        )));
                    }
                }
            }
        }
        Ok(tile)
    }

    /// Builds a tile from raw per-head scores laid out `[head][row][col]`.
    ///
    /// The causal mask is applied first. With `apply_softmax` the raw scores
    /// are logits and each row is softmax-normalized over its unmasked
    /// columns; otherwise they must already be non-negative probabilities.
    pub fn build(
        layer: usize,
        heads: usize,
        rows: usize,
        cols: usize,
        row_offset: usize,
        raw: &[f32],
        apply_softmax: bool,
    ) -> Result<Self> {
        check_shape(heads, rows, cols, raw.len())?;
        if let Some(pos) = raw.iter().position(|v| !v.is_finite()) {
            return Err(LtriError::trace(format!("non-finite raw score at offset {pos}")));
        }
        let mut values = vec![0.0f32; raw.len()];
        for h in 0..heads {
            for i in 0..rows {
                let base = (h * rows + i) * cols;
                let visible = (i + row_offset + 1).min(cols);
                let src = &raw[base..base + visible];
                let dst = &mut values[base..base + visible];
                if apply_softmax {
                    let max = src.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                    let mut total = 0.0f64;
                    for (d, &s) in dst.iter_mut().zip(src) {
                        let e = ((s - max) as f64).exp();
                        *d = e as f32;
                        total += e;
                    }
                    if total > 0.0 {
                        for d in dst.iter_mut() {
                            *d = (*d as f64 / total) as f32;
                        }
                    }
                } else {
                    for (j, (d, &s)) in dst.iter_mut().zip(src).enumerate() {
                        if s < 0.0 {
                            return Err(LtriError::trace(format!(
                                "negative attention {s} at head {h} ({i},{j})"
                            )));
                        }
                        *d = s;
                    }
                }
            }
        }
        Ok(AttentionTile {
            layer,
            heads,
            rows,
            cols,
            row_offset,
            values,
        })
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row_offset(&self) -> usize {
        self.row_offset
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    #[inline]
    pub fn is_masked(&self, i: usize, j: usize) -> bool {
        j > i + self.row_offset
    }

    #[inline]
    pub fn get(&self, head: usize, i: usize, j: usize) -> f32 {
        self.values[(head * self.rows + i) * self.cols + j]
    }

    pub fn row(&self, head: usize, i: usize) -> &[f32] {
        let base = (head * self.rows + i) * self.cols;
        &self.values[base..base + self.cols]
    }

    /// Attention summed over heads, `[row][col]`, in double precision.
    pub fn head_sum(&self) -> Vec<f64> {
        let plane = self.rows * self.cols;
        let mut out = vec![0.0f64; plane];
        for h in 0..self.heads {
            let src = &self.values[h * plane..(h + 1) * plane];
            for (o, &v) in out.iter_mut().zip(src) {
                *o += v as f64;
            }
        }
        out
    }

    /// Largest deviation of an unmasked row sum from 1, over all heads and rows.
    pub fn max_row_sum_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for h in 0..self.heads {
            for i in 0..self.rows {
                let s: f64 = self.row(h, i).iter().map(|&v| v as f64).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
        worst
    }
}

fn check_shape(heads: usize, rows: usize, cols: usize, len: usize) -> Result<()> {
    if heads == 0 || rows == 0 || cols == 0 {
        return Err(LtriError::trace(format!(
            "empty tile shape heads={heads} rows={rows} cols={cols}"
        )));
    }
    if heads * rows * cols != len {
        return Err(LtriError::trace(format!(
            "tile data length {len} does not match {heads}x{rows}x{cols}"
        )));
    }
    Ok(())
}

/// Free-function form of [`AttentionTile::build`] for square tiles
/// (row `i` is key position `i`).
pub fn build_tile(heads: usize, n: usize, raw: &[f32], apply_softmax: bool) -> Result<AttentionTile> {
    AttentionTile::build(0, heads, n, n, 0, raw, apply_softmax)
}

/// Attention-map threshold θ, either absolute or resolved per tile as a
/// quantile of the tile's nonzero entries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Threshold {
    Absolute(f64),
    /// Quantile in `[0, 1]` (0.9 is the 90th percentile).
    Percentile(f64),
}

impl Default for Threshold {
    fn default() -> Self {
        Threshold::Percentile(0.9)
    }
}

impl Threshold {
    /// Resolves θ for `tile`. Percentiles use linear interpolation between the
    /// bracketing order statistics of all nonzero entries across heads. The
    /// result is kept strictly below 1 so it is always a valid TA threshold.
    pub fn resolve(&self, tile: &AttentionTile) -> Result<f64> {
        match *self {
            Threshold::Absolute(t) => {
                if !(0.0..1.0).contains(&t) {
                    return Err(LtriError::config(format!("theta {t} outside [0, 1)")));
                }
                Ok(t)
            }
            Threshold::Percentile(q) => {
                if !(0.0..=1.0).contains(&q) {
                    return Err(LtriError::config(format!("percentile {q} outside [0, 1]")));
                }
                let mut nonzero: Vec<f64> = tile
                    .values
                    .iter()
                    .filter(|&&v| v > 0.0)
                    .map(|&v| v as f64)
                    .collect();
                Ok(quantile_in_place(&mut nonzero, q).clamp(0.0, 1.0 - f64::EPSILON))
            }
        }
    }
}

/// Linear-interpolation quantile (`q` in `[0, 1]`); 0 for an empty slice.
/// Reorders `values`.
pub fn quantile_in_place(values: &mut [f64], q: f64) -> f64 {
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    let (_, lo_val, upper) = values.select_nth_unstable_by(lo, |a, b| a.total_cmp(b));
    let lo_val = *lo_val;
    if frac == 0.0 || upper.is_empty() {
        return lo_val;
    }
    let hi_val = upper.iter().copied().fold(f64::INFINITY, f64::min);
    lo_val + frac * (hi_val - lo_val)
}

/// Linear-interpolation quantile of an ascending slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return 0.0;
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if frac == 0.0 || lo + 1 >= n {
        return sorted[lo.min(n - 1)];
    }
    sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
}

/// Number of lower-triangle cells (diagonal included) of the interval `[x, y]`.
#[inline]
pub fn triangle_cells(x: usize, y: usize) -> f64 {
    let len = (y - x + 1) as f64;
    len * (len + 1.0) / 2.0
}

/// TA scores for every interval of a square tile.
///
/// `cumulative(x, y)` is S*, the head-summed attention inside the triangle
/// `[x, y]`; `score(x, y)` is the thresholded S = S* − H·θ·T(x, y).
#[derive(Debug, Clone)]
pub struct TaScoreField {
    layer: usize,
    n: usize,
    heads: usize,
    theta: f64,
    // n rows of (n + 1) entries: quad[y][x] = Σ_{i<=y} Σ_{j>=x} A_ij, quad[y][n] = 0.
    quad: Vec<f64>,
}

impl TaScoreField {
    pub fn new(tile: &AttentionTile, theta: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&theta) {
            return Err(LtriError::config(format!("theta {theta} outside [0, 1)")));
        }
        if tile.rows != tile.cols || tile.row_offset != 0 {
            return Err(LtriError::trace(format!(
                "TA field needs a square diagonal tile, got {}x{} offset {}",
                tile.rows, tile.cols, tile.row_offset
            )));
        }
        let n = tile.rows;
        let stride = n + 1;
        let summed = tile.head_sum();
        let mut quad = vec![0.0f64; n * stride];
        for y in 0..n {
            // suffix sum of row y, then add the cell above
            let row = &summed[y * n..(y + 1) * n];
            let mut suffix = 0.0f64;
            for x in (0..n).rev() {
                suffix += row[x];
                let above = if y > 0 { quad[(y - 1) * stride + x] } else { 0.0 };
                quad[y * stride + x] = suffix + above;
            }
        }
        Ok(TaScoreField {
            layer: tile.layer,
            n,
            heads: tile.heads,
            theta,
            quad,
        })
    }

    /// Same field under a different threshold; the cumulative table is reused.
    pub fn with_theta(mut self, theta: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&theta) {
            return Err(LtriError::config(format!("theta {theta} outside [0, 1)")));
        }
        self.theta = theta;
        Ok(self)
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    #[inline]
    fn quad(&self, y: usize, x: usize) -> f64 {
        self.quad[y * (self.n + 1) + x]
    }

    /// S*_{xy}; callers guarantee `x <= y < n`.
    #[inline]
    pub fn cumulative(&self, x: usize, y: usize) -> f64 {
        debug_assert!(x <= y && y < self.n);
        self.quad(y, x)
    }

    /// S_{xy} without bounds checks beyond debug assertions.
    #[inline]
    pub fn score_unchecked(&self, x: usize, y: usize) -> f64 {
        self.cumulative(x, y) - self.heads as f64 * self.theta * triangle_cells(x, y)
    }

    /// Thresholded TA score S_{xy}.
    pub fn score(&self, x: usize, y: usize) -> Result<f64> {
        if x > y || y >= self.n {
            return Err(LtriError::index(format!(
                "span [{x}, {y}] invalid for field of length {}",
                self.n
            )));
        }
        Ok(self.score_unchecked(x, y))
    }

    /// Head-summed attention mass of rows `rows.0..=rows.1` and columns
    /// `cols.0..=cols.1`. Empty ranges (start > end) give 0.
    pub fn rect_sum(&self, rows: (usize, usize), cols: (usize, usize)) -> f64 {
        let (r0, r1) = rows;
        let (c0, c1) = cols;
        if r0 > r1 || c0 > c1 {
            return 0.0;
        }
        debug_assert!(r1 < self.n && c1 < self.n);
        let band = |y: usize| self.quad(y, c0) - self.quad(y, c1 + 1);
        let upper = if r0 > 0 { band(r0 - 1) } else { 0.0 };
        band(r1) - upper
    }
}

/// Computes the TA score field of a square tile for threshold `theta`.
pub fn ta_field(tile: &AttentionTile, theta: f64) -> Result<TaScoreField> {
    TaScoreField::new(tile, theta)
}

/// Thresholded TA score of `[x, y]`.
pub fn ta_score(field: &TaScoreField, x: usize, y: usize) -> Result<f64> {
    field.score(x, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_by_two() -> AttentionTile {
        AttentionTile::new(0, 1, 2, 2, 0, vec![1.0, 0.0, 0.5, 0.5]).unwrap()
    }

    fn random_tile(rng: &mut ChaCha8Rng, heads: usize, n: usize) -> AttentionTile {
        let raw: Vec<f32> = (0..heads * n * n).map(|_| rng.random_range(-3.0..3.0)).collect();
        build_tile(heads, n, &raw, true).unwrap()
    }

    // Direct region sum, independent of the running-sum table.
    fn brute(tile: &AttentionTile, x: usize, y: usize) -> f64 {
        let mut s = 0.0;
        for h in 0..tile.heads() {
            for i in x..=y {
                for j in x..=y {
                    s += tile.get(h, i, j) as f64;
                }
            }
        }
        s
    }

    #[test]
    fn uniform_logits_softmax_rows() {
        let tile = build_tile(1, 2, &[0.3, 0.3, 0.3, 0.3], true).unwrap();
        assert_eq!(tile.row(0, 0), &[1.0, 0.0]);
        assert_eq!(tile.row(0, 1), &[0.5, 0.5]);
    }

    #[test]
    fn nonzero_above_diagonal_rejected() {
        let err = AttentionTile::new(0, 1, 2, 2, 0, vec![0.5, 0.5, 0.5, 0.5]).unwrap_err();
        assert!(matches!(err, LtriError::InvalidTrace(_)));
    }

    #[test]
    fn build_errors() {
        let err = build_tile(1, 2, &[f32::NAN, 0.0, 0.0, 0.0], true).unwrap_err();
        assert!(matches!(err, LtriError::InvalidTrace(_)));
        let err = build_tile(1, 2, &[1.0, 0.0, -0.5, 1.5], false).unwrap_err();
        assert!(matches!(err, LtriError::InvalidTrace(_)));
        // upper entries of raw probabilities are masked away, not rejected
        let tile = build_tile(1, 2, &[1.0, 7.0, 0.5, 0.5], false).unwrap();
        assert_eq!(tile.get(0, 0, 1), 0.0);
    }

    #[test]
    fn random_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tile = random_tile(&mut rng, 2, 64);
        assert!(tile.max_row_sum_error() < 1e-6);
    }

    #[test]
    fn hand_summed_field() {
        let f = ta_field(&two_by_two(), 0.0).unwrap();
        assert_eq!(f.cumulative(0, 1), 2.0);
        assert_eq!(f.cumulative(1, 1), 0.5);
        assert_eq!(f.cumulative(0, 0), 1.0);

        let f = ta_field(&two_by_two(), 0.1).unwrap();
        assert!((f.score(1, 1).unwrap() - 0.4).abs() < 1e-12);
        assert!((f.score(0, 1).unwrap() - 1.7).abs() < 1e-12);
    }

    #[test]
    fn score_index_errors() {
        let f = ta_field(&two_by_two(), 0.0).unwrap();
        assert!(matches!(f.score(1, 0), Err(LtriError::Index(_))));
        assert!(matches!(f.score(0, 2), Err(LtriError::Index(_))));
    }

    #[test]
    fn theta_range_checked() {
        assert!(matches!(ta_field(&two_by_two(), 1.0), Err(LtriError::Config(_))));
        assert!(matches!(ta_field(&two_by_two(), -0.1), Err(LtriError::Config(_))));
    }

    #[test]
    fn matches_brute_force_h4_n128() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tile = random_tile(&mut rng, 4, 128);
        let f = ta_field(&tile, 0.05).unwrap();
        for x in (0..128).step_by(3) {
            for y in (x..128).step_by(5) {
                let expect = brute(&tile, x, y) - 4.0 * 0.05 * triangle_cells(x, y);
                let got = f.score(x, y).unwrap();
                assert!((got - expect).abs() <= 1e-4 * expect.abs().max(1.0), "({x},{y})");
            }
        }
    }

    #[test]
    fn full_window_and_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tile = random_tile(&mut rng, 3, 40);
        let f = ta_field(&tile, 0.0).unwrap();
        assert!((f.score(0, 39).unwrap() - 120.0).abs() < 1e-3);
        for k in 0..40 {
            let diag: f64 = (0..3).map(|h| tile.get(h, k, k) as f64).sum();
            assert!((f.score(k, k).unwrap() - diag).abs() < 1e-9);
        }
    }

    #[test]
    fn rect_sum_matches_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tile = random_tile(&mut rng, 2, 30);
        let f = ta_field(&tile, 0.0).unwrap();
        let summed = tile.head_sum();
        for &(rows, cols) in &[((5, 20), (0, 4)), ((10, 29), (10, 12)), ((0, 29), (0, 29)), ((3, 2), (0, 1))] {
            let mut expect = 0.0;
            for i in rows.0..=rows.1.max(rows.0) {
                if rows.0 > rows.1 {
                    break;
                }
                for j in cols.0..=cols.1 {
                    expect += summed[i * 30 + j];
                }
            }
            assert!((f.rect_sum(rows, cols) - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn percentile_interpolates() {
        let mut v = vec![4.0, 1.0, 3.0, 2.0];
        assert!((quantile_in_place(&mut v, 0.5) - 2.5).abs() < 1e-12);
        let mut v = vec![4.0, 1.0, 3.0, 2.0];
        assert_eq!(quantile_in_place(&mut v, 1.0), 4.0);
        let tile = two_by_two();
        // nonzero entries {1.0, 0.5, 0.5}
        let theta = Threshold::Percentile(0.25).resolve(&tile).unwrap();
        assert!((theta - 0.5).abs() < 1e-12);
        let theta = Threshold::Percentile(1.0).resolve(&tile).unwrap();
        assert!(theta < 1.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn containment_monotone(seed in any::<u64>(), n in 2usize..40, a in 0usize..40, b in 0usize..40, c in 0usize..40, d in 0usize..40) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let tile = random_tile(&mut rng, 2, n);
                let f = ta_field(&tile, 0.0).unwrap();
                let mut pts = [a % n, b % n, c % n, d % n];
                pts.sort();
                // [pts1, pts2] is contained in [pts0, pts3]
                prop_assert!(f.cumulative(pts[1], pts[2]) <= f.cumulative(pts[0], pts[3]) + 1e-9);
            }

            #[test]
            fn threshold_identity(seed in any::<u64>(), n in 1usize..32, theta in 0.0f64..0.99) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let tile = random_tile(&mut rng, 3, n);
                let f = ta_field(&tile, theta).unwrap();
                for x in 0..n {
                    for y in x..n {
                        let back = f.score(x, y).unwrap() + 3.0 * theta * triangle_cells(x, y);
                        prop_assert!((back - f.cumulative(x, y)).abs() <= 1e-12 * f.cumulative(x, y).abs().max(1.0));
                    }
                }
            }
        }
    }
}
