//! Deterministic scalar kernels used by scoring and selection.
//!
//! All reductions run left to right in `f64`, so results do not depend on
//! thread count or evaluation order.

use std::cmp::Ordering;

use crate::error::{Error, Result};

/// Cosine similarity in `[-1, 1]`. Zero when either vector has zero norm.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Dimension(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    Ok(cosine_from_parts(dot, na.sqrt(), nb.sqrt()))
}

#[inline]
pub(crate) fn cosine_from_parts(dot: f64, norm_a: f64, norm_b: f64) -> f64 {
    if norm_a == 0.0 || norm_b == 0.0 {
        return 0.0;
    }
    (dot / (norm_a * norm_b)).clamp(-1.0, 1.0)
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0f64, |acc, (&x, &y)| acc + f64::from(x) * f64::from(y))
}

#[inline]
pub(crate) fn sum_squares(v: &[f32]) -> f64 {
    v.iter().fold(0.0f64, |acc, &x| acc + f64::from(x) * f64::from(x))
}

/// Euclidean norm.
pub fn l2_norm(v: &[f32]) -> f64 {
    sum_squares(v).sqrt()
}

/// Stride-1 average pooling over a `rows x cols` grid with an odd `kernel`.
///
/// Output has the input's shape. Border cells average only the window cells
/// that fall inside the grid.
pub fn avg_pool2d_same(grid: &[f64], rows: usize, cols: usize, kernel: usize) -> Result<Vec<f64>> {
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "pooling kernel must be odd and positive, got {kernel}"
        )));
    }
    if rows == 0 || cols == 0 || grid.len() != rows * cols {
        return Err(Error::Dimension(format!(
            "grid of {} cells does not match {rows}x{cols}",
            grid.len()
        )));
    }
    if kernel == 1 {
        return Ok(grid.to_vec());
    }
    let half = kernel / 2;
    let mut out = Vec::with_capacity(grid.len());
    for i in 0..rows {
        let (r0, r1) = (i.saturating_sub(half), (i + half).min(rows - 1));
        for j in 0..cols {
            let (c0, c1) = (j.saturating_sub(half), (j + half).min(cols - 1));
            let mut sum = 0.0;
            for r in r0..=r1 {
                for c in c0..=c1 {
                    sum += grid[r * cols + c];
                }
            }
            out.push(sum / ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64);
        }
    }
    Ok(out)
}

/// Which end of the score range [`top_k_indices`] keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Max,
    Min,
}

impl Direction {
    pub fn flipped(self) -> Self {
        match self {
            Direction::Max => Direction::Min,
            Direction::Min => Direction::Max,
        }
    }
}

// -0.0 and 0.0 must tie under the index rule, which `total_cmp` would not do.
#[inline]
fn ord_key(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x
    }
}

/// Indices of the `k` largest (or smallest) scores, ascending by index.
///
/// Equal scores are resolved in favour of the smaller index. `k` larger than
/// the input keeps everything.
pub fn top_k_indices(scores: &[f64], k: usize, direction: Direction) -> Vec<usize> {
    let n = scores.len();
    let k = k.min(n);
    if k == n {
        return (0..n).collect();
    }
    if k == 0 {
        return Vec::new();
    }
    let rank = |a: &usize, b: &usize| -> Ordering {
        let (sa, sb) = (ord_key(scores[*a]), ord_key(scores[*b]));
        let by_score = match direction {
            Direction::Max => sb.total_cmp(&sa),
            Direction::Min => sa.total_cmp(&sb),
        };
        by_score.then(a.cmp(b))
    };
    let mut idx: Vec<usize> = (0..n).collect();
    idx.select_nth_unstable_by(k - 1, rank);
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Population standard deviation over mean; zero when the mean is zero.
pub fn coefficient_of_variation(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Domain(
            "coefficient of variation of an empty set".into(),
        ));
    }
    if let Some(bad) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::Domain(format!(
            "coefficient of variation needs finite non-negative values, got {bad}"
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return Ok(0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(var.sqrt() / mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn oracle_cosine(a: &[f32], b: &[f32]) -> f64 {
        let mut dot = 0.0;
        let mut sa = 0.0;
        let mut sb = 0.0;
        for i in 0..a.len() {
            dot += a[i] as f64 * b[i] as f64;
            sa += a[i] as f64 * a[i] as f64;
            sb += b[i] as f64 * b[i] as f64;
        }
        dot / (sa.sqrt() * sb.sqrt())
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&[2.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 2.0]),
            Err(Error::Dimension(_))
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (a, b) = (random_vec(&mut rng, 8), random_vec(&mut rng, 8));
        let got = cosine_similarity(&a, &b).unwrap();
        assert!((got - oracle_cosine(&a, &b)).abs() <= 1e-6);
    }

    #[test]
    fn norm_examples() {
        assert_eq!(l2_norm(&[0.0, 0.0, 0.0]), 0.0);
        assert_eq!(l2_norm(&[3.0, 4.0]), 5.0);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let v = random_vec(&mut rng, 16);
        let mut s = 0.0f64;
        for x in &v {
            s += (*x as f64).powi(2);
        }
        assert!((l2_norm(&v) - s.sqrt()).abs() <= 1e-6);
    }

    #[test]
    fn pool_examples() {
        let grid: Vec<f64> = (1..=9).map(f64::from).collect();
        assert_eq!(avg_pool2d_same(&grid, 3, 3, 1).unwrap(), grid);
        let pooled = avg_pool2d_same(&grid, 3, 3, 3).unwrap();
        assert_eq!(pooled[4], 5.0);
        assert_eq!(pooled[0], 3.0);
        let constant = vec![2.5; 12];
        for k in [1, 3, 5, 7] {
            assert_eq!(avg_pool2d_same(&constant, 3, 4, k).unwrap(), constant);
        }
        assert!(matches!(
            avg_pool2d_same(&grid, 3, 3, 4),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            avg_pool2d_same(&grid, 3, 3, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k_indices(&[0.3, 0.1, 0.2], 3, Direction::Max), vec![0, 1, 2]);
        assert_eq!(top_k_indices(&[0.1, 0.9, 0.5], 1, Direction::Max), vec![1]);
        assert_eq!(top_k_indices(&[1.0, 1.0, 0.0], 1, Direction::Max), vec![0]);
        assert_eq!(top_k_indices(&[1.0, 1.0, 0.0], 1, Direction::Min), vec![2]);
        assert_eq!(top_k_indices(&[0.0, 0.0], 1, Direction::Min), vec![0]);
        assert_eq!(top_k_indices(&[-0.0, 0.0], 1, Direction::Max), vec![0]);
        assert_eq!(top_k_indices(&[1.0, 2.0], 5, Direction::Max), vec![0, 1]);
        assert!(top_k_indices(&[1.0], 0, Direction::Max).is_empty());
    }

    #[test]
    fn cv_examples() {
        assert_eq!(coefficient_of_variation(&[2.0, 2.0, 2.0]).unwrap(), 0.0);
        assert_eq!(coefficient_of_variation(&[0.0, 0.0]).unwrap(), 0.0);
        assert!((coefficient_of_variation(&[1.0, 3.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(
            coefficient_of_variation(&[1.0, -1.0]),
            Err(Error::Domain(_))
        ));
        assert!(coefficient_of_variation(&[]).is_err());
    }

    proptest! {
        #[test]
        fn cosine_is_symmetric_and_scale_invariant(
            a in prop::collection::vec(-10.0f32..10.0, 1..24),
            c in 0.01f32..100.0,
        ) {
            prop_assume!(l2_norm(&a) > 1e-3);
            let scaled: Vec<f32> = a.iter().map(|x| x * c).collect();
            prop_assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-6);
            prop_assert!((cosine_similarity(&a, &scaled).unwrap() - 1.0).abs() < 1e-6);
            let b: Vec<f32> = a.iter().rev().copied().collect();
            prop_assert_eq!(cosine_similarity(&a, &b).unwrap(), cosine_similarity(&b, &a).unwrap());
        }

        #[test]
        fn pooling_stays_within_global_range(
            rows in 1usize..7, cols in 1usize..7, kernel in prop::sample::select(vec![1usize, 3, 5, 7]),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let grid: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-5.0..5.0)).collect();
            let lo = grid.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for v in avg_pool2d_same(&grid, rows, cols, kernel).unwrap() {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }

        #[test]
        fn top_k_matches_full_sort_and_tie_shuffles(
            scores in prop::collection::vec(prop::sample::select(vec![0.0f64, 0.25, 0.5, 1.0]), 0..40),
            k in 0usize..45,
            max in any::<bool>(),
            seed in any::<u64>(),
        ) {
            let dir = if max { Direction::Max } else { Direction::Min };
            let got = top_k_indices(&scores, k, dir);
            let mut order: Vec<usize> = (0..scores.len()).collect();
            order.sort_by(|&a, &b| {
                let o = scores[a].partial_cmp(&scores[b]).unwrap();
                (if max { o.reverse() } else { o }).then(a.cmp(&b))
            });
            let mut want: Vec<usize> = order.into_iter().take(k).collect();
            want.sort_unstable();
            prop_assert_eq!(&got, &want);

            // Shuffling the input permutes equal scores among themselves; the
            // selected score multiset must not change.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut shuffled = scores.clone();
            for i in (1..shuffled.len()).rev() {
                let j = rng.random_range(0..=i);
                shuffled.swap(i, j);
            }
            let mut a: Vec<f64> = got.iter().map(|&i| scores[i]).collect();
            let mut b: Vec<f64> = top_k_indices(&shuffled, k, dir).iter().map(|&i| shuffled[i]).collect();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            prop_assert_eq!(a, b);
        }
    }
}
