//! Reference eviction policies: uniform frame sampling, sliding window,
//! SnapKV-style attention scoring, and reversed-criterion ablations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{avg_pool2d_same, dot, top_k_indices, Direction};
use crate::tensor::HeadsView;

/// Observation window and pooling kernel for [`snapkv_like_select`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapKvConfig {
    pub window: usize,
    pub pool_kernel: usize,
}

impl SnapKvConfig {
    pub fn new(window: usize, pool_kernel: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::Config("observation window must be >= 1".into()));
        }
        if pool_kernel == 0 || pool_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "pool kernel must be odd and >= 1, got {pool_kernel}"
            )));
        }
        Ok(Self {
            window,
            pool_kernel,
        })
    }
}

impl Default for SnapKvConfig {
    fn default() -> Self {
        Self {
            window: 32,
            pool_kernel: 7,
        }
    }
}

/// Frames `⌊j·total/keep⌋` for `j < keep`, with the last slot replaced by the
/// newest frame.
pub fn uniform_select(total_frames: usize, keep_frames: usize) -> Vec<usize> {
    let keep = keep_frames.min(total_frames);
    if keep == 0 {
        return Vec::new();
    }
    let mut frames: Vec<usize> = (0..keep).map(|j| j * total_frames / keep).collect();
    frames[keep - 1] = total_frames - 1;
    frames
}

/// The `keep` most recent token indices.
pub fn sliding_window_select(n_tokens: usize, keep: usize) -> Vec<usize> {
    (n_tokens - keep.min(n_tokens)..n_tokens).collect()
}

/// Accumulated attention `u_t` that the last `window` tokens pay to each
/// earlier token, summed over heads and window positions.
///
/// The window tokens' keys stand in for their queries, and window row `i`
/// sees tokens up to and including itself.
pub fn snapkv_scores(keys: &HeadsView<'_>, window: usize) -> Result<Vec<f64>> {
    let n = keys.tokens();
    if window == 0 || n <= window {
        return Err(Error::Config(format!(
            "cache of {n} tokens must exceed the observation window {window}"
        )));
    }
    let prefix = n - window;
    let scale = 1.0 / (keys.head_dim() as f64).sqrt();
    let mut u = vec![0.0f64; prefix];
    let mut row = Vec::with_capacity(n);
    for h in 0..keys.num_heads() {
        for qpos in prefix..n {
            let query = keys.vector(h, qpos);
            row.clear();
            let mut max = f64::NEG_INFINITY;
            for t in 0..=qpos {
                let logit = dot(query, keys.vector(h, t)) * scale;
                max = max.max(logit);
                row.push(logit);
            }
            let mut z = 0.0;
            for w in row.iter_mut() {
                *w = (*w - max).exp();
                z += *w;
            }
            for (acc, w) in u.iter_mut().zip(&row) {
                *acc += w / z;
            }
        }
    }
    Ok(u)
}

/// SnapKV-style selection of `keep` tokens. The observation window is always
/// kept and counts toward `keep`; the rest go to the prefix tokens with the
/// highest pooled attention.
pub fn snapkv_like_select(
    keys: &HeadsView<'_>,
    config: &SnapKvConfig,
    keep: usize,
) -> Result<Vec<usize>> {
    let n = keys.tokens();
    if keep < config.window {
        return Err(Error::Config(format!(
            "keep {keep} is smaller than the observation window {}",
            config.window
        )));
    }
    if keep >= n {
        return Ok((0..n).collect());
    }
    let u = snapkv_scores(keys, config.window)?;
    let pooled = avg_pool2d_same(&u, 1, u.len(), config.pool_kernel)?;
    let mut kept = top_k_indices(&pooled, keep - config.window, Direction::Max);
    kept.extend(n - config.window..n);
    Ok(kept)
}

/// Keep the `forced` indices plus the `keep - |forced|` best remaining scores
/// in `direction`. With [`Direction::Min`] this is the reversed ablation.
pub fn select_with_forced(
    scores: &[f64],
    keep: usize,
    forced: &[usize],
    direction: Direction,
) -> Vec<usize> {
    let mut is_forced = vec![false; scores.len()];
    for &i in forced {
        is_forced[i] = true;
    }
    let free: Vec<usize> = (0..scores.len()).filter(|&i| !is_forced[i]).collect();
    let free_scores: Vec<f64> = free.iter().map(|&i| scores[i]).collect();
    let mut out: Vec<usize> = top_k_indices(&free_scores, keep.saturating_sub(forced.len()), direction)
        .into_iter()
        .map(|j| free[j])
        .chain(forced.iter().copied())
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Reversed-criterion selection: the lowest scores instead of the highest,
/// with `forced` indices retained either way.
pub fn reverse_mode(scores: &[f64], keep: usize, forced: &[usize]) -> Vec<usize> {
    select_with_forced(scores, keep, forced, Direction::Min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::TensorF32;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_examples() {
        assert_eq!(uniform_select(5, 5), vec![0, 1, 2, 3, 4]);
        assert_eq!(uniform_select(4, 2), vec![0, 3]);
        // Stride formula: ⌊j·10/3⌋ = 0, 3, 6; last slot becomes frame 9.
        assert_eq!(uniform_select(10, 3), vec![0, 3, 9]);
        assert_eq!(uniform_select(3, 7), vec![0, 1, 2]);
        assert_eq!(uniform_select(6, 1), vec![5]);
        for total in 1..30 {
            for keep in 1..=total {
                let f = uniform_select(total, keep);
                assert_eq!(f.len(), keep);
                assert_eq!(*f.last().unwrap(), total - 1);
                assert!(f.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }

    #[test]
    fn sliding_window_examples() {
        assert_eq!(sliding_window_select(4, 4), vec![0, 1, 2, 3]);
        assert_eq!(sliding_window_select(10, 3), vec![7, 8, 9]);
    }

    #[test]
    fn sliding_window_stream_evicts_oldest_first() {
        // Simulate a stream of token ids through repeated windowing and check
        // the survivors are always the newest ids.
        let mut cache: Vec<usize> = Vec::new();
        let mut next = 0;
        for _ in 0..50 {
            for _ in 0..3 {
                cache.push(next);
                next += 1;
            }
            if cache.len() >= 12 {
                let keep = sliding_window_select(cache.len(), 8);
                cache = keep.iter().map(|&i| cache[i]).collect();
                assert_eq!(cache, (next - 8..next).collect::<Vec<_>>());
            }
        }
    }

    fn brute_force_snapkv(keys: &TensorF32, w: usize) -> Vec<f64> {
        let (h, n, d) = (keys.shape()[0], keys.shape()[1], keys.shape()[2]);
        let k = |hh: usize, t: usize| &keys.data()[(hh * n + t) * d..(hh * n + t + 1) * d];
        let mut u = vec![0.0; n - w];
        for hh in 0..h {
            for i in n - w..n {
                let logits: Vec<f64> = (0..=i)
                    .map(|t| {
                        k(hh, i).iter().zip(k(hh, t)).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>()
                            / (d as f64).sqrt()
                    })
                    .collect();
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                for t in 0..n - w {
                    u[t] += logits[t].exp() / z;
                }
            }
        }
        u
    }

    #[test]
    fn snapkv_scores_match_softmax_and_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let (h, n, d, w) = (2, 24, 4, 4);
        let keys = TensorF32::new(
            vec![h, n, d],
            (0..h * n * d).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        )
        .unwrap();
        let got = snapkv_scores(&keys.heads().unwrap(), w).unwrap();
        let want = brute_force_snapkv(&keys, w);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-9);
        }
        let cfg = SnapKvConfig::new(w, 1).unwrap();
        let sel = snapkv_like_select(&keys.heads().unwrap(), &cfg, 10).unwrap();
        let mut expect = top_k_indices(&want, 6, Direction::Max);
        expect.extend(20..24);
        assert_eq!(sel, expect);
    }

    #[test]
    fn snapkv_keeps_dominant_key() {
        // Token 3 is aligned with every window key; all other prefix keys are
        // orthogonal to the window.
        let (n, d, w) = (12, 4, 3);
        let mut data = vec![0.0f32; n * d];
        for t in 0..n {
            data[t * d + (t % 2) + 2] = 1.0; // prefix keys live in dims 2,3
        }
        data[3 * d..4 * d].copy_from_slice(&[4.0, 0.0, 0.0, 0.0]);
        for t in n - w..n {
            data[t * d..(t + 1) * d].copy_from_slice(&[2.0, 0.0, 0.0, 0.0]);
        }
        let keys = TensorF32::new(vec![1, n, d], data).unwrap();
        let cfg = SnapKvConfig::new(w, 1).unwrap();
        for keep in w + 1..n {
            let sel = snapkv_like_select(&keys.heads().unwrap(), &cfg, keep).unwrap();
            assert!(sel.contains(&3), "keep={keep} lost the dominant token");
            assert_eq!(sel.len(), keep);
        }
        assert_eq!(snapkv_like_select(&keys.heads().unwrap(), &cfg, n).unwrap().len(), n);
        assert!(matches!(
            snapkv_like_select(&keys.heads().unwrap(), &cfg, w - 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn snapkv_equivariant_under_prefix_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (n, d, w) = (16, 4, 3);
        let data: Vec<f32> = (0..n * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        // Permute prefix labels by reversing them; the window stays put.
        let perm: Vec<usize> = (0..n - w).rev().chain(n - w..n).collect();
        let mut permuted = vec![0.0f32; n * d];
        for (new, &old) in perm.iter().enumerate() {
            permuted[new * d..(new + 1) * d].copy_from_slice(&data[old * d..(old + 1) * d]);
        }
        let a = TensorF32::new(vec![1, n, d], data).unwrap();
        let b = TensorF32::new(vec![1, n, d], permuted).unwrap();
        // Pooling mixes neighbours, so equivariance holds for kernel 1.
        let cfg = SnapKvConfig::new(w, 1).unwrap();
        let sa = snapkv_like_select(&a.heads().unwrap(), &cfg, 8).unwrap();
        let mut sb: Vec<usize> = snapkv_like_select(&b.heads().unwrap(), &cfg, 8)
            .unwrap()
            .into_iter()
            .map(|i| perm[i])
            .collect();
        sb.sort_unstable();
        assert_eq!(sa, sb);
    }

    #[test]
    fn reverse_examples() {
        assert_eq!(reverse_mode(&[0.9, 0.1], 1, &[]), vec![1]);
        assert_eq!(select_with_forced(&[0.9, 0.1], 1, &[], Direction::Max), vec![0]);
        // Forced indices survive the reversal.
        assert_eq!(reverse_mode(&[0.9, 0.1, 0.5, 0.7], 2, &[3]), vec![1, 3]);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scores: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..1.0)).collect();
        let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
        // Reversing twice (flip direction, flip scores) is the forward selection.
        assert_eq!(
            reverse_mode(&negated, 6, &[]),
            select_with_forced(&scores, 6, &[], Direction::Max)
        );
        let fwd = select_with_forced(&scores, 6, &[], Direction::Max);
        let rev = reverse_mode(&scores, 6, &[]);
        assert!(fwd.iter().all(|i| !rev.contains(i)));
        let mut order: Vec<usize> = (0..20).collect();
        order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
        let mut bottom = order[..6].to_vec();
        bottom.sort_unstable();
        assert_eq!(rev, bottom);
    }
}
