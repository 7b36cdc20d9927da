use crate::engine::BudgetConfig;
use crate::tensor::{FrameGeometry, TensorF32};

/// Straight-line reference for one layer's combined selection.
///
/// Explicit loops over raw `[H, N, D]` buffers and full sorts everywhere;
/// shares no code with the scoring module. Intended for small instances.
pub fn oracle_combined_select(
    keys: &TensorF32,
    values: &TensorF32,
    config: &BudgetConfig,
    geometry: &FrameGeometry,
) -> Vec<usize> {
    let (heads, n, d) = (keys.shape()[0], keys.shape()[1], keys.shape()[2]);
    let k = keys.data();
    let v = values.data();
    let p = geometry.tokens_per_frame();
    let (rows, cols) = (geometry.grid_rows(), geometry.grid_cols());
    let f = n / p;
    let r = config.recent_frames();
    let c = config.target_size();
    let at = |buf: &[f32], h: usize, t: usize, i: usize| f64::from(buf[(h * n + t) * d + i]);

    // TaR over past frames.
    let past = (f - r) * p;
    let mut tar = vec![0.0f64; past];
    for t in 0..past {
        let patch = t % p;
        let mut total = 0.0;
        for h in 0..heads {
            let mut sim = 0.0;
            for j in 0..r {
                let u = (f - r + j) * p + patch;
                let mut dotp = 0.0;
                let mut na = 0.0;
                let mut nb = 0.0;
                for i in 0..d {
                    dotp += at(k, h, t, i) * at(k, h, u, i);
                    na += at(k, h, t, i) * at(k, h, t, i);
                    nb += at(k, h, u, i) * at(k, h, u, i);
                }
                let cos = if na == 0.0 || nb == 0.0 {
                    0.0
                } else {
                    (dotp / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
                };
                sim += cos;
            }
            total += -sim / r as f64;
        }
        tar[t] = total / heads as f64;
    }
    let tar_budget = (config.alpha() * c as f64 + 1e-9).floor() as usize - r * p;
    let mut order: Vec<usize> = (0..past).collect();
    order.sort_by(|&a, &b| tar[b].total_cmp(&tar[a]).then(a.cmp(&b)));
    let tar_keep: Vec<usize> = order[..tar_budget].to_vec();

    // VaN over every token, then the CV-selected pooling.
    let mut van = vec![0.0f64; n];
    for t in 0..n {
        let mut sq = 0.0;
        for h in 0..heads {
            for i in 0..d {
                sq += at(v, h, t, i) * at(v, h, t, i);
            }
        }
        van[t] = sq.sqrt();
    }
    let mean = van.iter().sum::<f64>() / n as f64;
    let var = van.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    let cv = if mean == 0.0 { 0.0 } else { var.sqrt() / mean };
    let [t1, t2, t3] = config.pooling().thresholds();
    let kernel = if cv < t1 {
        7
    } else if cv < t2 {
        5
    } else if cv < t3 {
        3
    } else {
        1
    };
    let half = (kernel / 2) as isize;
    let mut pooled = vec![0.0f64; n];
    for fr in 0..f {
        for i in 0..rows {
            for j in 0..cols {
                let mut sum = 0.0;
                let mut count = 0;
                for di in -half..=half {
                    for dj in -half..=half {
                        let (y, x) = (i as isize + di, j as isize + dj);
                        if y >= 0 && x >= 0 && (y as usize) < rows && (x as usize) < cols {
                            sum += van[fr * p + y as usize * cols + x as usize];
                            count += 1;
                        }
                    }
                }
                pooled[fr * p + i * cols + j] = sum / count as f64;
            }
        }
    }

    // Force recent and TaR picks above every pooled score, then TopK.
    let mut top = f64::NEG_INFINITY;
    for &s in &pooled {
        if s > top {
            top = s;
        }
    }
    let mut scores = pooled;
    for t in past..n {
        scores[t] = top + 1.0;
    }
    for &t in &tar_keep {
        scores[t] = top + 1.0;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = order[..c.min(n)].to_vec();
    keep.sort_unstable();
    keep
}
