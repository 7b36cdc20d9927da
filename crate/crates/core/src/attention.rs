//! Scaled dot-product attention over a cached key/value set.

use wide::f32x8;

use crate::error::{Error, Result};
use crate::tensor::{HeadsView, TensorF32};

/// Visibility of cached tokens to each query row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mask {
    /// Every query sees the whole cache (decode).
    None,
    /// The `m` queries are the last `m` cached tokens; row `i` sees tokens
    /// `0..=N-m+i` (prefill of a freshly appended block).
    CausalSuffix,
}

fn check_dims(q: &HeadsView<'_>, k: &HeadsView<'_>, v: &HeadsView<'_>, mask: Mask) -> Result<()> {
    if q.num_heads() != k.num_heads() || k.num_heads() != v.num_heads() {
        return Err(Error::Dimension(format!(
            "head counts differ: q={} k={} v={}",
            q.num_heads(),
            k.num_heads(),
            v.num_heads()
        )));
    }
    if q.head_dim() != k.head_dim() || k.head_dim() != v.head_dim() {
        return Err(Error::Dimension(format!(
            "head dims differ: q={} k={} v={}",
            q.head_dim(),
            k.head_dim(),
            v.head_dim()
        )));
    }
    if k.tokens() != v.tokens() || k.tokens() == 0 {
        return Err(Error::Dimension(format!(
            "key/value token counts {} / {} must match and be non-zero",
            k.tokens(),
            v.tokens()
        )));
    }
    if mask == Mask::CausalSuffix && q.tokens() > k.tokens() {
        return Err(Error::Dimension(format!(
            "{} causal queries exceed the {} cached tokens",
            q.tokens(),
            k.tokens()
        )));
    }
    Ok(())
}

/// Softmax weights of `query` over the first `visible` keys of head `h`, then
/// the weighted sum of values written into `out`.
fn attend_row(
    query: &[f32],
    keys: &HeadsView<'_>,
    values: &HeadsView<'_>,
    h: usize,
    visible: usize,
    weights: &mut Vec<f64>,
    out: &mut [f32],
) {
    let scale = 1.0 / (keys.head_dim() as f64).sqrt();
    weights.clear();
    let mut max = f64::NEG_INFINITY;
    for n in 0..visible {
        let logit = crate::kernels::dot(query, keys.vector(h, n)) * scale;
        max = max.max(logit);
        weights.push(logit);
    }
    let mut total = 0.0;
    for w in weights.iter_mut() {
        *w = (*w - max).exp();
        total += *w;
    }
    let mut acc = vec![0.0f64; out.len()];
    for (n, w) in weights.iter_mut().enumerate() {
        *w /= total;
        for (a, &x) in acc.iter_mut().zip(values.vector(h, n)) {
            *a += *w * f64::from(x);
        }
    }
    for (o, a) in out.iter_mut().zip(acc) {
        *o = a as f32;
    }
}

/// `softmax(Q Kᵀ / sqrt(D)) V` per head with no mask.
///
/// Returns the `[H, m, D]` output and the `[H, m, N]` attention weights.
pub fn attention_forward(
    queries: &HeadsView<'_>,
    keys: &HeadsView<'_>,
    values: &HeadsView<'_>,
) -> Result<(TensorF32, TensorF32)> {
    check_dims(queries, keys, values, Mask::None)?;
    let (h_count, m, n, d) = (
        queries.num_heads(),
        queries.tokens(),
        keys.tokens(),
        keys.head_dim(),
    );
    let mut out = vec![0.0f32; h_count * m * d];
    let mut all_weights = Vec::with_capacity(h_count * m * n);
    let mut row = Vec::with_capacity(n);
    for h in 0..h_count {
        for i in 0..m {
            let slot = &mut out[(h * m + i) * d..(h * m + i + 1) * d];
            attend_row(queries.vector(h, i), keys, values, h, n, &mut row, slot);
            all_weights.extend(row.iter().map(|&w| w as f32));
        }
    }
    Ok((
        TensorF32::new(vec![h_count, m, d], out)?,
        TensorF32::new(vec![h_count, m, n], all_weights)?,
    ))
}

/// Attention of `queries` over the cache under `mask`, returning only the
/// `[H, m, D]` output. Single precision and no weight matrix; this is the
/// per-frame prefill path.
///
/// Queries ride in the eight SIMD lanes: scores are kept `[key][query]`
/// and the output `[dim][query]`, so every update is a lane-wise FMA with a
/// broadcast key or value component.
pub fn attention_output(
    queries: &HeadsView<'_>,
    keys: &HeadsView<'_>,
    values: &HeadsView<'_>,
    mask: Mask,
) -> Result<TensorF32> {
    check_dims(queries, keys, values, mask)?;
    let (h_count, m, n, d) = (
        queries.num_heads(),
        queries.tokens(),
        keys.tokens(),
        keys.head_dim(),
    );
    let lanes = m.div_ceil(8);
    let scale = 1.0 / (d as f32).sqrt();
    let mut out = vec![0.0f32; h_count * m * d];
    // Queries packed eight per lane group, laid out [group][dim].
    let mut qt = vec![f32x8::ZERO; lanes * d];
    let mut scores = vec![f32x8::ZERO; n];
    let mut acc = vec![f32x8::ZERO; d];
    for h in 0..h_count {
        let q = queries.head(h);
        qt.fill(f32x8::ZERO);
        for (i, qi) in q.chunks_exact(d).enumerate() {
            for (j, &x) in qi.iter().enumerate() {
                qt[(i / 8) * d + j].as_mut_array()[i % 8] = x * scale;
            }
        }
        let kh = keys.head(h);
        let vh = values.head(h);
        for (c, qc) in qt.chunks_exact(d).enumerate() {
            let mut max = f32x8::from(f32::NEG_INFINITY);
            for (slot, k) in scores.iter_mut().zip(kh.chunks_exact(d)) {
                let mut s = f32x8::ZERO;
                for (&qj, &kj) in qc.iter().zip(k) {
                    s = qj.mul_add(f32x8::from(kj), s);
                }
                *slot = s;
                max = max.max(s);
            }
            if mask == Mask::CausalSuffix {
                // Query i sees keys 0..=n-m+i.
                let base = c * 8;
                for (t, row) in scores[n - m..].iter_mut().enumerate() {
                    let lane = row.as_mut_array();
                    for (l, x) in lane.iter_mut().enumerate() {
                        if base + l < t {
                            *x = f32::NEG_INFINITY;
                        }
                    }
                }
                max = f32x8::from(f32::NEG_INFINITY);
                for &s in &scores {
                    max = max.max(s);
                }
            }
            let mut total = f32x8::ZERO;
            acc.fill(f32x8::ZERO);
            for (&s, v) in scores.iter().zip(vh.chunks_exact(d)) {
                let w = (s - max).exp();
                total += w;
                for (o, &vj) in acc.iter_mut().zip(v) {
                    *o = w.mul_add(f32x8::from(vj), *o);
                }
            }
            let total = total.to_array();
            for l in 0..8.min(m - c * 8) {
                let i = c * 8 + l;
                let inv = 1.0 / total[l];
                let row = &mut out[(h * m + i) * d..(h * m + i + 1) * d];
                for (x, o) in row.iter_mut().zip(&acc) {
                    *x = o.as_array()[l] * inv;
                }
            }
        }
    }
    TensorF32::new(vec![h_count, m, d], out)
}
