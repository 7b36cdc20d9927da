//! Token scoring for cache compression.
//!
//! * Temporal-axis redundancy (TaR): for each token of the older "past" frames,
//!   the negated mean cosine similarity between its key and the keys at the
//!   same patch coordinate in the `r` most recent frames, averaged over heads.
//!   Higher means more distinctive.
//! * Value norm (VaN): the ℓ2 norm of a token's value vector across all heads,
//!   smoothed per frame by a 2-D average pool whose kernel is picked from the
//!   layer's coefficient of variation.
//! * [`combine_select`] merges the two: recent and TaR-chosen tokens are forced
//!   to the top of the pooled VaN ranking, and the remainder of the budget is
//!   filled by pooled VaN.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{
    avg_pool2d_same, coefficient_of_variation, cosine_from_parts, dot, sum_squares, top_k_indices,
    Direction,
};
use crate::tensor::{FrameGeometry, HeadsView};

/// One score per token, laid out frame by frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    values: Vec<f64>,
    geometry: FrameGeometry,
    frame_offset: usize,
}

impl ScoreMap {
    pub fn new(values: Vec<f64>, geometry: FrameGeometry, frame_offset: usize) -> Result<Self> {
        geometry.whole_frames(values.len())?;
        Ok(Self {
            values,
            geometry,
            frame_offset,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn geometry(&self) -> FrameGeometry {
        self.geometry
    }

    /// Cache frame index of the first scored frame.
    pub fn frame_offset(&self) -> usize {
        self.frame_offset
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn frames(&self) -> usize {
        self.values.len() / self.geometry.tokens_per_frame()
    }

    /// Score of frame `t` (relative to `frame_offset`) at patch `(i, j)`.
    pub fn at(&self, t: usize, i: usize, j: usize) -> f64 {
        self.values[t * self.geometry.tokens_per_frame() + self.geometry.patch_index(i, j)]
    }

    /// Index of the first scored token in whole-cache coordinates.
    pub fn token_offset(&self) -> usize {
        self.frame_offset * self.geometry.tokens_per_frame()
    }
}

/// CV thresholds `τ1 < τ2 < τ3` mapping a layer's VaN dispersion to a kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolingConfig {
    thresholds: [f64; 3],
}

impl PoolingConfig {
    pub fn new(tau1: f64, tau2: f64, tau3: f64) -> Result<Self> {
        let t = [tau1, tau2, tau3];
        if t.iter().any(|x| !x.is_finite()) || !(tau1 < tau2 && tau2 < tau3) {
            return Err(Error::Config(format!(
                "CV thresholds must be finite and strictly increasing, got {t:?}"
            )));
        }
        Ok(Self { thresholds: t })
    }

    pub fn thresholds(&self) -> [f64; 3] {
        self.thresholds
    }

    /// Kernel for a CV value: `< τ1 → 7`, `[τ1, τ2) → 5`, `[τ2, τ3) → 3`, `≥ τ3 → 1`.
    pub fn kernel_for(&self, cv: f64) -> usize {
        let [t1, t2, t3] = self.thresholds;
        if cv < t1 {
            7
        } else if cv < t2 {
            5
        } else if cv < t3 {
            3
        } else {
            1
        }
    }
}

impl Default for PoolingConfig {
    fn default() -> Self {
        Self {
            thresholds: [0.05, 0.10, 0.15],
        }
    }
}

/// Why a token survived compression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Member of the `r` most recent frames.
    Recent,
    /// Picked by temporal distinctiveness.
    Tar,
    /// Picked by pooled value norm.
    Van,
    /// Kept by a baseline policy that has no finer attribution.
    Kept,
}

/// Surviving token indices (ascending, into the pre-compression cache).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionResult {
    pub indices: Vec<usize>,
    pub provenance: Vec<Provenance>,
}

impl SelectionResult {
    /// Tag every index with the same provenance.
    pub fn uniform(indices: Vec<usize>, tag: Provenance) -> Self {
        let provenance = vec![tag; indices.len()];
        Self {
            indices,
            provenance,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.binary_search(&index).is_ok()
    }

    pub fn with_tag(&self, tag: Provenance) -> impl Iterator<Item = usize> + '_ {
        self.indices
            .iter()
            .zip(&self.provenance)
            .filter(move |(_, p)| **p == tag)
            .map(|(i, _)| *i)
    }
}

/// TaR scores for the past frames of a cache holding `f` whole frames.
///
/// The first `f - r` frames are past, the last `r` are recent; the returned
/// map covers the past tokens only and starts at cache frame 0.
pub fn tar_scores(
    keys: &HeadsView<'_>,
    geometry: &FrameGeometry,
    recent_frames: usize,
) -> Result<ScoreMap> {
    let frames = geometry.whole_frames(keys.tokens())?;
    if recent_frames == 0 || recent_frames >= frames {
        return Err(Error::Config(format!(
            "recent frames r={recent_frames} must satisfy 1 <= r < f={frames}"
        )));
    }
    let p = geometry.tokens_per_frame();
    let past_frames = frames - recent_frames;
    let heads = keys.num_heads();
    let mut scores = vec![0.0f64; past_frames * p];

    let mut norms = vec![0.0f64; keys.tokens()];
    for h in 0..heads {
        for (n, slot) in norms.iter_mut().enumerate() {
            *slot = sum_squares(keys.vector(h, n)).sqrt();
        }
        for t in 0..past_frames {
            for q in 0..p {
                let idx = t * p + q;
                let past = keys.vector(h, idx);
                let mut sim = 0.0;
                for tr in past_frames..frames {
                    let ridx = tr * p + q;
                    sim += cosine_from_parts(dot(past, keys.vector(h, ridx)), norms[idx], norms[ridx]);
                }
                scores[idx] += -sim / recent_frames as f64;
            }
        }
    }
    for s in &mut scores {
        *s /= heads as f64;
    }
    ScoreMap::new(scores, *geometry, 0)
}

fn check_budget(scores: &ScoreMap, budget: usize) -> Result<()> {
    if budget > scores.len() {
        return Err(Error::Config(format!(
            "past budget {budget} exceeds the {} past tokens",
            scores.len()
        )));
    }
    Ok(())
}

fn tar_select_dir(scores: &ScoreMap, past_budget: usize, dir: Direction) -> Result<Vec<usize>> {
    check_budget(scores, past_budget)?;
    let offset = scores.token_offset();
    Ok(top_k_indices(scores.values(), past_budget, dir)
        .into_iter()
        .map(|i| i + offset)
        .collect())
}

/// The `past_budget` most distinctive past tokens, in cache coordinates.
pub fn tar_select(scores: &ScoreMap, past_budget: usize) -> Result<Vec<usize>> {
    tar_select_dir(scores, past_budget, Direction::Max)
}

/// Ablation: the `past_budget` most redundant past tokens.
pub fn tar_select_reverse(scores: &ScoreMap, past_budget: usize) -> Result<Vec<usize>> {
    tar_select_dir(scores, past_budget, Direction::Min)
}

/// Per-token value norm over the concatenation of all heads.
pub fn van_scores(values: &HeadsView<'_>, geometry: &FrameGeometry) -> Result<ScoreMap> {
    if values.tokens() == 0 {
        return Err(Error::Dimension("value norms of an empty cache".into()));
    }
    let mut sq = vec![0.0f64; values.tokens()];
    for h in 0..values.num_heads() {
        for (n, acc) in sq.iter_mut().enumerate() {
            *acc += sum_squares(values.vector(h, n));
        }
    }
    ScoreMap::new(sq.into_iter().map(f64::sqrt).collect(), *geometry, 0)
}

/// Pool each frame's VaN grid with the kernel chosen from the layer-wide CV.
pub fn adaptive_pool_van(van: &ScoreMap, pooling: &PoolingConfig) -> Result<(ScoreMap, usize)> {
    let geometry = van.geometry();
    let cv = coefficient_of_variation(van.values())?;
    let kernel = pooling.kernel_for(cv);
    if kernel == 1 {
        return Ok((van.clone(), 1));
    }
    let p = geometry.tokens_per_frame();
    let mut pooled = Vec::with_capacity(van.len());
    for frame in van.values().chunks_exact(p) {
        pooled.extend(avg_pool2d_same(
            frame,
            geometry.grid_rows(),
            geometry.grid_cols(),
            kernel,
        )?);
    }
    Ok((ScoreMap::new(pooled, geometry, van.frame_offset())?, kernel))
}

/// Final selection of `target` tokens.
///
/// Recent and TaR indices are lifted above every pooled VaN score (global max
/// plus one) and the top `target` of the result are kept. Tags follow
/// `recent > tar > van`.
pub fn combine_select(
    tar_indices: &[usize],
    pooled_van: &ScoreMap,
    recent_indices: &[usize],
    target: usize,
) -> Result<SelectionResult> {
    let n = pooled_van.len();
    if let Some(bad) = tar_indices.iter().chain(recent_indices).find(|&&i| i >= n) {
        return Err(Error::Dimension(format!(
            "forced index {bad} outside the {n}-token cache"
        )));
    }
    let mut tags: Vec<Option<Provenance>> = vec![None; n];
    for &i in tar_indices {
        tags[i] = Some(Provenance::Tar);
    }
    for &i in recent_indices {
        tags[i] = Some(Provenance::Recent);
    }
    let top = pooled_van
        .values()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let lifted = top + 1.0;
    let working: Vec<f64> = pooled_van
        .values()
        .iter()
        .zip(&tags)
        .map(|(&v, t)| if t.is_some() { lifted } else { v })
        .collect();
    let indices = top_k_indices(&working, target, Direction::Max);
    let provenance = indices
        .iter()
        .map(|&i| tags[i].unwrap_or(Provenance::Van))
        .collect();
    Ok(SelectionResult {
        indices,
        provenance,
    })
}
