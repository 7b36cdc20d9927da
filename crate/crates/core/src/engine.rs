//! Budgeted continual cache compression.
//!
//! Frames are appended to every layer in lockstep. As soon as a layer holds
//! `M` tokens the engine compresses each layer independently down to `C`
//! tokens before `append_frame` returns, so no caller ever observes more than
//! `M` tokens per layer.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::attention::{attention_output, Mask};
use crate::baselines::{snapkv_like_select, sliding_window_select, uniform_select, SnapKvConfig};
use crate::error::{Error, Result};
use crate::kernels::{coefficient_of_variation, sum_squares, top_k_indices, Direction};
use crate::scoring::{
    adaptive_pool_van, combine_select, tar_scores, tar_select, tar_select_reverse, van_scores,
    PoolingConfig, Provenance, SelectionResult,
};
use crate::tensor::{Frame, FrameGeometry, HeadsView, KvBlock, ModelDims, TensorF32};

/// Token-selection policy applied at each compression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Policy {
    /// Recent frames + TaR share + pooled-VaN fill.
    #[serde(rename = "infinipot_v")]
    InfinipotV,
    #[serde(rename = "tar_only")]
    TarOnly,
    #[serde(rename = "van_only")]
    VanOnly,
    #[serde(rename = "tar_reverse")]
    TarReverse,
    #[serde(rename = "van_reverse")]
    VanReverse,
    #[serde(rename = "uniform")]
    Uniform,
    #[serde(rename = "sliding_window")]
    SlidingWindow,
    #[serde(rename = "snapkv_like")]
    SnapkvLike,
}

impl Policy {
    pub const ALL: [Policy; 8] = [
        Policy::InfinipotV,
        Policy::TarOnly,
        Policy::VanOnly,
        Policy::TarReverse,
        Policy::VanReverse,
        Policy::Uniform,
        Policy::SlidingWindow,
        Policy::SnapkvLike,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Policy::InfinipotV => "infinipot_v",
            Policy::TarOnly => "tar_only",
            Policy::VanOnly => "van_only",
            Policy::TarReverse => "tar_reverse",
            Policy::VanReverse => "van_reverse",
            Policy::Uniform => "uniform",
            Policy::SlidingWindow => "sliding_window",
            Policy::SnapkvLike => "snapkv_like",
        }
    }

    /// The reversed-criterion ablation of a scoring policy.
    pub fn reversed(self) -> Option<Policy> {
        match self {
            Policy::TarOnly => Some(Policy::TarReverse),
            Policy::TarReverse => Some(Policy::TarOnly),
            Policy::VanOnly => Some(Policy::VanReverse),
            Policy::VanReverse => Some(Policy::VanOnly),
            _ => None,
        }
    }

    /// Policies that split the cache into past and recent frames.
    pub fn uses_recent_frames(self) -> bool {
        matches!(self, Policy::InfinipotV | Policy::TarOnly | Policy::TarReverse)
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Policy::ALL.iter().map(|p| p.name()).collect();
                Error::Config(format!("unknown policy {s:?}; expected one of {names:?}"))
            })
    }
}

/// Unvalidated budget knobs; `None` fields take their defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetParams {
    pub memory_budget: usize,
    pub target_size: Option<usize>,
    pub recent_frames: Option<usize>,
    pub alpha: f64,
    pub pooling: PoolingConfig,
    pub policy: Policy,
    pub snapkv: SnapKvConfig,
}

impl BudgetParams {
    pub fn new(memory_budget: usize) -> Self {
        Self {
            memory_budget,
            target_size: None,
            recent_frames: None,
            alpha: 0.5,
            pooling: PoolingConfig::default(),
            policy: Policy::InfinipotV,
            snapkv: SnapKvConfig::default(),
        }
    }

    pub fn target_size(mut self, c: usize) -> Self {
        self.target_size = Some(c);
        self
    }

    pub fn recent_frames(mut self, r: usize) -> Self {
        self.recent_frames = Some(r);
        self
    }

    pub fn alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn policy(mut self, policy: Policy) -> Self {
        self.policy = policy;
        self
    }

    pub fn pooling(mut self, pooling: PoolingConfig) -> Self {
        self.pooling = pooling;
        self
    }
}

/// Validated budget: `M` and `C` are whole frames, `0 < C < M`, and the TaR
/// share `⌊α·C⌋` covers the `r·p` recent tokens where the policy needs it.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetConfig {
    memory_budget: usize,
    target_size: usize,
    recent_frames: usize,
    alpha: f64,
    pooling: PoolingConfig,
    policy: Policy,
    snapkv: SnapKvConfig,
    tokens_per_frame: usize,
}

impl BudgetConfig {
    pub fn new(params: &BudgetParams, geometry: &FrameGeometry) -> Result<Self> {
        let p = geometry.tokens_per_frame();
        let m = params.memory_budget / p * p;
        if m == 0 {
            return Err(Error::Config(format!(
                "memory budget {} holds no whole {p}-token frame",
                params.memory_budget
            )));
        }
        let frames = m / p;
        let c_raw = params
            .target_size
            .unwrap_or_else(|| (0.75 * m as f64).floor() as usize);
        let c = c_raw / p * p;
        if c == 0 {
            return Err(Error::Config(format!(
                "target size {c_raw} holds no whole {p}-token frame"
            )));
        }
        if c >= m {
            return Err(Error::Config(format!(
                "target must be below budget (target {c} >= budget {m})"
            )));
        }
        if !(0.0..=1.0).contains(&params.alpha) {
            return Err(Error::Config(format!(
                "alpha {} must lie in [0, 1]",
                params.alpha
            )));
        }
        let r = params
            .recent_frames
            .unwrap_or_else(|| ((0.125 * frames as f64).floor() as usize).max(1));
        let cfg = Self {
            memory_budget: m,
            target_size: c,
            recent_frames: r,
            alpha: params.alpha,
            pooling: params.pooling,
            policy: params.policy,
            snapkv: params.snapkv,
            tokens_per_frame: p,
        };
        if params.policy.uses_recent_frames() {
            if r == 0 || r >= frames {
                return Err(Error::Config(format!(
                    "recent frames r={r} must satisfy 1 <= r < f={frames}"
                )));
            }
            let recent_tokens = r * p;
            let share = if params.policy == Policy::InfinipotV {
                cfg.tar_share()
            } else {
                c
            };
            if share < recent_tokens {
                return Err(Error::Config(format!(
                    "TaR share alpha*C = {share} must cover the r*p = {recent_tokens} recent tokens"
                )));
            }
        }
        if params.policy == Policy::SnapkvLike && c < params.snapkv.window {
            return Err(Error::Config(format!(
                "target {c} is smaller than the snapkv observation window {}",
                params.snapkv.window
            )));
        }
        Ok(cfg)
    }

    pub fn memory_budget(&self) -> usize {
        self.memory_budget
    }

    pub fn target_size(&self) -> usize {
        self.target_size
    }

    pub fn recent_frames(&self) -> usize {
        self.recent_frames
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn pooling(&self) -> &PoolingConfig {
        &self.pooling
    }

    pub fn policy(&self) -> Policy {
        self.policy
    }

    pub fn snapkv(&self) -> &SnapKvConfig {
        &self.snapkv
    }

    /// Frames that fill the memory budget (`f = M / p`).
    pub fn frames_per_budget(&self) -> usize {
        self.memory_budget / self.tokens_per_frame
    }

    /// Tokens reserved for recent + TaR selections: `⌊α·C⌋`.
    pub fn tar_share(&self) -> usize {
        // The epsilon keeps e.g. 0.29 * 100 from flooring to 28.
        (self.alpha * self.target_size as f64 + 1e-9).floor() as usize
    }

    pub fn with_pooling(mut self, pooling: PoolingConfig) -> Self {
        self.pooling = pooling;
        self
    }

    /// Round-trip the effective values back into raw parameters.
    pub fn params(&self) -> BudgetParams {
        BudgetParams {
            memory_budget: self.memory_budget,
            target_size: Some(self.target_size),
            recent_frames: Some(self.recent_frames),
            alpha: self.alpha,
            pooling: self.pooling,
            policy: self.policy,
            snapkv: self.snapkv,
        }
    }
}

/// Per-token provenance carried through every gather.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenMeta {
    pub frame_index: u64,
    pub patch_row: u32,
    pub patch_col: u32,
    pub global_position: u64,
}

/// One layer's cache: `[H, N, D]` keys and values, one buffer per head.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKv {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    meta: Vec<TokenMeta>,
    head_dim: usize,
}

impl LayerKv {
    fn new(dims: &ModelDims, capacity: usize) -> Self {
        let per_head = capacity * dims.head_dim();
        Self {
            keys: (0..dims.num_heads()).map(|_| Vec::with_capacity(per_head)).collect(),
            values: (0..dims.num_heads()).map(|_| Vec::with_capacity(per_head)).collect(),
            meta: Vec::with_capacity(capacity),
            head_dim: dims.head_dim(),
        }
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn meta(&self) -> &[TokenMeta] {
        &self.meta
    }

    pub fn keys(&self) -> HeadsView<'_> {
        HeadsView::new(
            self.keys.iter().map(Vec::as_slice).collect(),
            self.len(),
            self.head_dim,
        )
        .expect("layer buffers are consistent")
    }

    pub fn values(&self) -> HeadsView<'_> {
        HeadsView::new(
            self.values.iter().map(Vec::as_slice).collect(),
            self.len(),
            self.head_dim,
        )
        .expect("layer buffers are consistent")
    }

    /// Owned `[H, N, D]` copies of keys and values.
    pub fn to_tensors(&self) -> (TensorF32, TensorF32) {
        (self.keys().to_tensor(), self.values().to_tensor())
    }

    fn append(&mut self, block: &KvBlock, meta: impl IntoIterator<Item = TokenMeta>) {
        let n = block.tokens();
        let d = self.head_dim;
        for (h, (k, v)) in self.keys.iter_mut().zip(self.values.iter_mut()).enumerate() {
            k.extend_from_slice(&block.keys.data()[h * n * d..(h + 1) * n * d]);
            v.extend_from_slice(&block.values.data()[h * n * d..(h + 1) * n * d]);
        }
        self.meta.extend(meta);
    }

    /// Keep only the tokens at ascending `indices`, preserving their order.
    fn gather(&mut self, indices: &[usize]) {
        let d = self.head_dim;
        for buf in self.keys.iter_mut().chain(self.values.iter_mut()) {
            let mut out = Vec::with_capacity(buf.capacity());
            for &i in indices {
                out.extend_from_slice(&buf[i * d..(i + 1) * d]);
            }
            *buf = out;
        }
        self.meta = indices.iter().map(|&i| self.meta[i]).collect();
    }
}

/// Tokens selected for one layer under `config`, without touching the layer.
pub fn select_layer(
    config: &BudgetConfig,
    geometry: &FrameGeometry,
    keys: &HeadsView<'_>,
    values: &HeadsView<'_>,
) -> Result<SelectionResult> {
    let n = keys.tokens();
    let p = geometry.tokens_per_frame();
    let frames = geometry.whole_frames(n)?;
    let target = config.target_size().min(n);
    let r = config.recent_frames();
    let recent: Vec<usize> = if config.policy().uses_recent_frames() {
        (frames.saturating_sub(r) * p..n).collect()
    } else {
        Vec::new()
    };
    match config.policy() {
        Policy::InfinipotV => {
            let tar = tar_scores(keys, geometry, r)?;
            let tar_idx = tar_select(&tar, config.tar_share() - recent.len())?;
            let van = van_scores(values, geometry)?;
            let (pooled, _) = adaptive_pool_van(&van, config.pooling())?;
            combine_select(&tar_idx, &pooled, &recent, target)
        }
        Policy::TarOnly | Policy::TarReverse => {
            let tar = tar_scores(keys, geometry, r)?;
            let budget = target - recent.len();
            let chosen = if config.policy() == Policy::TarOnly {
                tar_select(&tar, budget)?
            } else {
                tar_select_reverse(&tar, budget)?
            };
            // Past indices all precede recent ones, so concatenation stays sorted.
            let mut sel = SelectionResult::uniform(chosen, Provenance::Tar);
            sel.provenance.extend(std::iter::repeat_n(Provenance::Recent, recent.len()));
            sel.indices.extend(recent);
            Ok(sel)
        }
        Policy::VanOnly | Policy::VanReverse => {
            let van = van_scores(values, geometry)?;
            let (pooled, _) = adaptive_pool_van(&van, config.pooling())?;
            let dir = if config.policy() == Policy::VanOnly {
                Direction::Max
            } else {
                Direction::Min
            };
            Ok(SelectionResult::uniform(
                top_k_indices(pooled.values(), target, dir),
                Provenance::Van,
            ))
        }
        Policy::Uniform => {
            let indices = uniform_select(frames, target / p)
                .into_iter()
                .flat_map(|f| f * p..(f + 1) * p)
                .collect();
            Ok(SelectionResult::uniform(indices, Provenance::Kept))
        }
        Policy::SlidingWindow => Ok(SelectionResult::uniform(
            sliding_window_select(n, target),
            Provenance::Kept,
        )),
        Policy::SnapkvLike => Ok(SelectionResult::uniform(
            snapkv_like_select(keys, config.snapkv(), target)?,
            Provenance::Kept,
        )),
    }
}

/// Runtime switches that do not change which tokens survive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EngineOptions {
    /// Compress (and prefill) layers on the rayon pool. Ignored without the
    /// `parallel` feature.
    pub parallel: bool,
    /// Run causal attention of each appended frame over the cache, standing in
    /// for the model's per-frame prefill work in `time_append`.
    pub prefill: bool,
    /// Keep a copy of the pre-compression cache in [`CompressionRecord`].
    pub keep_snapshot: bool,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self {
            parallel: cfg!(feature = "parallel"),
            prefill: true,
            keep_snapshot: false,
        }
    }
}

/// Result of one `append_frame` call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AppendOutcome {
    pub appended: usize,
    pub compressed: bool,
}

/// Counters are per layer (all layers move in lockstep).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CompressionStats {
    pub compressions_performed: u64,
    pub tokens_appended: u64,
    pub tokens_evicted: u64,
    pub peak_tokens_per_layer: usize,
    pub current_tokens_per_layer: usize,
    pub effective_memory_budget: usize,
    pub effective_target_size: usize,
    pub time_append: Duration,
    pub time_compress: Duration,
}

impl CompressionStats {
    /// `time_compress / (time_append + time_compress)`, zero before any work.
    pub fn overhead_ratio(&self) -> f64 {
        let total = (self.time_append + self.time_compress).as_secs_f64();
        if total == 0.0 {
            0.0
        } else {
            self.time_compress.as_secs_f64() / total
        }
    }
}

/// What the most recent compression did, per layer.
#[derive(Debug, Clone)]
pub struct CompressionRecord {
    pub selections: Vec<SelectionResult>,
    /// Token metadata of each layer immediately before the pass.
    pub pre_meta: Vec<Vec<TokenMeta>>,
    /// Full pre-compression caches when `keep_snapshot` is on.
    pub snapshot: Option<Vec<LayerKv>>,
}

/// Percentile with linear interpolation between closest ranks.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// CV thresholds at the 25th/50th/75th percentiles of `cvs`, nudged apart by
/// a small epsilon when they coincide.
pub fn thresholds_from_cvs(cvs: &[f64]) -> Result<PoolingConfig> {
    if cvs.is_empty() || cvs.iter().any(|c| !c.is_finite()) {
        return Err(Error::State(
            "calibration needs at least one finite CV observation".into(),
        ));
    }
    let mut sorted = cvs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (mut t1, t2, mut t3) = (
        percentile(&sorted, 0.25),
        percentile(&sorted, 0.50),
        percentile(&sorted, 0.75),
    );
    let eps = 1e-6 * t2.abs().max(1.0);
    if t1 >= t2 {
        t1 = t2 - eps;
    }
    if t3 <= t2 {
        t3 = t2 + eps;
    }
    PoolingConfig::new(t1, t2, t3)
}

/// The continual compression engine.
#[derive(Debug, Clone)]
pub struct Engine {
    config: BudgetConfig,
    geometry: FrameGeometry,
    dims: ModelDims,
    options: EngineOptions,
    layers: Vec<LayerKv>,
    stats: CompressionStats,
    frames_seen: u64,
    next_position: u64,
    last: Option<CompressionRecord>,
    prefill_checksum: f64,
}

impl Engine {
    pub fn new(config: BudgetConfig, geometry: FrameGeometry, dims: ModelDims) -> Result<Self> {
        Self::with_options(config, geometry, dims, EngineOptions::default())
    }

    pub fn with_options(
        config: BudgetConfig,
        geometry: FrameGeometry,
        dims: ModelDims,
        options: EngineOptions,
    ) -> Result<Self> {
        // Re-validate against this geometry: the config may have been built
        // for a different frame size.
        let config = BudgetConfig::new(&config.params(), &geometry)?;
        let layers = (0..dims.num_layers())
            .map(|_| LayerKv::new(&dims, config.memory_budget()))
            .collect();
        let stats = CompressionStats {
            effective_memory_budget: config.memory_budget(),
            effective_target_size: config.target_size(),
            ..Default::default()
        };
        Ok(Self {
            config,
            geometry,
            dims,
            options,
            layers,
            stats,
            frames_seen: 0,
            next_position: 0,
            last: None,
            prefill_checksum: 0.0,
        })
    }

    pub fn config(&self) -> &BudgetConfig {
        &self.config
    }

    pub fn geometry(&self) -> &FrameGeometry {
        &self.geometry
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn options(&self) -> &EngineOptions {
        &self.options
    }

    pub fn layers(&self) -> &[LayerKv] {
        &self.layers
    }

    pub fn frames_seen(&self) -> u64 {
        self.frames_seen
    }

    /// Tokens currently resident in each layer.
    pub fn tokens_per_layer(&self) -> usize {
        self.layers.first().map_or(0, LayerKv::len)
    }

    pub fn last_compression(&self) -> Option<&CompressionRecord> {
        self.last.as_ref()
    }

    pub fn stats(&self) -> CompressionStats {
        self.stats.clone()
    }

    fn for_each_layer<T, F>(&mut self, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize, &mut LayerKv) -> Result<T> + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.options.parallel {
            use rayon::prelude::*;
            return self
                .layers
                .par_iter_mut()
                .enumerate()
                .map(|(l, layer)| f(l, layer))
                .collect();
        }
        self.layers
            .iter_mut()
            .enumerate()
            .map(|(l, layer)| f(l, layer))
            .collect()
    }

    /// Append one frame to every layer; compress if the budget is reached.
    pub fn append_frame(&mut self, frame: &Frame) -> Result<AppendOutcome> {
        frame.validate(&self.dims, &self.geometry)?;
        let p = self.geometry.tokens_per_frame();
        let start = Instant::now();
        let frame_index = self.frames_seen;
        let base = self.next_position;
        let geometry = self.geometry;
        let meta = move |q: usize| {
            let (row, col) = geometry.patch_coords(q);
            TokenMeta {
                frame_index,
                patch_row: row as u32,
                patch_col: col as u32,
                global_position: base + q as u64,
            }
        };
        let prefill = self.options.prefill;
        let sums = self.for_each_layer(|l, layer| {
            let block = &frame.layers[l];
            layer.append(block, (0..p).map(meta));
            if !prefill {
                return Ok(0.0);
            }
            let out = attention_output(
                &block.keys.heads()?,
                &layer.keys(),
                &layer.values(),
                Mask::CausalSuffix,
            )?;
            Ok(out.data().iter().map(|&x| f64::from(x)).sum::<f64>())
        })?;
        self.prefill_checksum += std::hint::black_box(sums.iter().sum::<f64>());
        self.stats.time_append += start.elapsed();

        self.frames_seen += 1;
        self.next_position += p as u64;
        self.stats.tokens_appended += p as u64;
        let n = self.tokens_per_layer();
        self.stats.peak_tokens_per_layer = self.stats.peak_tokens_per_layer.max(n);
        self.stats.current_tokens_per_layer = n;

        let compressed = n >= self.config.memory_budget();
        if compressed {
            self.compress_all()?;
        }
        Ok(AppendOutcome {
            appended: p,
            compressed,
        })
    }

    /// Compress every layer to the target size. Requires more than `C`
    /// resident tokens.
    pub fn compress_all(&mut self) -> Result<Vec<SelectionResult>> {
        let n = self.tokens_per_layer();
        if n <= self.config.target_size() {
            return Err(Error::State(format!(
                "nothing to compress: {n} tokens resident, target {}",
                self.config.target_size()
            )));
        }
        let start = Instant::now();
        let pre_meta: Vec<Vec<TokenMeta>> = self.layers.iter().map(|l| l.meta.clone()).collect();
        let snapshot = self.options.keep_snapshot.then(|| self.layers.clone());
        let config = self.config.clone();
        let geometry = self.geometry;
        let selections = self.for_each_layer(|_, layer| {
            let sel = select_layer(&config, &geometry, &layer.keys(), &layer.values())?;
            layer.gather(&sel.indices);
            Ok(sel)
        })?;
        self.stats.time_compress += start.elapsed();

        let kept = self.tokens_per_layer();
        self.stats.compressions_performed += 1;
        self.stats.tokens_evicted += (n - kept) as u64;
        self.stats.current_tokens_per_layer = kept;
        self.last = Some(CompressionRecord {
            selections: selections.clone(),
            pre_meta,
            snapshot,
        });
        Ok(selections)
    }

    /// Compress whatever is resident if it exceeds the target (end of stream).
    pub fn flush(&mut self) -> Result<Option<Vec<SelectionResult>>> {
        if self.tokens_per_layer() > self.config.target_size() {
            self.compress_all().map(Some)
        } else {
            Ok(None)
        }
    }

    /// Decode positions `0..N` per layer, in original stream order.
    pub fn reindex_positions(&self) -> Vec<Vec<u32>> {
        self.layers
            .iter()
            .map(|layer| {
                let mut order: Vec<usize> = (0..layer.len()).collect();
                order.sort_by_key(|&i| layer.meta[i].global_position);
                let mut pos = vec![0u32; layer.len()];
                for (rank, i) in order.into_iter().enumerate() {
                    pos[i] = rank as u32;
                }
                pos
            })
            .collect()
    }

    /// Derive CV thresholds from the value norms of a warmup stream prefix.
    ///
    /// Each layer contributes the CV of VaN over all warmup tokens; the
    /// thresholds are that distribution's quartiles.
    pub fn calibrate_thresholds(&self, warmup: &[Frame]) -> Result<PoolingConfig> {
        let needed = self.config.frames_per_budget();
        if warmup.len() < needed {
            return Err(Error::State(format!(
                "calibration warmup has {} frames, needs at least one budget window of {needed}",
                warmup.len()
            )));
        }
        let mut cvs = Vec::with_capacity(self.dims.num_layers());
        for l in 0..self.dims.num_layers() {
            let mut norms = Vec::with_capacity(warmup.len() * self.geometry.tokens_per_frame());
            for frame in warmup {
                frame.validate(&self.dims, &self.geometry)?;
                let values = frame.layers[l].values.heads()?;
                for n in 0..values.tokens() {
                    let sq: f64 = (0..values.num_heads())
                        .map(|h| sum_squares(values.vector(h, n)))
                        .sum();
                    norms.push(sq.sqrt());
                }
            }
            cvs.push(coefficient_of_variation(&norms)?);
        }
        thresholds_from_cvs(&cvs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom() -> FrameGeometry {
        FrameGeometry::new(2, 2).unwrap()
    }

    fn dims() -> ModelDims {
        ModelDims::new(2, 1, 2).unwrap()
    }

    fn frame(seed: u64, dims: &ModelDims, p: usize) -> Frame {
        // Cheap deterministic filler; content is irrelevant for these tests.
        let layer = |l: u64| {
            let n = dims.num_heads() * p * dims.head_dim();
            let data: Vec<f32> = (0..n)
                .map(|i| (((seed * 31 + l * 7 + i as u64) % 17) as f32 - 8.0) / 8.0 + 0.01)
                .collect();
            let shape = vec![dims.num_heads(), p, dims.head_dim()];
            KvBlock::new(
                TensorF32::new(shape.clone(), data.clone()).unwrap(),
                TensorF32::new(shape, data.iter().map(|x| x * 0.5 + 1.0).collect()).unwrap(),
            )
            .unwrap()
        };
        Frame {
            layers: (0..dims.num_layers() as u64).map(layer).collect(),
        }
    }

    #[test]
    fn config_defaults_and_flooring() {
        let g = FrameGeometry::new(8, 8).unwrap();
        let cfg = BudgetConfig::new(&BudgetParams::new(6144), &g).unwrap();
        assert_eq!(cfg.memory_budget(), 6144);
        assert_eq!(cfg.target_size(), 4608);
        assert_eq!(cfg.recent_frames(), 12);
        assert_eq!(cfg.alpha(), 0.5);
        assert_eq!(cfg.tar_share(), 2304);

        let cfg = BudgetConfig::new(&BudgetParams::new(6200).target_size(4650), &g).unwrap();
        assert_eq!((cfg.memory_budget(), cfg.target_size()), (6144, 4608));
        // Small budgets still get one recent frame.
        let cfg = BudgetConfig::new(&BudgetParams::new(4 * 64).alpha(1.0), &g).unwrap();
        assert_eq!(cfg.recent_frames(), 1);
    }

    #[test]
    fn config_violations_name_the_clause() {
        let g = geom();
        let err = BudgetConfig::new(&BudgetParams::new(16).target_size(16), &g).unwrap_err();
        assert!(err.to_string().contains("target must be below budget"), "{err}");
        let err = BudgetConfig::new(
            &BudgetParams::new(32).target_size(8).recent_frames(2).alpha(0.5),
            &g,
        )
        .unwrap_err();
        assert!(err.to_string().contains("TaR share"), "{err}");
        assert!(BudgetConfig::new(&BudgetParams::new(3), &g).is_err());
        assert!(BudgetConfig::new(&BudgetParams::new(16).alpha(1.5), &g).is_err());
        assert!(BudgetConfig::new(&BudgetParams::new(16).recent_frames(4), &g).is_err());
        // Policies without recent frames ignore the TaR-share clause.
        assert!(BudgetConfig::new(
            &BudgetParams::new(32).target_size(8).recent_frames(2).policy(Policy::VanOnly),
            &g
        )
        .is_ok());
        assert!(BudgetConfig::new(
            &BudgetParams::new(64).target_size(16).policy(Policy::SnapkvLike),
            &g
        )
        .is_err());
    }

    #[test]
    fn policy_names_round_trip() {
        for p in Policy::ALL {
            assert_eq!(p.name().parse::<Policy>().unwrap(), p);
            if let Some(r) = p.reversed() {
                assert_eq!(r.reversed(), Some(p));
            }
        }
        assert!("lru".parse::<Policy>().is_err());
    }

    #[test]
    fn first_frame_and_trigger() {
        let (g, d) = (geom(), dims());
        let cfg = BudgetConfig::new(&BudgetParams::new(16).target_size(8).recent_frames(1), &g).unwrap();
        let mut e = Engine::new(cfg, g, d).unwrap();
        assert_eq!(e.tokens_per_layer(), 0);
        assert_eq!(e.stats().compressions_performed, 0);
        let out = e.append_frame(&frame(0, &d, 4)).unwrap();
        assert_eq!(out, AppendOutcome { appended: 4, compressed: false });
        assert_eq!(e.tokens_per_layer(), 4);
        for s in 1..4 {
            let out = e.append_frame(&frame(s, &d, 4)).unwrap();
            assert_eq!(out.compressed, s == 3);
        }
        assert!(e.layers().iter().all(|l| l.len() == 8));
        let st = e.stats();
        assert_eq!(st.compressions_performed, 1);
        assert_eq!(st.tokens_evicted, 8);
        assert_eq!(st.peak_tokens_per_layer, 16);
        assert_eq!(
            st.tokens_evicted,
            st.tokens_appended - st.current_tokens_per_layer as u64
        );
    }

    #[test]
    fn append_rejects_bad_shapes() {
        let (g, d) = (geom(), dims());
        let cfg = BudgetConfig::new(&BudgetParams::new(16).target_size(8).recent_frames(1), &g).unwrap();
        let mut e = Engine::new(cfg, g, d).unwrap();
        let partial = frame(0, &d, 3);
        assert!(matches!(e.append_frame(&partial), Err(Error::Geometry(_))));
        let wrong_dims = frame(0, &ModelDims::new(2, 2, 2).unwrap(), 4);
        assert!(matches!(e.append_frame(&wrong_dims), Err(Error::Dimension(_))));
        assert_eq!(e.tokens_per_layer(), 0);
    }

    #[test]
    fn reindex_and_flush() {
        let (g, d) = (geom(), dims());
        let cfg = BudgetConfig::new(&BudgetParams::new(16).target_size(8).recent_frames(1), &g).unwrap();
        let mut e = Engine::new(cfg, g, d).unwrap();
        assert!(e.flush().unwrap().is_none());
        for s in 0..3 {
            e.append_frame(&frame(s, &d, 4)).unwrap();
        }
        assert_eq!(e.reindex_positions()[0], (0..12).collect::<Vec<u32>>());
        let sel = e.flush().unwrap().unwrap();
        assert_eq!(sel[0].len(), 8);
        assert!(matches!(e.compress_all(), Err(Error::State(_))));
        for pos in e.reindex_positions() {
            assert_eq!(pos, (0..8).collect::<Vec<u32>>());
        }
        for layer in e.layers() {
            assert!(layer.meta().windows(2).all(|w| w[0].global_position < w[1].global_position));
        }
    }

    #[test]
    fn threshold_percentiles() {
        let spread: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
        let t = thresholds_from_cvs(&spread).unwrap().thresholds();
        for (a, b) in t.iter().zip([0.25, 0.5, 0.75]) {
            assert!((a - b).abs() < 1e-12);
        }
        let t = thresholds_from_cvs(&[0.3]).unwrap().thresholds();
        assert!(t[0] < 0.3 && t[1] == 0.3 && t[2] > 0.3);
        assert!((t[2] - t[0] - 2e-6).abs() < 1e-12);
        let t = thresholds_from_cvs(&[0.2, 0.2, 0.2, 0.2]).unwrap().thresholds();
        assert!(t[0] < t[1] && t[1] < t[2]);
        assert!(thresholds_from_cvs(&[]).is_err());
    }

    #[test]
    fn calibration_requires_a_full_window() {
        let (g, d) = (geom(), dims());
        let cfg = BudgetConfig::new(&BudgetParams::new(16).target_size(8).recent_frames(1), &g).unwrap();
        let e = Engine::new(cfg, g, d).unwrap();
        let frames: Vec<Frame> = (0..3).map(|s| frame(s, &d, 4)).collect();
        assert!(matches!(e.calibrate_thresholds(&frames), Err(Error::State(_))));
        let frames: Vec<Frame> = (0..4).map(|s| frame(s, &d, 4)).collect();
        let pc = e.calibrate_thresholds(&frames).unwrap();
        let t = pc.thresholds();
        assert!(t[0] < t[1] && t[1] < t[2]);
    }
}
