//! Synthetic KV streams with controllable redundancy and planted needles.

mod oracle;

pub use oracle::oracle_combined_select;

pub use crate::attention::attention_forward;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::engine::LayerKv;
use crate::error::{Error, Result};
use crate::tensor::{Frame, FrameGeometry, KvBlock, ModelDims, TensorF32};

/// A high-norm, temporally distinctive token planted at one patch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Needle {
    pub frame: usize,
    pub row: usize,
    pub col: usize,
    pub norm_boost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamSpec {
    pub num_frames: usize,
    pub geometry: FrameGeometry,
    pub dims: ModelDims,
    pub static_fraction: f64,
    pub noise_sigma: f64,
    pub needles: Vec<Needle>,
    pub seed: u64,
}

impl StreamSpec {
    /// Three quarters static patches with light noise, no needles.
    pub fn new(num_frames: usize, geometry: FrameGeometry, dims: ModelDims, seed: u64) -> Self {
        Self {
            num_frames,
            geometry,
            dims,
            static_fraction: 0.75,
            noise_sigma: 0.01,
            needles: Vec::new(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.static_fraction) {
            return Err(Error::Config(format!(
                "static_fraction {} must lie in [0, 1]",
                self.static_fraction
            )));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!(
                "noise_sigma {} must be finite and >= 0",
                self.noise_sigma
            )));
        }
        let g = &self.geometry;
        for (i, n) in self.needles.iter().enumerate() {
            if n.frame >= self.num_frames || n.row >= g.grid_rows() || n.col >= g.grid_cols() {
                return Err(Error::Config(format!(
                    "needle {i} at (frame {}, {}, {}) lies outside {} frames of {}x{}",
                    n.frame,
                    n.row,
                    n.col,
                    self.num_frames,
                    g.grid_rows(),
                    g.grid_cols()
                )));
            }
            if !(n.norm_boost.is_finite() && n.norm_boost >= 1.0) {
                return Err(Error::Config(format!(
                    "needle {i} norm_boost {} must be >= 1",
                    n.norm_boost
                )));
            }
            if self.needles[..i]
                .iter()
                .any(|m| (m.frame, m.row, m.col) == (n.frame, n.row, n.col))
            {
                return Err(Error::Config(format!("needle {i} duplicates an earlier needle")));
            }
        }
        Ok(())
    }

    /// `count` needles at distinct seeded positions, sorted by frame.
    pub fn scatter_needles(&self, count: usize, norm_boost: f64) -> Vec<Needle> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x6e65_6564_6c65);
        let g = self.geometry;
        let count = count.min(self.num_frames * g.tokens_per_frame());
        let mut out: Vec<Needle> = Vec::with_capacity(count);
        while out.len() < count {
            let n = Needle {
                frame: rng.random_range(0..self.num_frames),
                row: rng.random_range(0..g.grid_rows()),
                col: rng.random_range(0..g.grid_cols()),
                norm_boost,
            };
            if !out.iter().any(|m| (m.frame, m.row, m.col) == (n.frame, n.row, n.col)) {
                out.push(n);
            }
        }
        out.sort_by_key(|n| (n.frame, n.row, n.col));
        out
    }

    /// Stream position of a needle's token.
    pub fn needle_position(&self, needle: &Needle) -> u64 {
        let p = self.geometry.tokens_per_frame();
        (needle.frame * p + self.geometry.patch_index(needle.row, needle.col)) as u64
    }
}

/// A needle as actually emitted, including its per-layer unit keys.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedNeedle {
    pub needle: Needle,
    pub global_position: u64,
    /// `[layer][head * D + d]`, unit norm per head.
    pub unit_keys: Vec<Vec<f32>>,
}

/// Lazy frame iterator; draws are fully determined by the seed.
#[derive(Debug, Clone)]
pub struct StreamGen {
    spec: StreamSpec,
    rng: ChaCha8Rng,
    static_mask: Vec<bool>,
    // [layer][head][patch * D + d]
    key_base: Vec<Vec<Vec<f32>>>,
    value_base: Vec<Vec<Vec<f32>>>,
    prev_keys: Option<Vec<TensorF32>>,
    next_frame: usize,
    planted: Vec<PlantedNeedle>,
}

pub fn gen_stream(spec: &StreamSpec) -> Result<StreamGen> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let p = spec.geometry.tokens_per_frame();
    let n_static = (spec.static_fraction * p as f64).round() as usize;
    let mut patches: Vec<usize> = (0..p).collect();
    patches.shuffle(&mut rng);
    let mut static_mask = vec![false; p];
    for &q in &patches[..n_static] {
        static_mask[q] = true;
    }
    let (layers, heads, d) = (spec.dims.num_layers(), spec.dims.num_heads(), spec.dims.head_dim());
    let draw_bases = |rng: &mut ChaCha8Rng| -> Vec<Vec<Vec<f32>>> {
        (0..layers)
            .map(|_| (0..heads).map(|_| random_vec(rng, p * d, d)).collect())
            .collect()
    };
    let key_base = draw_bases(&mut rng);
    let value_base = draw_bases(&mut rng);
    Ok(StreamGen {
        spec: spec.clone(),
        rng,
        static_mask,
        key_base,
        value_base,
        prev_keys: None,
        next_frame: 0,
        planted: Vec::new(),
    })
}

/// `len` components of N(0, 1/dim), so each `dim`-vector has norm near 1.
fn random_vec(rng: &mut ChaCha8Rng, len: usize, dim: usize) -> Vec<f32> {
    let scale = 1.0 / (dim as f64).sqrt();
    (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            (z * scale) as f32
        })
        .collect()
}

fn unit(v: &[f64]) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 1e-12).then(|| v.iter().map(|x| x / n).collect())
}

/// Random unit vector orthogonal to every vector in `history`.
fn orthogonal_unit(rng: &mut ChaCha8Rng, history: &[&[f32]], dim: usize) -> Vec<f64> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for h in history {
        let mut v: Vec<f64> = h.iter().map(|&x| f64::from(x)).collect();
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
        if let Some(u) = unit(&v) {
            basis.push(u);
        }
    }
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
        if let Some(u) = unit(&v) {
            return u;
        }
    }
}

impl StreamGen {
    pub fn spec(&self) -> &StreamSpec {
        &self.spec
    }

    /// `true` for patches that repeat (with noise) across frames.
    pub fn static_mask(&self) -> &[bool] {
        &self.static_mask
    }

    /// Needles emitted so far, in frame order.
    pub fn planted(&self) -> &[PlantedNeedle] {
        &self.planted
    }

    fn make_frame(&mut self) -> Frame {
        let t = self.next_frame;
        let spec = &self.spec;
        let g = spec.geometry;
        let p = g.tokens_per_frame();
        let (heads, d) = (spec.dims.num_heads(), spec.dims.head_dim());
        let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
        let needles: Vec<Needle> = spec.needles.iter().filter(|n| n.frame == t).copied().collect();
        let mut planted: Vec<PlantedNeedle> = needles
            .iter()
            .map(|n| PlantedNeedle {
                needle: *n,
                global_position: spec.needle_position(n),
                unit_keys: Vec::new(),
            })
            .collect();

        let mut layers = Vec::with_capacity(spec.dims.num_layers());
        for l in 0..spec.dims.num_layers() {
            let mut keys = Vec::with_capacity(heads * p * d);
            let mut values = Vec::with_capacity(heads * p * d);
            let mut needle_keys = vec![Vec::with_capacity(heads * d); needles.len()];
            for h in 0..heads {
                for q in 0..p {
                    let span = q * d..(q + 1) * d;
                    let needle = needles
                        .iter()
                        .position(|n| g.patch_index(n.row, n.col) == q);
                    if let Some(i) = needle {
                        let mut history: Vec<&[f32]> = Vec::new();
                        if let Some(prev) = &self.prev_keys {
                            history.push(&prev[l].data()[(h * p + q) * d..(h * p + q + 1) * d]);
                        }
                        if self.static_mask[q] {
                            history.push(&self.key_base[l][h][span.clone()]);
                        }
                        let k = orthogonal_unit(&mut self.rng, &history, d);
                        let dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut self.rng)).collect();
                        let dir = unit(&dir).unwrap_or_else(|| {
                            let mut e = vec![0.0; d];
                            e[0] = 1.0;
                            e
                        });
                        let boost = needles[i].norm_boost;
                        keys.extend(k.iter().map(|&x| x as f32));
                        values.extend(dir.iter().map(|&x| (x * boost) as f32));
                        needle_keys[i].extend(k.iter().map(|&x| x as f32));
                    } else if self.static_mask[q] {
                        for j in span {
                            keys.push(self.key_base[l][h][j] + noise.sample(&mut self.rng) as f32);
                        }
                        for j in q * d..(q + 1) * d {
                            values.push(self.value_base[l][h][j] + noise.sample(&mut self.rng) as f32);
                        }
                    } else {
                        keys.extend(random_vec(&mut self.rng, d, d));
                        values.extend(random_vec(&mut self.rng, d, d));
                    }
                }
            }
            for (pn, k) in planted.iter_mut().zip(needle_keys) {
                pn.unit_keys.push(k);
            }
            let shape = vec![heads, p, d];
            layers.push(
                KvBlock::new(
                    TensorF32::new(shape.clone(), keys).expect("finite draws"),
                    TensorF32::new(shape, values).expect("finite draws"),
                )
                .expect("matching shapes"),
            );
        }
        self.prev_keys = Some(layers.iter().map(|b| b.keys.clone()).collect());
        self.planted.extend(planted);
        self.next_frame += 1;
        Frame { layers }
    }
}

impl Iterator for StreamGen {
    type Item = Frame;

    fn next(&mut self) -> Option<Frame> {
        (self.next_frame < self.spec.num_frames).then(|| self.make_frame())
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.spec.num_frames - self.next_frame;
        (left, Some(left))
    }
}

impl ExactSizeIterator for StreamGen {}

/// Needle survival and retrievability after a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeedleReport {
    pub needles_planted: usize,
    pub needles_retained: usize,
    pub retention_rate: f64,
    pub attention_mass_on_needles: f64,
}

/// Logit a query places on its own needle key.
pub const DEFAULT_QUERY_GAIN: f64 = 20.0;

/// Count needles resident in at least half the layers, and the attention
/// mass that needle-aligned queries place on surviving needle tokens.
///
/// One query row per needle, `gain * sqrt(D)` times its unit key, so the
/// pre-softmax logit on the needle itself is `gain`. Mass is averaged over
/// rows, heads and layers.
pub fn needle_recall(layers: &[LayerKv], planted: &[PlantedNeedle], gain: f64) -> Result<NeedleReport> {
    if planted.is_empty() {
        return Ok(NeedleReport {
            needles_planted: 0,
            needles_retained: 0,
            retention_rate: 1.0,
            attention_mass_on_needles: 0.0,
        });
    }
    let mut present = vec![0usize; planted.len()];
    let mut mass = 0.0;
    for (l, layer) in layers.iter().enumerate() {
        let slots: Vec<Option<usize>> = planted
            .iter()
            .map(|pn| {
                layer
                    .meta()
                    .binary_search_by_key(&pn.global_position, |m| m.global_position)
                    .ok()
            })
            .collect();
        for (c, s) in present.iter_mut().zip(&slots) {
            *c += usize::from(s.is_some());
        }
        if layer.is_empty() || slots.iter().all(Option::is_none) {
            continue;
        }
        let keys = layer.keys();
        let (heads, d, n) = (keys.num_heads(), keys.head_dim(), keys.tokens());
        let m = planted.len();
        let scale = (gain * (d as f64).sqrt()) as f32;
        let mut q = Vec::with_capacity(heads * m * d);
        for h in 0..heads {
            for pn in planted {
                q.extend(pn.unit_keys[l][h * d..(h + 1) * d].iter().map(|x| x * scale));
            }
        }
        let q = TensorF32::new(vec![heads, m, d], q)?;
        let (_, weights) = attention_forward(&q.heads()?, &keys, &layer.values())?;
        let w = weights.data();
        let mut layer_mass = 0.0;
        for h in 0..heads {
            for i in 0..m {
                let row = &w[(h * m + i) * n..(h * m + i + 1) * n];
                layer_mass += slots.iter().flatten().map(|&j| f64::from(row[j])).sum::<f64>();
            }
        }
        mass += layer_mass / (heads * m) as f64;
    }
    let need = layers.len().div_ceil(2);
    let retained = present.iter().filter(|&&c| c >= need && c > 0).count();
    Ok(NeedleReport {
        needles_planted: planted.len(),
        needles_retained: retained,
        retention_rate: retained as f64 / planted.len() as f64,
        attention_mass_on_needles: if layers.is_empty() {
            0.0
        } else {
            (mass / layers.len() as f64).clamp(0.0, 1.0)
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{BudgetConfig, BudgetParams, Engine, Policy};

    fn spec(seed: u64) -> StreamSpec {
        StreamSpec::new(
            10,
            FrameGeometry::new(4, 4).unwrap(),
            ModelDims::new(2, 2, 8).unwrap(),
            seed,
        )
    }

    fn bytes(frames: &[Frame]) -> Vec<u8> {
        frames
            .iter()
            .flat_map(|f| f.layers.iter())
            .flat_map(|b| b.keys.data().iter().chain(b.values.data()))
            .flat_map(|x| x.to_le_bytes())
            .collect()
    }

    #[test]
    fn same_seed_same_bytes() {
        let a: Vec<Frame> = gen_stream(&spec(3)).unwrap().collect();
        let b: Vec<Frame> = gen_stream(&spec(3)).unwrap().collect();
        let c: Vec<Frame> = gen_stream(&spec(4)).unwrap().collect();
        assert_eq!(a.len(), 10);
        assert_eq!(bytes(&a), bytes(&b));
        assert_ne!(bytes(&a), bytes(&c));
    }

    #[test]
    fn fully_static_noiseless_frames_repeat() {
        let mut s = spec(1);
        s.static_fraction = 1.0;
        s.noise_sigma = 0.0;
        let frames: Vec<Frame> = gen_stream(&s).unwrap().collect();
        for f in &frames[1..] {
            assert_eq!(f, &frames[0]);
        }
    }

    #[test]
    fn static_mask_has_requested_size() {
        let g = gen_stream(&spec(9)).unwrap();
        assert_eq!(g.static_mask().iter().filter(|&&s| s).count(), 12);
    }

    #[test]
    fn needle_value_norm_is_boosted() {
        let mut s = spec(11);
        s.needles = vec![Needle { frame: 7, row: 1, col: 2, norm_boost: 5.0 }];
        let mut gen = gen_stream(&s).unwrap();
        let frames: Vec<Frame> = gen.by_ref().collect();
        let q = s.geometry.patch_index(1, 2);
        let (heads, d) = (2, 8);
        let van = |f: &Frame, l: usize, q: usize| -> f64 {
            let v = f.layers[l].values.data();
            (0..heads)
                .flat_map(|h| v[(h * 16 + q) * d..(h * 16 + q + 1) * d].iter())
                .map(|&x| f64::from(x) * f64::from(x))
                .sum::<f64>()
                .sqrt()
        };
        for l in 0..2 {
            // Exact by construction: unit direction per head times the boost.
            assert!((van(&frames[7], l, q) - 5.0 * (heads as f64).sqrt()).abs() < 1e-5);
            let mut others: Vec<f64> = (0..16).filter(|&j| j != q).map(|j| van(&frames[7], l, j)).collect();
            others.sort_by(f64::total_cmp);
            let median = others[others.len() / 2];
            let ratio = van(&frames[7], l, q) / median;
            assert!((3.0..8.0).contains(&ratio), "ratio {ratio}");
        }
        assert_eq!(gen.planted().len(), 1);
        assert_eq!(gen.planted()[0].global_position, 7 * 16 + q as u64);
        // Orthogonal to the same patch one frame earlier.
        let k = &gen.planted()[0].unit_keys[0];
        let prev = frames[6].layers[0].keys.data();
        for h in 0..heads {
            let dotp: f32 = (0..d).map(|i| k[h * d + i] * prev[(h * 16 + q) * d + i]).sum();
            assert!(dotp.abs() < 1e-5);
        }
    }

    #[test]
    fn invalid_specs_are_config_errors() {
        let mut s = spec(0);
        s.static_fraction = 1.5;
        assert!(matches!(gen_stream(&s), Err(Error::Config(_))));
        let mut s = spec(0);
        s.needles = vec![Needle { frame: 10, row: 0, col: 0, norm_boost: 2.0 }];
        assert!(matches!(gen_stream(&s), Err(Error::Config(_))));
        s.needles = vec![Needle { frame: 1, row: 0, col: 0, norm_boost: 0.5 }];
        assert!(matches!(gen_stream(&s), Err(Error::Config(_))));
        s.needles = vec![Needle { frame: 1, row: 0, col: 4, norm_boost: 2.0 }];
        assert!(s.validate().is_err());
    }

    fn run(policy: Policy, s: &StreamSpec, m: usize, c: usize) -> (Engine, Vec<PlantedNeedle>) {
        let cfg = BudgetConfig::new(
            &BudgetParams::new(m).target_size(c).recent_frames(1).policy(policy),
            &s.geometry,
        )
        .unwrap();
        let mut e = Engine::new(cfg, s.geometry, s.dims).unwrap();
        let mut gen = gen_stream(s).unwrap();
        for f in gen.by_ref() {
            e.append_frame(&f).unwrap();
        }
        (e, gen.planted().to_vec())
    }

    #[test]
    fn recall_without_compression_is_total() {
        let mut s = spec(5);
        s.needles = vec![Needle { frame: 2, row: 0, col: 0, norm_boost: 4.0 }];
        let (e, planted) = run(Policy::InfinipotV, &s, 16 * 20, 16 * 10);
        assert_eq!(e.stats().compressions_performed, 0);
        let r = needle_recall(e.layers(), &planted, DEFAULT_QUERY_GAIN).unwrap();
        assert_eq!(r.retention_rate, 1.0);
        assert!(r.attention_mass_on_needles > 0.5, "{r:?}");
    }

    #[test]
    fn sliding_window_forgets_old_needles() {
        let mut s = spec(5);
        s.num_frames = 12;
        s.needles = vec![Needle { frame: 1, row: 0, col: 0, norm_boost: 4.0 }];
        let (e, planted) = run(Policy::SlidingWindow, &s, 16 * 4, 16 * 2);
        let r = needle_recall(e.layers(), &planted, DEFAULT_QUERY_GAIN).unwrap();
        assert_eq!(r.needles_retained, 0);
        assert_eq!(r.retention_rate, 0.0);
        assert_eq!(r.attention_mass_on_needles, 0.0);
    }

    #[test]
    fn recall_with_no_needles() {
        let r = needle_recall(&[], &[], DEFAULT_QUERY_GAIN).unwrap();
        assert_eq!(r.retention_rate, 1.0);
        assert_eq!(r.needles_planted, 0);
    }
}
