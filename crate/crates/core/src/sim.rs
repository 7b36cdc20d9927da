//! Policy runs over generated or recorded streams, and their reports.
//!
//! Report bodies (everything except wall-clock timings) are a pure function
//! of the inputs; timings live in a separate section.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::{BudgetConfig, BudgetParams, Engine, EngineOptions, Policy};
use crate::error::{Error, Result};
use crate::harness::{gen_stream, needle_recall, Needle, PlantedNeedle, StreamSpec, DEFAULT_QUERY_GAIN};
use crate::tensor::{Frame, FrameGeometry, ModelDims};
use crate::trace::read_trace;

pub const SCHEMA_VERSION: u32 = 1;

/// Ground truth used for metrics: which patches are static, where needles sit.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Labels {
    pub static_mask: Option<Vec<bool>>,
    pub needles: Vec<Needle>,
}

impl Labels {
    pub fn from_spec(spec: &StreamSpec) -> Result<Self> {
        Ok(Self {
            static_mask: Some(gen_stream(spec)?.static_mask().to_vec()),
            needles: spec.needles.clone(),
        })
    }
}

/// Per-policy outcome, excluding timings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyMetrics {
    pub policy: Policy,
    pub memory_budget: usize,
    pub target_size: usize,
    pub recent_frames: usize,
    pub frames: u64,
    pub tokens_appended: u64,
    pub peak_tokens: usize,
    pub final_tokens: usize,
    pub compressions: u64,
    pub tokens_evicted: u64,
    pub needles_planted: usize,
    pub needles_retained: usize,
    pub needle_retention: f64,
    pub needle_attention_mass: f64,
    /// Share of evicted tokens that came from static patches.
    pub static_eviction_precision: Option<f64>,
    /// Share of static tokens present at a compression that it evicted.
    pub static_eviction_recall: Option<f64>,
    /// SHA-256 over every compression's per-layer survivor positions.
    pub survivor_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTimings {
    pub policy: Policy,
    pub time_append_s: f64,
    pub time_compress_s: f64,
    pub overhead_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamEcho {
    pub num_frames: u64,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub static_fraction: Option<f64>,
    pub noise_sigma: Option<f64>,
    pub seed: Option<u64>,
    pub needles: Vec<Needle>,
}

impl StreamEcho {
    fn new(num_frames: u64, geometry: &FrameGeometry, dims: &ModelDims, spec: Option<&StreamSpec>) -> Self {
        Self {
            num_frames,
            grid_rows: geometry.grid_rows(),
            grid_cols: geometry.grid_cols(),
            num_layers: dims.num_layers(),
            num_heads: dims.num_heads(),
            head_dim: dims.head_dim(),
            static_fraction: spec.map(|s| s.static_fraction),
            noise_sigma: spec.map(|s| s.noise_sigma),
            seed: spec.map(|s| s.seed),
            needles: spec.map(|s| s.needles.clone()).unwrap_or_default(),
        }
    }
}

/// The requested (not effective) budget knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub memory_budget: usize,
    pub target_size: Option<usize>,
    pub recent_frames: Option<usize>,
    pub alpha: f64,
    pub tau: [f64; 3],
    pub policies: Vec<Policy>,
    pub stream: StreamEcho,
}

impl ConfigEcho {
    fn new(budget: &BudgetParams, policies: &[Policy], stream: StreamEcho) -> Self {
        Self {
            memory_budget: budget.memory_budget,
            target_size: budget.target_size,
            recent_frames: budget.recent_frames,
            alpha: budget.alpha,
            tau: budget.pooling.thresholds(),
            policies: policies.to_vec(),
            stream,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub config: ConfigEcho,
    pub policies: Vec<PolicyMetrics>,
    pub timings: Vec<PolicyTimings>,
}

#[derive(Serialize)]
struct ReportBody<'a> {
    schema_version: u32,
    config: &'a ConfigEcho,
    policies: &'a [PolicyMetrics],
}

/// One flat CSV line per policy: metrics followed by timings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCsvRow {
    pub schema_version: u32,
    pub policy: Policy,
    pub memory_budget: usize,
    pub target_size: usize,
    pub recent_frames: usize,
    pub frames: u64,
    pub tokens_appended: u64,
    pub peak_tokens: usize,
    pub final_tokens: usize,
    pub compressions: u64,
    pub tokens_evicted: u64,
    pub needles_planted: usize,
    pub needles_retained: usize,
    pub needle_retention: f64,
    pub needle_attention_mass: f64,
    pub static_eviction_precision: Option<f64>,
    pub static_eviction_recall: Option<f64>,
    pub survivor_digest: String,
    pub time_append_s: f64,
    pub time_compress_s: f64,
    pub overhead_ratio: f64,
}

fn format_err(e: impl std::fmt::Display) -> Error {
    Error::Format(format!("report: {e}"))
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// JSON without timings; byte-identical across identical runs.
    pub fn body_json(&self) -> String {
        serde_json::to_string_pretty(&ReportBody {
            schema_version: self.schema_version,
            config: &self.config,
            policies: &self.policies,
        })
        .expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(format_err)
    }

    pub fn csv_rows(&self) -> Vec<ReportCsvRow> {
        self.policies
            .iter()
            .zip(&self.timings)
            .map(|(m, t)| ReportCsvRow {
                schema_version: self.schema_version,
                policy: m.policy,
                memory_budget: m.memory_budget,
                target_size: m.target_size,
                recent_frames: m.recent_frames,
                frames: m.frames,
                tokens_appended: m.tokens_appended,
                peak_tokens: m.peak_tokens,
                final_tokens: m.final_tokens,
                compressions: m.compressions,
                tokens_evicted: m.tokens_evicted,
                needles_planted: m.needles_planted,
                needles_retained: m.needles_retained,
                needle_retention: m.needle_retention,
                needle_attention_mass: m.needle_attention_mass,
                static_eviction_precision: m.static_eviction_precision,
                static_eviction_recall: m.static_eviction_recall,
                survivor_digest: m.survivor_digest.clone(),
                time_append_s: t.time_append_s,
                time_compress_s: t.time_compress_s,
                overhead_ratio: t.overhead_ratio,
            })
            .collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        to_csv(&self.csv_rows())
    }
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(format_err)?;
    }
    let bytes = w.into_inner().map_err(format_err)?;
    String::from_utf8(bytes).map_err(format_err)
}

pub fn from_csv<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(format_err))
        .collect()
}

/// Everything one engine run produced.
#[derive(Debug)]
pub struct PolicyRun {
    pub metrics: PolicyMetrics,
    pub timings: PolicyTimings,
    /// `[compression][layer]` survivor global positions.
    pub survivor_log: Vec<Vec<Vec<u64>>>,
    pub engine: Engine,
}

fn unit_keys(frame: &Frame, patch: usize, p: usize, dims: &ModelDims) -> Vec<Vec<f32>> {
    let d = dims.head_dim();
    frame
        .layers
        .iter()
        .map(|block| {
            let data = block.keys.data();
            (0..dims.num_heads())
                .flat_map(|h| {
                    let k = &data[(h * p + patch) * d..(h * p + patch + 1) * d];
                    let norm = k.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
                    let scale = if norm > 0.0 { 1.0 / norm } else { 0.0 };
                    k.iter().map(move |&x| (f64::from(x) * scale) as f32)
                })
                .collect()
        })
        .collect()
}

/// Drive one engine over `frames`, tracking survivors and eviction labels.
pub fn run_policy(
    frames: impl IntoIterator<Item = Result<Frame>>,
    config: BudgetConfig,
    geometry: FrameGeometry,
    dims: ModelDims,
    options: EngineOptions,
    labels: &Labels,
) -> Result<PolicyRun> {
    let p = geometry.tokens_per_frame();
    let mut engine = Engine::with_options(config, geometry, dims, options)?;
    let mut planted: Vec<PlantedNeedle> = Vec::new();
    let mut hasher = Sha256::new();
    let mut log = Vec::new();
    let (mut evicted, mut evicted_static, mut static_seen) = (0u64, 0u64, 0u64);

    for (t, frame) in frames.into_iter().enumerate() {
        let frame = frame?;
        for n in labels.needles.iter().filter(|n| n.frame == t) {
            let patch = geometry.patch_index(n.row, n.col);
            planted.push(PlantedNeedle {
                needle: *n,
                global_position: (t * p + patch) as u64,
                unit_keys: unit_keys(&frame, patch, p, &dims),
            });
        }
        if !engine.append_frame(&frame)?.compressed {
            continue;
        }
        let record = engine.last_compression().expect("compression just ran");
        let mut survivors = Vec::with_capacity(dims.num_layers());
        for (l, (sel, pre)) in record.selections.iter().zip(&record.pre_meta).enumerate() {
            let mut kept = vec![false; pre.len()];
            for &i in &sel.indices {
                kept[i] = true;
            }
            for (meta, &k) in pre.iter().zip(&kept) {
                let is_static = labels.static_mask.as_ref().map(|m| {
                    m[geometry.patch_index(meta.patch_row as usize, meta.patch_col as usize)]
                });
                if is_static == Some(true) {
                    static_seen += 1;
                }
                if !k {
                    evicted += 1;
                    if is_static == Some(true) {
                        evicted_static += 1;
                    }
                }
            }
            let positions: Vec<u64> = engine.layers()[l].meta().iter().map(|m| m.global_position).collect();
            hasher.update((log.len() as u64).to_le_bytes());
            hasher.update((l as u64).to_le_bytes());
            hasher.update((positions.len() as u64).to_le_bytes());
            for pos in &positions {
                hasher.update(pos.to_le_bytes());
            }
            survivors.push(positions);
        }
        log.push(survivors);
    }

    let stats = engine.stats();
    let report = needle_recall(engine.layers(), &planted, DEFAULT_QUERY_GAIN)?;
    let has_mask = labels.static_mask.is_some();
    let ratio = |num: u64, den: u64| (has_mask && den > 0).then(|| num as f64 / den as f64);
    let cfg = engine.config();
    let metrics = PolicyMetrics {
        policy: cfg.policy(),
        memory_budget: cfg.memory_budget(),
        target_size: cfg.target_size(),
        recent_frames: cfg.recent_frames(),
        frames: engine.frames_seen(),
        tokens_appended: stats.tokens_appended,
        peak_tokens: stats.peak_tokens_per_layer,
        final_tokens: stats.current_tokens_per_layer,
        compressions: stats.compressions_performed,
        tokens_evicted: stats.tokens_evicted,
        needles_planted: report.needles_planted,
        needles_retained: report.needles_retained,
        needle_retention: report.retention_rate,
        needle_attention_mass: report.attention_mass_on_needles,
        static_eviction_precision: ratio(evicted_static, evicted),
        static_eviction_recall: ratio(evicted_static, static_seen),
        survivor_digest: hex::encode(hasher.finalize()),
    };
    let timings = PolicyTimings {
        policy: cfg.policy(),
        time_append_s: stats.time_append.as_secs_f64(),
        time_compress_s: stats.time_compress.as_secs_f64(),
        overhead_ratio: stats.overhead_ratio(),
    };
    Ok(PolicyRun {
        metrics,
        timings,
        survivor_log: log,
        engine,
    })
}

fn assemble(runs: Vec<PolicyRun>, config: ConfigEcho) -> RunReport {
    let (policies, timings) = runs.into_iter().map(|r| (r.metrics, r.timings)).unzip();
    RunReport {
        schema_version: SCHEMA_VERSION,
        config,
        policies,
        timings,
    }
}

/// Run each policy over a freshly generated copy of `spec`'s stream.
pub fn simulate(
    spec: &StreamSpec,
    budget: &BudgetParams,
    policies: &[Policy],
    options: EngineOptions,
) -> Result<RunReport> {
    let labels = Labels::from_spec(spec)?;
    let runs = policies
        .iter()
        .map(|&policy| {
            let config = BudgetConfig::new(&budget.clone().policy(policy), &spec.geometry)?;
            run_policy(gen_stream(spec)?.map(Ok), config, spec.geometry, spec.dims, options, &labels)
        })
        .collect::<Result<Vec<_>>>()?;
    let echo = StreamEcho::new(spec.num_frames as u64, &spec.geometry, &spec.dims, Some(spec));
    Ok(assemble(runs, ConfigEcho::new(budget, policies, echo)))
}

/// Run each policy over the frames of a KVTR trace. `labels_spec`, when
/// given, supplies static-patch and needle ground truth and must agree
/// with the trace header.
pub fn replay(
    path: &Path,
    budget: &BudgetParams,
    policies: &[Policy],
    options: EngineOptions,
    labels_spec: Option<&StreamSpec>,
) -> Result<RunReport> {
    let header = *read_trace(path)?.header();
    let dims = header.dims()?;
    let geometry = header.geometry()?;
    let labels = match labels_spec {
        Some(spec) => {
            if spec.dims != dims || spec.geometry != geometry {
                return Err(Error::Dimension(format!(
                    "stream flags {:?}/{:?} disagree with the trace header {:?}/{:?}",
                    spec.dims, spec.geometry, dims, geometry
                )));
            }
            Labels::from_spec(spec)?
        }
        None => Labels::default(),
    };
    let runs = policies
        .iter()
        .map(|&policy| {
            let config = BudgetConfig::new(&budget.clone().policy(policy), &geometry)?;
            run_policy(read_trace(path)?, config, geometry, dims, options, &labels)
        })
        .collect::<Result<Vec<_>>>()?;
    let echo = StreamEcho::new(header.num_frames, &geometry, &dims, labels_spec);
    Ok(assemble(runs, ConfigEcho::new(budget, policies, echo)))
}

/// Axes of the ablation sweep. `recent` is a fraction of `f = M / p`,
/// `ratio` is `C / M`.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationGrid {
    pub alpha: Vec<f64>,
    pub recent: Vec<f64>,
    pub ratio: Vec<f64>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        Self {
            alpha: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            recent: vec![0.125, 0.25, 0.5],
            ratio: vec![0.75, 0.5, 0.25],
        }
    }
}

impl AblationGrid {
    /// Parse `axis=v1,v2,...` items; unspecified axes keep their defaults.
    pub fn parse<S: AsRef<str>>(items: &[S]) -> Result<Self> {
        let mut grid = Self::default();
        for item in items {
            let item = item.as_ref();
            let (axis, values) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("grid item {item:?} is not axis=v1,v2,...")))?;
            let values = values
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .ok()
                        .filter(|x| x.is_finite())
                        .ok_or_else(|| Error::Config(format!("bad grid value {v:?} in {item:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            match axis.trim() {
                "alpha" => grid.alpha = values,
                "recent" => grid.recent = values,
                "ratio" => grid.ratio = values,
                other => return Err(Error::Config(format!("unknown grid axis {other:?}"))),
            }
        }
        Ok(grid)
    }

    pub fn cells(&self) -> Vec<(f64, f64, f64)> {
        let mut out = Vec::new();
        for &a in &self.alpha {
            for &r in &self.recent {
                for &c in &self.ratio {
                    out.push((a, r, c));
                }
            }
        }
        out
    }
}

/// One ablation cell under one seed. Infeasible cells carry
/// `status = "skipped"` and the violated constraint in `reason`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub alpha: f64,
    pub recent_fraction: f64,
    pub ratio: f64,
    pub seed: u64,
    pub status: String,
    pub reason: String,
    pub memory_budget: usize,
    pub target_size: Option<usize>,
    pub recent_frames: Option<usize>,
    pub compressions: Option<u64>,
    pub needle_retention: Option<f64>,
    pub needle_attention_mass: Option<f64>,
    pub static_eviction_precision: Option<f64>,
    pub static_eviction_recall: Option<f64>,
    pub survivor_digest: Option<String>,
}

/// Budget parameters for one grid cell on top of `base`.
pub fn cell_params(base: &BudgetParams, geometry: &FrameGeometry, alpha: f64, recent: f64, ratio: f64) -> BudgetParams {
    let p = geometry.tokens_per_frame();
    let m = base.memory_budget / p * p;
    let frames = m / p;
    let r = ((recent * frames as f64).floor() as usize).max(1);
    let c = (ratio * m as f64 + 1e-9).floor() as usize;
    BudgetParams {
        memory_budget: m,
        target_size: Some(c),
        recent_frames: Some(r),
        alpha,
        policy: Policy::InfinipotV,
        ..base.clone()
    }
}

fn ablation_cell(
    spec: &StreamSpec,
    base: &BudgetParams,
    (alpha, recent, ratio): (f64, f64, f64),
    seed: u64,
    options: EngineOptions,
) -> Result<AblationRow> {
    let params = cell_params(base, &spec.geometry, alpha, recent, ratio);
    let mut row = AblationRow {
        alpha,
        recent_fraction: recent,
        ratio,
        seed,
        status: "ok".into(),
        reason: String::new(),
        memory_budget: params.memory_budget,
        target_size: None,
        recent_frames: None,
        compressions: None,
        needle_retention: None,
        needle_attention_mass: None,
        static_eviction_precision: None,
        static_eviction_recall: None,
        survivor_digest: None,
    };
    let config = match BudgetConfig::new(&params, &spec.geometry) {
        Ok(c) => c,
        Err(Error::Config(reason)) => {
            row.status = "skipped".into();
            row.reason = reason;
            row.target_size = params.target_size;
            row.recent_frames = params.recent_frames;
            return Ok(row);
        }
        Err(e) => return Err(e),
    };
    let spec = StreamSpec {
        seed,
        ..spec.clone()
    };
    let labels = Labels::from_spec(&spec)?;
    let run = run_policy(gen_stream(&spec)?.map(Ok), config, spec.geometry, spec.dims, options, &labels)?;
    let m = run.metrics;
    row.target_size = Some(m.target_size);
    row.recent_frames = Some(m.recent_frames);
    row.compressions = Some(m.compressions);
    row.needle_retention = Some(m.needle_retention);
    row.needle_attention_mass = Some(m.needle_attention_mass);
    row.static_eviction_precision = m.static_eviction_precision;
    row.static_eviction_recall = m.static_eviction_recall;
    row.survivor_digest = Some(m.survivor_digest);
    Ok(row)
}

/// Every grid cell under seeds `spec.seed .. spec.seed + seeds`, in
/// cell-major order. Cells run on the rayon pool when `options.parallel`.
pub fn ablate(
    spec: &StreamSpec,
    base: &BudgetParams,
    grid: &AblationGrid,
    seeds: u64,
    options: EngineOptions,
) -> Result<Vec<AblationRow>> {
    spec.validate()?;
    let jobs: Vec<((f64, f64, f64), u64)> = grid
        .cells()
        .into_iter()
        .flat_map(|cell| (0..seeds).map(move |s| (cell, spec.seed + s)))
        .collect();
    let inner = EngineOptions {
        parallel: false,
        ..options
    };
    #[cfg(feature = "parallel")]
    if options.parallel {
        use rayon::prelude::*;
        return jobs
            .par_iter()
            .map(|&(cell, seed)| ablation_cell(spec, base, cell, seed, inner))
            .collect();
    }
    jobs.iter()
        .map(|&(cell, seed)| ablation_cell(spec, base, cell, seed, inner))
        .collect()
}
