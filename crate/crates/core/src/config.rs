//! Plain `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Budget keys: `memory_budget`,
//! `target_size`, `recent_frames`, `alpha`, `tau1`, `tau2`, `tau3`,
//! `policy`. Stream keys: `num_frames`, `grid_rows`, `grid_cols`,
//! `num_layers`, `num_heads`, `head_dim`, `static_fraction`, `noise_sigma`,
//! `needles` (comma list of `frame:row:col:boost`), `seed`.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::engine::{BudgetConfig, BudgetParams, Policy};
use crate::error::{Error, Result};
use crate::harness::{Needle, StreamSpec};
use crate::scoring::PoolingConfig;

/// Every field optional; absent keys leave the caller's defaults alone.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    pub memory_budget: Option<usize>,
    pub target_size: Option<usize>,
    pub recent_frames: Option<usize>,
    pub alpha: Option<f64>,
    pub tau: [Option<f64>; 3],
    pub policy: Option<Policy>,
    pub num_frames: Option<usize>,
    pub grid_rows: Option<usize>,
    pub grid_cols: Option<usize>,
    pub num_layers: Option<usize>,
    pub num_heads: Option<usize>,
    pub head_dim: Option<usize>,
    pub static_fraction: Option<f64>,
    pub noise_sigma: Option<f64>,
    pub needles: Option<Vec<Needle>>,
    pub seed: Option<u64>,
}

fn parse_value<T: FromStr>(key: &str, raw: &str, line: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.parse()
        .map_err(|e| Error::Config(format!("line {line}: bad value {raw:?} for {key}: {e}")))
}

/// Parse `frame:row:col:boost[,frame:row:col:boost...]`.
pub fn parse_needles(raw: &str) -> Result<Vec<Needle>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let parts: Vec<&str> = item.split(':').collect();
            let bad = || Error::Config(format!("needle {item:?} is not frame:row:col:boost"));
            if parts.len() != 4 {
                return Err(bad());
            }
            Ok(Needle {
                frame: parts[0].parse().map_err(|_| bad())?,
                row: parts[1].parse().map_err(|_| bad())?,
                col: parts[2].parse().map_err(|_| bad())?,
                norm_boost: parts[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub fn format_needles(needles: &[Needle]) -> String {
    needles
        .iter()
        .map(|n| format!("{}:{}:{}:{}", n.frame, n.row, n.col, n.norm_boost))
        .collect::<Vec<_>>()
        .join(",")
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line}: expected key = value")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {line}: duplicate key {key}")));
            }
            match key {
                "memory_budget" => cfg.memory_budget = Some(parse_value(key, value, line)?),
                "target_size" => cfg.target_size = Some(parse_value(key, value, line)?),
                "recent_frames" => cfg.recent_frames = Some(parse_value(key, value, line)?),
                "alpha" => cfg.alpha = Some(parse_value(key, value, line)?),
                "tau1" => cfg.tau[0] = Some(parse_value(key, value, line)?),
                "tau2" => cfg.tau[1] = Some(parse_value(key, value, line)?),
                "tau3" => cfg.tau[2] = Some(parse_value(key, value, line)?),
                "policy" => cfg.policy = Some(value.parse()?),
                "num_frames" => cfg.num_frames = Some(parse_value(key, value, line)?),
                "grid_rows" => cfg.grid_rows = Some(parse_value(key, value, line)?),
                "grid_cols" => cfg.grid_cols = Some(parse_value(key, value, line)?),
                "num_layers" => cfg.num_layers = Some(parse_value(key, value, line)?),
                "num_heads" => cfg.num_heads = Some(parse_value(key, value, line)?),
                "head_dim" => cfg.head_dim = Some(parse_value(key, value, line)?),
                "static_fraction" => cfg.static_fraction = Some(parse_value(key, value, line)?),
                "noise_sigma" => cfg.noise_sigma = Some(parse_value(key, value, line)?),
                "needles" => cfg.needles = Some(parse_needles(value)?),
                "seed" => cfg.seed = Some(parse_value(key, value, line)?),
                other => return Err(Error::Config(format!("line {line}: unknown key {other}"))),
            }
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Overlay the budget keys onto `params`.
    pub fn apply_budget(&self, params: &mut BudgetParams) -> Result<()> {
        if let Some(m) = self.memory_budget {
            params.memory_budget = m;
        }
        if self.target_size.is_some() {
            params.target_size = self.target_size;
        }
        if self.recent_frames.is_some() {
            params.recent_frames = self.recent_frames;
        }
        if let Some(a) = self.alpha {
            params.alpha = a;
        }
        if let Some(p) = self.policy {
            params.policy = p;
        }
        if let Some(pooling) = self.pooling(&params.pooling)? {
            params.pooling = pooling;
        }
        Ok(())
    }

    /// Thresholds with unset taus taken from `base`; `None` if no tau is set.
    pub fn pooling(&self, base: &PoolingConfig) -> Result<Option<PoolingConfig>> {
        if self.tau.iter().all(Option::is_none) {
            return Ok(None);
        }
        let b = base.thresholds();
        PoolingConfig::new(
            self.tau[0].unwrap_or(b[0]),
            self.tau[1].unwrap_or(b[1]),
            self.tau[2].unwrap_or(b[2]),
        )
        .map(Some)
    }

    /// Overlay the stream keys onto `spec`.
    pub fn apply_stream(&self, spec: &mut StreamSpec) -> Result<()> {
        if let Some(n) = self.num_frames {
            spec.num_frames = n;
        }
        if self.grid_rows.is_some() || self.grid_cols.is_some() {
            spec.geometry = crate::tensor::FrameGeometry::new(
                self.grid_rows.unwrap_or(spec.geometry.grid_rows()),
                self.grid_cols.unwrap_or(spec.geometry.grid_cols()),
            )?;
        }
        if self.num_layers.is_some() || self.num_heads.is_some() || self.head_dim.is_some() {
            spec.dims = crate::tensor::ModelDims::new(
                self.num_layers.unwrap_or(spec.dims.num_layers()),
                self.num_heads.unwrap_or(spec.dims.num_heads()),
                self.head_dim.unwrap_or(spec.dims.head_dim()),
            )?;
        }
        if let Some(s) = self.static_fraction {
            spec.static_fraction = s;
        }
        if let Some(s) = self.noise_sigma {
            spec.noise_sigma = s;
        }
        if let Some(n) = &self.needles {
            spec.needles = n.clone();
        }
        if let Some(s) = self.seed {
            spec.seed = s;
        }
        Ok(())
    }

    pub fn from_budget(config: &BudgetConfig) -> Self {
        let t = config.pooling().thresholds();
        Self {
            memory_budget: Some(config.memory_budget()),
            target_size: Some(config.target_size()),
            recent_frames: Some(config.recent_frames()),
            alpha: Some(config.alpha()),
            tau: [Some(t[0]), Some(t[1]), Some(t[2])],
            policy: Some(config.policy()),
            ..Self::default()
        }
    }

    pub fn from_pooling(pooling: &PoolingConfig) -> Self {
        let t = pooling.thresholds();
        Self {
            tau: [Some(t[0]), Some(t[1]), Some(t[2])],
            ..Self::default()
        }
    }

    pub fn from_stream(spec: &StreamSpec) -> Self {
        Self {
            num_frames: Some(spec.num_frames),
            grid_rows: Some(spec.geometry.grid_rows()),
            grid_cols: Some(spec.geometry.grid_cols()),
            num_layers: Some(spec.dims.num_layers()),
            num_heads: Some(spec.dims.num_heads()),
            head_dim: Some(spec.dims.head_dim()),
            static_fraction: Some(spec.static_fraction),
            noise_sigma: Some(spec.noise_sigma),
            needles: Some(spec.needles.clone()),
            seed: Some(spec.seed),
            ..Self::default()
        }
    }

    /// Serialize set keys in a fixed order. Floats use the shortest
    /// round-tripping representation.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                let _ = writeln!(out, "{k} = {v}");
            }
        };
        put("memory_budget", self.memory_budget.map(|v| v.to_string()));
        put("target_size", self.target_size.map(|v| v.to_string()));
        put("recent_frames", self.recent_frames.map(|v| v.to_string()));
        put("alpha", self.alpha.map(|v| v.to_string()));
        put("tau1", self.tau[0].map(|v| v.to_string()));
        put("tau2", self.tau[1].map(|v| v.to_string()));
        put("tau3", self.tau[2].map(|v| v.to_string()));
        put("policy", self.policy.map(|v| v.to_string()));
        put("num_frames", self.num_frames.map(|v| v.to_string()));
        put("grid_rows", self.grid_rows.map(|v| v.to_string()));
        put("grid_cols", self.grid_cols.map(|v| v.to_string()));
        put("num_layers", self.num_layers.map(|v| v.to_string()));
        put("num_heads", self.num_heads.map(|v| v.to_string()));
        put("head_dim", self.head_dim.map(|v| v.to_string()));
        put("static_fraction", self.static_fraction.map(|v| v.to_string()));
        put("noise_sigma", self.noise_sigma.map(|v| v.to_string()));
        put("needles", self.needles.as_deref().map(format_needles));
        put("seed", self.seed.map(|v| v.to_string()));
        out
    }
}
