//! Bounded-memory KV cache compression for streaming video.
//!
//! Frames of per-layer key/value blocks are appended to an [`Engine`]; once
//! the cache reaches its memory budget it is compressed in place by scoring
//! tokens for temporal redundancy (TaR) and value-norm saliency (VaN).

pub mod attention;
pub mod baselines;
pub mod config;
pub mod engine;
pub mod error;
pub mod harness;
pub mod kernels;
pub mod scoring;
pub mod sim;
pub mod tensor;
pub mod trace;

pub use attention::{attention_forward, attention_output, Mask};
pub use engine::{
    AppendOutcome, BudgetConfig, BudgetParams, CompressionRecord, CompressionStats, Engine,
    EngineOptions, LayerKv, Policy, TokenMeta,
};
pub use error::{Error, Result};
pub use scoring::{PoolingConfig, Provenance, ScoreMap, SelectionResult};
pub use tensor::{Frame, FrameGeometry, HeadsView, KvBlock, ModelDims, TensorF32};
