//! Dense tensors and the shape vocabulary shared by every module.
//!
//! Per-layer key and value tensors are laid out `[head][token][dim]`,
//! row-major. [`HeadsView`] borrows that layout whether the storage is a
//! single [`TensorF32`] or one growable buffer per head (as inside the cache).

use crate::error::{Error, Result};

/// Row-major `f32` tensor. Construction rejects non-finite entries so NaN and
/// Inf never reach scoring or selection.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorF32 {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl TensorF32 {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Domain(format!(
                "non-finite value {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Borrow a rank-3 `[H, N, D]` tensor as per-head slices.
    pub fn heads(&self) -> Result<HeadsView<'_>> {
        let &[h, n, d] = self.shape.as_slice() else {
            return Err(Error::Dimension(format!(
                "expected a rank-3 [heads, tokens, dim] tensor, got shape {:?}",
                self.shape
            )));
        };
        let heads = if n * d == 0 {
            vec![&self.data[..0]; h]
        } else {
            self.data.chunks_exact(n * d).collect()
        };
        HeadsView::new(heads, n, d)
    }
}

/// Borrowed `[H, N, D]` view: one contiguous `[N, D]` slice per head.
#[derive(Debug, Clone)]
pub struct HeadsView<'a> {
    heads: Vec<&'a [f32]>,
    tokens: usize,
    head_dim: usize,
}

impl<'a> HeadsView<'a> {
    pub fn new(heads: Vec<&'a [f32]>, tokens: usize, head_dim: usize) -> Result<Self> {
        if heads.is_empty() || head_dim == 0 {
            return Err(Error::Dimension(
                "a heads view needs at least one head and head_dim >= 1".into(),
            ));
        }
        if let Some(bad) = heads.iter().find(|h| h.len() != tokens * head_dim) {
            return Err(Error::Dimension(format!(
                "head slice has {} elements, expected {tokens}x{head_dim}",
                bad.len()
            )));
        }
        Ok(Self {
            heads,
            tokens,
            head_dim,
        })
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn head(&self, h: usize) -> &'a [f32] {
        self.heads[h]
    }

    /// The `D`-vector of token `n` in head `h`.
    #[inline]
    pub fn vector(&self, h: usize, n: usize) -> &'a [f32] {
        &self.heads[h][n * self.head_dim..(n + 1) * self.head_dim]
    }

    /// Copy into an owned `[H, N, D]` tensor.
    pub fn to_tensor(&self) -> TensorF32 {
        let mut data = Vec::with_capacity(self.heads.len() * self.tokens * self.head_dim);
        for h in &self.heads {
            data.extend_from_slice(h);
        }
        TensorF32 {
            shape: vec![self.heads.len(), self.tokens, self.head_dim],
            data,
        }
    }
}

/// Spatial layout of the `p` vision tokens of one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FrameGeometry {
    tokens_per_frame: usize,
    grid_rows: usize,
    grid_cols: usize,
}

impl FrameGeometry {
    pub fn new(grid_rows: usize, grid_cols: usize) -> Result<Self> {
        if grid_rows == 0 || grid_cols == 0 {
            return Err(Error::Geometry(format!(
                "grid {grid_rows}x{grid_cols} must be at least 1x1"
            )));
        }
        Ok(Self {
            tokens_per_frame: grid_rows * grid_cols,
            grid_rows,
            grid_cols,
        })
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.tokens_per_frame
    }

    pub fn grid_rows(&self) -> usize {
        self.grid_rows
    }

    pub fn grid_cols(&self) -> usize {
        self.grid_cols
    }

    /// Flat in-frame index of patch `(row, col)`.
    #[inline]
    pub fn patch_index(&self, row: usize, col: usize) -> usize {
        row * self.grid_cols + col
    }

    #[inline]
    pub fn patch_coords(&self, patch: usize) -> (usize, usize) {
        (patch / self.grid_cols, patch % self.grid_cols)
    }

    /// Number of whole frames in `tokens`, or a geometry error if it is ragged.
    pub fn whole_frames(&self, tokens: usize) -> Result<usize> {
        if !tokens.is_multiple_of(self.tokens_per_frame) {
            return Err(Error::Geometry(format!(
                "{tokens} tokens is not a whole number of {}-token frames",
                self.tokens_per_frame
            )));
        }
        Ok(tokens / self.tokens_per_frame)
    }
}

/// Transformer shape: layers, KV heads per layer, per-head dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelDims {
    num_layers: usize,
    num_heads: usize,
    head_dim: usize,
}

impl ModelDims {
    pub fn new(num_layers: usize, num_heads: usize, head_dim: usize) -> Result<Self> {
        if num_layers == 0 || num_heads == 0 || head_dim == 0 {
            return Err(Error::Config(format!(
                "model dims must all be >= 1 (layers={num_layers}, heads={num_heads}, head_dim={head_dim})"
            )));
        }
        Ok(Self {
            num_layers,
            num_heads,
            head_dim,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }
}

/// Keys and values of one layer for a block of tokens, each `[H, n, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KvBlock {
    pub keys: TensorF32,
    pub values: TensorF32,
}

impl KvBlock {
    pub fn new(keys: TensorF32, values: TensorF32) -> Result<Self> {
        if keys.shape().len() != 3 || keys.shape() != values.shape() {
            return Err(Error::Dimension(format!(
                "key shape {:?} and value shape {:?} must be equal and rank 3",
                keys.shape(),
                values.shape()
            )));
        }
        Ok(Self { keys, values })
    }

    pub fn tokens(&self) -> usize {
        self.keys.shape()[1]
    }
}

/// One video frame's worth of KV, one block per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub layers: Vec<KvBlock>,
}

impl Frame {
    /// Check that every block is `[H, p, D]` for the given model and geometry.
    pub fn validate(&self, dims: &ModelDims, geometry: &FrameGeometry) -> Result<()> {
        if self.layers.len() != dims.num_layers() {
            return Err(Error::Dimension(format!(
                "frame has {} layers, model has {}",
                self.layers.len(),
                dims.num_layers()
            )));
        }
        for (l, block) in self.layers.iter().enumerate() {
            let shape = block.keys.shape();
            if shape.len() != 3 || block.values.shape() != shape {
                return Err(Error::Dimension(format!(
                    "layer {l}: key/value shapes {:?} / {:?} disagree",
                    shape,
                    block.values.shape()
                )));
            }
            if shape[0] != dims.num_heads() || shape[2] != dims.head_dim() {
                return Err(Error::Dimension(format!(
                    "layer {l}: block shape {shape:?} does not match {} heads x {} dims",
                    dims.num_heads(),
                    dims.head_dim()
                )));
            }
            if shape[1] != geometry.tokens_per_frame() {
                return Err(Error::Geometry(format!(
                    "layer {l}: partial frame of {} tokens, expected {}",
                    shape[1],
                    geometry.tokens_per_frame()
                )));
            }
        }
        Ok(())
    }
}
