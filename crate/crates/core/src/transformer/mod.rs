//! Region transformer: feature tokens with a class token, a mask token and
//! zero padding, a learned 2-D positional table, pre-norm self-attention
//! blocks, a masked-feature reconstruction head and a slide-level head over
//! averaged class tokens.
//!
//! A region becomes a sequence of `1 + N` tokens: index 0 is the class
//! token, index `1 + i` is grid slot `i` of the [`FeatureBundle`]. Padding
//! slots carry zero content and are removed from every attention row by an
//! additive `-inf` mask.

mod mask;
mod model;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureBundle;
use crate::tensor::TensorError;

pub use mask::apply_mask;
pub use model::{classify_slide, AttentionTrace, Encoded, EndoNet, SlideLogits};

#[derive(Debug, Error)]
pub enum TransformerError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("feature dimension {got} does not match the encoder ({expected})")]
    DimMismatch { expected: usize, got: usize },
    #[error("slot ({row}, {col}) lies outside the {rows}x{cols} grid")]
    GridMismatch { row: u16, col: u16, rows: usize, cols: usize },
    #[error("reconstruction loss needs at least one masked slot")]
    EmptyMask,
    #[error("slide classification needs at least one region")]
    NoRegions,
    #[error("non-finite activations after encoder layer {layer}")]
    NonFinite { layer: usize },
    #[error("attention trace was not captured")]
    MissingTrace,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Input feature dimension D.
    pub feature_dim: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub mask_ratio: f64,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Mask square blocks of slots instead of independent slots.
    pub block_masking: bool,
    pub block_side: usize,
    pub ln_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            feature_dim: 128,
            d_model: 128,
            layers: 4,
            heads: 4,
            ffn: 512,
            mask_ratio: 0.5,
            grid_rows: 20,
            grid_cols: 20,
            block_masking: false,
            block_side: 4,
            ln_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), TransformerError> {
        let bad = |m: String| Err(TransformerError::Config(m));
        if self.feature_dim == 0 || self.d_model == 0 || self.heads == 0 || self.ffn == 0 {
            return bad("feature_dim, d_model, heads and ffn must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return bad(format!("mask_ratio {} outside [0, 1]", self.mask_ratio));
        }
        if self.grid_rows == 0 || self.grid_cols == 0 || self.block_side == 0 {
            return bad("grid and block sides must be positive".into());
        }
        Ok(())
    }

    /// Class token plus one token per grid slot.
    pub fn seq_len(&self) -> usize {
        self.grid_rows * self.grid_cols + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlotKind {
    Class,
    Patch,
    Masked,
    Padding,
}

/// Token layout of one region before projection: what each position holds
/// and the original features (the reconstruction targets).
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub slide_id: String,
    pub region_id: String,
    /// `1 + N` kinds; index 0 is always [`SlotKind::Class`].
    pub kinds: Vec<SlotKind>,
    pub positions: Vec<(u16, u16)>,
    pub dim: usize,
    /// Row-major `N x dim`.
    pub features: Vec<f32>,
}

impl TokenSequence {
    /// Check a bundle against the encoder's grid and feature dimension.
    pub fn from_bundle(bundle: &FeatureBundle, cfg: &EncoderConfig) -> Result<Self, TransformerError> {
        if bundle.dim != cfg.feature_dim {
            return Err(TransformerError::DimMismatch { expected: cfg.feature_dim, got: bundle.dim });
        }
        for &(row, col) in &bundle.positions {
            if row as usize >= cfg.grid_rows || col as usize >= cfg.grid_cols {
                return Err(TransformerError::GridMismatch { row, col, rows: cfg.grid_rows, cols: cfg.grid_cols });
            }
        }
        let mut kinds = Vec::with_capacity(bundle.len() + 1);
        kinds.push(SlotKind::Class);
        kinds.extend(bundle.padding.iter().map(|&p| if p { SlotKind::Padding } else { SlotKind::Patch }));
        Ok(TokenSequence {
            slide_id: bundle.slide_id.clone(),
            region_id: bundle.region_id.clone(),
            kinds,
            positions: bundle.positions.clone(),
            dim: bundle.dim,
            features: bundle.features.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    /// Slots holding a patch, masked or not.
    pub fn real_count(&self) -> usize {
        self.kinds.iter().filter(|k| matches!(k, SlotKind::Patch | SlotKind::Masked)).count()
    }

    pub fn padding_count(&self) -> usize {
        self.kinds.iter().filter(|&&k| k == SlotKind::Padding).count()
    }

    /// Slot indices (0-based, excluding the class token) currently masked.
    pub fn masked_slots(&self) -> Vec<usize> {
        self.kinds.iter().skip(1).enumerate().filter(|(_, &k)| k == SlotKind::Masked).map(|(i, _)| i).collect()
    }

    pub fn feature_row(&self, slot: usize) -> &[f32] {
        &self.features[slot * self.dim..(slot + 1) * self.dim]
    }
}
