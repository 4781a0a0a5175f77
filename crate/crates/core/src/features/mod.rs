//! ResNet-18 patch encoder: supervised pre-training on annotated patches,
//! frozen feature extraction per region, and the feature-store file.
//!
//! Feature store layout (little-endian): `"ENDF"`, u32 version 1, u32
//! bundle count, then per bundle the slide id and region id as u16
//! length-prefixed UTF-8, u32 N, u32 D, N x (u16 row, u16 col, u8 padding
//! flag) and N x D f32.

mod cnn;
mod extract;
mod store;
mod train;

use thiserror::Error;

use crate::metrics::MetricsError;
use crate::tensor::{Tensor, TensorError};
use crate::wsi::{RgbPlane, WsiError, PATCH_PX};

pub use cnn::{Cnn, CnnConfig, CnnOutput, HeadKind, BN_EPS, BN_MOMENTUM};
pub use extract::{encode_patches, extract_features, extract_region_features};
pub use store::{
    read_feature_store, read_feature_store_from, write_feature_store, write_feature_store_to, FeatureBundle,
    FEATURE_STORE_VERSION,
};
pub use train::{train_patch_classifier, PatchClassifierReport, PatchEpoch, PatchTrainConfig, TrainedCnn};

/// ImageNet channel statistics applied after scaling to [0, 1].
pub const CHANNEL_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const CHANNEL_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("width multiplier {0} must be > 0")]
    InvalidWidth(f64),
    #[error("epochs must be >= 1")]
    NoEpochs,
    #[error("patch classifier needs both classes in train and validation partitions: {0}")]
    SingleClass(String),
    #[error("patch is {0}x{1}, expected 224x224")]
    PatchSize(usize, usize),
    #[error("feature dimension {got} does not match the checkpoint ({expected})")]
    DimMismatch { expected: usize, got: usize },
    #[error("invalid feature bundle `{slide_id}/{region_id}`: {detail}")]
    InvalidBundle { slide_id: String, region_id: String, detail: String },
    #[error("corrupt feature store: {0}")]
    Corrupt(String),
    #[error("{path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Wsi(#[from] WsiError),
}

/// Patch flips applied before normalization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Flip {
    pub horizontal: bool,
    pub vertical: bool,
}

/// Stack 224 px patches into a normalized `[N, 3, 224, 224]` tensor.
pub fn patches_to_tensor(patches: &[&RgbPlane], flips: Option<&[Flip]>) -> Result<Tensor<f32>, FeatureError> {
    let p = PATCH_PX;
    let mut data = vec![0.0f32; patches.len() * 3 * p * p];
    let scale: [f32; 3] = [0, 1, 2].map(|c| 1.0 / (255.0 * CHANNEL_STD[c]));
    let shift: [f32; 3] = [0, 1, 2].map(|c| CHANNEL_MEAN[c] / CHANNEL_STD[c]);
    for (i, patch) in patches.iter().enumerate() {
        if patch.width() != p || patch.height() != p {
            return Err(FeatureError::PatchSize(patch.width(), patch.height()));
        }
        let flip = flips.map(|f| f[i]).unwrap_or_default();
        let src = patch.data();
        let dst = &mut data[i * 3 * p * p..(i + 1) * 3 * p * p];
        for y in 0..p {
            let sy = if flip.vertical { p - 1 - y } else { y };
            for x in 0..p {
                let sx = if flip.horizontal { p - 1 - x } else { x };
                let px = &src[(sy * p + sx) * 3..(sy * p + sx) * 3 + 3];
                for c in 0..3 {
                    dst[(c * p + y) * p + x] = px[c] as f32 * scale[c] - shift[c];
                }
            }
        }
    }
    Ok(Tensor::new(vec![patches.len(), 3, p, p], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_and_flip() {
        let mut patch = RgbPlane::filled(224, 224, [0, 0, 0]);
        patch.set_pixel(0, 0, [255, 255, 255]);
        let t = patches_to_tensor(&[&patch], None).unwrap();
        assert_eq!(t.shape(), &[1, 3, 224, 224]);
        assert!((t.data()[0] - (1.0 - 0.485) / 0.229).abs() < 1e-5);
        assert!((t.data()[1] + 0.485 / 0.229).abs() < 1e-5);
        let f = patches_to_tensor(&[&patch], Some(&[Flip { horizontal: true, vertical: false }])).unwrap();
        assert!((f.data()[223] - t.data()[0]).abs() < 1e-6);
        assert!(matches!(patches_to_tensor(&[&RgbPlane::filled(10, 10, [0, 0, 0])], None), Err(FeatureError::PatchSize(10, 10))));
    }
}
