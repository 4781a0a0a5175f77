use rayon::prelude::*;

use super::{patches_to_tensor, Cnn, FeatureBundle, FeatureError};
use crate::tensor::Graph;
use crate::wsi::{extract_patches, RegionPatches, RegionSpec, RgbPlane};

impl Cnn {
    /// Checks that stored tensors agree with the config (e.g. after loading
    /// a checkpoint written for another width).
    pub fn check_shapes(&self) -> Result<(), FeatureError> {
        let d = self.feature_dim();
        let head = self.params.get("cnn.head.weight")?.shape();
        if head.len() != 2 || head[0] != d || head[1] != self.config.head.classes() {
            return Err(FeatureError::DimMismatch { expected: d, got: head.first().copied().unwrap_or(0) });
        }
        let stem = self.params.get("cnn.stem.conv.weight")?.shape();
        let c0 = self.config.stage_channels()[0];
        if stem != [c0, 3, 7, 7] {
            return Err(FeatureError::DimMismatch { expected: c0, got: stem[0] });
        }
        Ok(())
    }
}

/// Eval-mode forward over `patches`; returns row-major `[N, D]` features
/// and `[N, classes]` logits. Batches run in parallel; each patch's
/// output does not depend on its batch.
pub fn encode_patches(cnn: &Cnn, patches: &[&RgbPlane], batch_size: usize) -> Result<(Vec<f32>, Vec<f32>), FeatureError> {
    let bs = batch_size.max(1);
    let parts: Vec<Result<(Vec<f32>, Vec<f32>), FeatureError>> = patches
        .par_chunks(bs)
        .map(|chunk| {
            let mut g = Graph::<f32>::new();
            let vars = cnn.params.bind(&mut g, |_| false);
            let x = g.input(patches_to_tensor(chunk, None)?);
            let out = cnn.forward(&mut g, &vars, x, false)?;
            Ok((g.value(out.features).data().to_vec(), g.value(out.logits).data().to_vec()))
        })
        .collect();
    let mut features = Vec::with_capacity(patches.len() * cnn.feature_dim());
    let mut logits = Vec::with_capacity(patches.len() * cnn.config.head.classes());
    for p in parts {
        let (f, l) = p?;
        features.extend(f);
        logits.extend(l);
    }
    Ok((features, logits))
}

/// Features for every slot of a region; padding slots get zero rows.
pub fn extract_region_features(
    cnn: &Cnn,
    slide_id: &str,
    region: &RegionPatches,
    batch_size: usize,
) -> Result<FeatureBundle, FeatureError> {
    cnn.check_shapes()?;
    let d = cnn.feature_dim();
    let real: Vec<&RgbPlane> = region.slots.iter().filter_map(|s| s.patch.as_ref()).collect();
    let (feats, _) = encode_patches(cnn, &real, batch_size)?;
    let mut features = vec![0.0f32; region.slots.len() * d];
    let mut next = 0;
    for (i, slot) in region.slots.iter().enumerate() {
        if slot.patch.is_some() {
            features[i * d..(i + 1) * d].copy_from_slice(&feats[next * d..(next + 1) * d]);
            next += 1;
        }
    }
    let bundle = FeatureBundle {
        slide_id: slide_id.to_string(),
        region_id: region.region.id(),
        dim: d,
        positions: region.slots.iter().map(|s| (s.row, s.col)).collect(),
        padding: region.slots.iter().map(|s| s.patch.is_none()).collect(),
        features,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Cut each region from a 1 um/px plane and extract its features.
pub fn extract_features(
    cnn: &Cnn,
    slide_id: &str,
    plane: &RgbPlane,
    regions: &[RegionSpec],
    batch_size: usize,
) -> Result<Vec<FeatureBundle>, FeatureError> {
    regions
        .iter()
        .map(|r| {
            let patches = extract_patches(plane, r)?;
            extract_region_features(cnn, slide_id, &patches, batch_size)
        })
        .collect()
}
