//! The two training stages and inference: masked pre-training over random
//! regions, slide-level fine-tuning on averaged class tokens, and 25-region
//! prediction, plus checkpoints and run logs.
//!
//! All randomness is drawn from `ChaCha8Rng::seed_from_u64(seed)` with a
//! stream per epoch (pre-training: `epoch`, fine-tuning: `FINETUNE_STREAM |
//! epoch`) and, for inference, a stream derived from the slide id. A run is
//! therefore a pure function of its config, seed and inputs.

mod checkpoint;
mod finetune;
mod predict;
mod pretrain;
mod runlog;

use std::collections::HashMap;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::features::{FeatureBundle, FeatureError};
use crate::metrics::MetricsError;
use crate::tensor::TensorError;
use crate::transformer::TransformerError;
use crate::wsi::{Grade, SlideManifestEntry, Split, WsiError};

pub use checkpoint::{
    read_checkpoint, read_checkpoint_from, write_checkpoint, write_checkpoint_to, Checkpoint, CheckpointMeta, Stage, CHECKPOINT_VERSION};
pub use finetune::{finetune, FinetuneConfig, FinetuneRun};
pub use predict::{predict, predict_all, Prediction};
pub use pretrain::{pretrain, pretrain_from, PretrainConfig, PretrainRun};
pub use runlog::{config_hash, EpochRecord, RunLog};

const FINETUNE_STREAM: u64 = 1 << 32;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("the {0} split is empty")]
    EmptySplit(&'static str),
    #[error("{0}")]
    SingleClass(String),
    #[error("slide `{0}` has no tissue-bearing region")]
    NoTissue(String),
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Transformer(#[from] TransformerError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Wsi(#[from] WsiError),
}

/// A slide's manifest entry and the feature bundles of all its candidate
/// regions.
#[derive(Clone, Debug)]
pub struct SlideFeatures {
    pub entry: SlideManifestEntry,
    pub regions: Vec<FeatureBundle>,
}

impl SlideFeatures {
    pub fn slide_id(&self) -> &str {
        &self.entry.slide_id
    }

    pub fn grade(&self) -> Grade {
        self.entry.grade
    }
}

/// Attach bundles to manifest entries (manifest order). Bundles of slides
/// missing from the manifest are ignored; slides without bundles get an
/// empty region list.
pub fn group_features(entries: &[SlideManifestEntry], bundles: Vec<FeatureBundle>) -> Vec<SlideFeatures> {
    let mut by_slide: HashMap<String, Vec<FeatureBundle>> = HashMap::new();
    for b in bundles {
        by_slide.entry(b.slide_id.clone()).or_default().push(b);
    }
    entries
        .iter()
        .map(|e| SlideFeatures { entry: e.clone(), regions: by_slide.remove(&e.slide_id).unwrap_or_default() })
        .collect()
}

/// Slides tagged with `split`.
pub fn select_split(slides: &[SlideFeatures], split: Split) -> Vec<SlideFeatures> {
    slides.iter().filter(|s| s.entry.split == Some(split)).cloned().collect()
}

fn epoch_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Per-slide stream: the first 8 bytes of SHA-256 of the slide id, so a
/// slide's regions do not depend on which other slides are processed.
fn slide_rng(seed: u64, slide_id: &str) -> ChaCha8Rng {
    let digest = Sha256::digest(slide_id.as_bytes());
    let stream = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    epoch_rng(seed, stream)
}

fn require_both_classes(slides: &[SlideFeatures], what: &str) -> Result<(), PipelineError> {
    let high = slides.iter().filter(|s| s.grade() == Grade::High).count();
    if high == 0 || high == slides.len() {
        return Err(PipelineError::SingleClass(format!(
            "{what} split has {} slides, {high} High; both grades are required",
            slides.len()
        )));
    }
    Ok(())
}
