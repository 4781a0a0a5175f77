use rayon::prelude::*;

use super::{slide_rng, PipelineError, SlideFeatures};
use crate::transformer::{classify_slide, AttentionTrace, EndoNet, TokenSequence};
use crate::wsi::sample_from_candidates;

#[derive(Clone, Debug)]
pub struct Prediction {
    pub slide_id: String,
    pub prob_high: f64,
    /// (Low, High).
    pub logits: [f32; 2],
    /// Region ids in sampling order; repeats occur when the slide has fewer
    /// candidates than requested.
    pub regions: Vec<String>,
    pub with_replacement: bool,
    /// One class token per sampled region.
    pub class_tokens: Vec<Vec<f32>>,
    /// Attention traces of the distinct sampled regions, as
    /// (index into the slide's bundles, trace).
    pub traces: Vec<(usize, AttentionTrace)>,
}

/// Draw `k` region indices for `slide` from its own RNG stream.
pub(crate) fn sample_slide_regions(slide: &SlideFeatures, k: usize, seed: u64) -> Result<(Vec<usize>, bool), PipelineError> {
    if slide.regions.is_empty() {
        return Err(PipelineError::NoTissue(slide.slide_id().to_string()));
    }
    let mut rng = slide_rng(seed, slide.slide_id());
    Ok(sample_from_candidates(slide.regions.len(), k, &mut rng)?)
}

/// Slide-level prediction from `k` regions encoded without masking. Each
/// distinct region is encoded once; repeated draws reuse its class token.
pub fn predict(model: &EndoNet, slide: &SlideFeatures, k: usize, seed: u64, capture: bool) -> Result<Prediction, PipelineError> {
    let (idx, with_replacement) = sample_slide_regions(slide, k, seed)?;
    let mut distinct = idx.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let mut tokens = Vec::with_capacity(distinct.len());
    let mut traces = Vec::new();
    for &r in &distinct {
        let seq = TokenSequence::from_bundle(&slide.regions[r], &model.config)?;
        let (tok, trace) = model.region_class_token(&seq, capture)?;
        tokens.push(tok);
        if let Some(t) = trace {
            traces.push((r, t));
        }
    }
    let class_tokens: Vec<Vec<f32>> =
        idx.iter().map(|r| tokens[distinct.binary_search(r).expect("sampled")].clone()).collect();
    let out = classify_slide(model, &class_tokens)?;
    Ok(Prediction {
        slide_id: slide.slide_id().to_string(),
        prob_high: out.prob_high,
        logits: out.logits,
        regions: idx.iter().map(|&r| slide.regions[r].region_id.clone()).collect(),
        with_replacement,
        class_tokens,
        traces,
    })
}

/// [`predict`] for many slides in parallel; results keep input order.
pub fn predict_all(model: &EndoNet, slides: &[SlideFeatures], k: usize, seed: u64) -> Result<Vec<Prediction>, PipelineError> {
    slides.par_iter().map(|s| predict(model, s, k, seed, false)).collect()
}
