//! The whole pipeline on a synthetic cohort, in memory: render, split,
//! train the patch CNN on annotation boxes, extract features for every
//! candidate region, pre-train, fine-tune, score the test split and
//! evaluate.
//!
//! Slides are rendered one at a time and dropped once their annotation
//! patches or features are taken, so memory stays bounded by one plane.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::features::{extract_features, train_patch_classifier, CnnConfig, PatchClassifierReport, PatchTrainConfig};
use crate::metrics::{evaluate, roc_points, EvalOptions, MetricReport, RocCurve, ScoredSlide};
use crate::pipeline::{
    finetune, predict, predict_all, pretrain, select_split, FinetuneConfig, PretrainConfig, RunLog, SlideFeatures,
};
use crate::transformer::{EncoderConfig, EndoNet};
use crate::viz::{normalize_and_stitch, region_maps, render_heatmap, Aggregation, AttentionCanvas, Colormap, HeatmapSidecar};
use crate::wsi::{
    compute_tissue_mask, downsample_to_target, extract_annotation_patches, generate_synthetic_slide, region_candidates,
    split_dataset, synthetic_cohort, RegionSpec, RgbPlane, SlideManifestEntry, Split, SplitFractions, SyntheticSlideSpec,
    TissueParams,
};
use crate::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub slides: usize,
    pub high_fraction: f64,
    pub side_um: u32,
    pub split: SplitFractions,
    pub tissue: TissueParams,
    pub min_tissue: f64,
    pub cnn: PatchTrainConfig,
    /// Patches per CNN forward pass during extraction.
    pub batch_size: usize,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalOptions,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::benchmark(0)
    }
}

impl ExperimentConfig {
    /// 100 slides (30 High), 60/20/20 split, CNN at width 0.125.
    pub fn benchmark(seed: u64) -> Self {
        let cnn = PatchTrainConfig { cnn: CnnConfig { width: 0.125, ..Default::default() }, epochs: 4, seed, ..Default::default() };
        let feature_dim = cnn.cnn.feature_dim();
        ExperimentConfig {
            slides: 100,
            high_fraction: 0.3,
            side_um: 4480,
            split: SplitFractions { train: 0.6, val: 0.2, test: 0.2 },
            tissue: TissueParams::default(),
            min_tissue: 0.25,
            cnn,
            batch_size: 32,
            pretrain: PretrainConfig {
                encoder: EncoderConfig { feature_dim, ..Default::default() },
                epochs: 5,
                seed,
                ..Default::default()
            },
            finetune: FinetuneConfig { epochs: 20, seed, ..Default::default() },
            eval: EvalOptions { seed, ..Default::default() },
            seed,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct StageTime {
    pub stage: String,
    pub seconds: f64,
}

pub struct ExperimentOutcome {
    pub specs: Vec<SyntheticSlideSpec>,
    pub entries: Vec<SlideManifestEntry>,
    pub cnn: PatchClassifierReport,
    pub pretrain: RunLog,
    pub finetune: RunLog,
    pub model: EndoNet,
    pub slides: Vec<SlideFeatures>,
    /// Test-split predictions.
    pub scored: Vec<ScoredSlide>,
    pub report: MetricReport,
    pub roc: RocCurve,
    pub timings: Vec<StageTime>,
    pub warnings: Vec<String>,
}

impl ExperimentOutcome {
    /// Every logged number (no timings) as one JSON string; floats
    /// round-trip, so string equality is bit equality.
    pub fn fingerprint(&self) -> String {
        serde_json::json!({
            "split": self.entries.iter().map(|e| (&e.slide_id, e.split)).collect::<Vec<_>>(),
            "cnn": self.cnn,
            "pretrain": self.pretrain.metrics(),
            "finetune": self.finetune.metrics(),
            "selected": self.finetune.selected_epoch,
            "scored": self.scored,
            "report": self.report,
        })
        .to_string()
    }

    pub fn total_seconds(&self) -> f64 {
        self.timings.iter().map(|t| t.seconds).sum()
    }
}

fn timed<T>(timings: &mut Vec<StageTime>, stage: &str, f: impl FnOnce() -> Result<T, Error>) -> Result<T, Error> {
    let t = Instant::now();
    let out = f()?;
    let seconds = t.elapsed().as_secs_f64();
    log::info!("{stage}: {seconds:.1} s");
    timings.push(StageTime { stage: stage.to_string(), seconds });
    Ok(out)
}

fn render(spec: &SyntheticSlideSpec) -> Result<(crate::wsi::SyntheticSlide, RgbPlane), Error> {
    let s = generate_synthetic_slide(spec)?;
    let plane = downsample_to_target(&s.slide, 1.0)?;
    Ok((s, plane))
}

/// Rendered, split and encoded cohort: everything before the transformer.
pub struct Featurized {
    pub specs: Vec<SyntheticSlideSpec>,
    pub entries: Vec<SlideManifestEntry>,
    pub cnn: PatchClassifierReport,
    pub slides: Vec<SlideFeatures>,
    pub timings: Vec<StageTime>,
    pub warnings: Vec<String>,
}

/// Cohort, split, patch classifier and features for every candidate region.
pub fn featurize(cfg: &ExperimentConfig) -> Result<Featurized, Error> {
    let mut timings = Vec::new();
    let mut warnings = Vec::new();
    let specs = synthetic_cohort(cfg.slides, cfg.high_fraction, cfg.side_um, cfg.seed)?;
    let entries: Vec<SlideManifestEntry> = specs.iter().map(|s| s.entry().expect("cohort sets subtypes")).collect();
    let split = split_dataset(&entries, cfg.split, cfg.seed)?;
    warnings.extend(split.warnings.iter().cloned());
    let entries = split.entries;
    let split_of = |id: &str| entries.iter().find(|e| e.slide_id == id).and_then(|e| e.split);

    let trained = timed(&mut timings, "patch classifier", || {
        let mut patches = Vec::new();
        for spec in specs.iter().filter(|s| split_of(&s.slide_id) == Some(Split::Train)) {
            let s = generate_synthetic_slide(spec)?;
            let mut got = extract_annotation_patches(&s.slide, &s.boxes)?;
            warnings.append(&mut got.skipped);
            patches.append(&mut got.patches);
        }
        Ok(train_patch_classifier(&patches, &cfg.cnn)?)
    })?;

    let slides = timed(&mut timings, "feature extraction", || {
        let mut out = Vec::with_capacity(specs.len());
        for (spec, entry) in specs.iter().zip(&entries) {
            let (_, plane) = render(spec)?;
            let mask = compute_tissue_mask(&plane, &cfg.tissue)?;
            let regions: Vec<RegionSpec> =
                region_candidates(plane.width(), plane.height(), &mask, cfg.min_tissue).into_iter().map(|c| c.region).collect();
            if regions.is_empty() {
                warnings.push(format!("slide `{}` has no tissue-bearing region", spec.slide_id));
            }
            let bundles = extract_features(&trained.cnn, &spec.slide_id, &plane, &regions, cfg.batch_size)?;
            out.push(SlideFeatures { entry: entry.clone(), regions: bundles });
        }
        Ok(out)
    })?;
    Ok(Featurized { specs, entries, cnn: trained.report, slides, timings, warnings })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome, Error> {
    let Featurized { specs, entries, cnn, slides, mut timings, warnings } = featurize(cfg)?;
    let train = select_split(&slides, Split::Train);
    let val = select_split(&slides, Split::Val);
    let test = select_split(&slides, Split::Test);
    let pre = timed(&mut timings, "pre-training", || Ok(pretrain(&train, &cfg.pretrain)?))?;
    let fine = timed(&mut timings, "fine-tuning", || Ok(finetune(&train, &val, &pre.model, &cfg.finetune)?))?;
    let scored = timed(&mut timings, "prediction", || {
        let preds = predict_all(&fine.model, &test, cfg.finetune.regions_per_slide_eval, cfg.finetune.seed)?;
        Ok(preds
            .iter()
            .zip(&test)
            .map(|(p, s)| ScoredSlide {
                slide_id: p.slide_id.clone(),
                subtype: s.entry.subtype,
                true_grade: s.grade(),
                prob_high: p.prob_high,
            })
            .collect::<Vec<_>>())
    })?;
    let report = timed(&mut timings, "evaluation", || Ok(evaluate(&scored, &cfg.eval)?))?;
    let roc = roc_points(&scored)?;
    Ok(ExperimentOutcome {
        specs,
        entries,
        cnn,
        pretrain: pre.log,
        finetune: fine.log,
        model: fine.model,
        slides,
        scored,
        report,
        roc,
        timings,
        warnings,
    })
}

/// Attention overlay of one slide of a finished experiment: the slide is
/// re-rendered and its 25 prediction regions supply the traces.
pub fn overlay(
    outcome: &ExperimentOutcome,
    cfg: &ExperimentConfig,
    slide_id: &str,
    agg: Aggregation,
    cmap: &Colormap,
) -> Result<(RgbPlane, AttentionCanvas, HeatmapSidecar), Error> {
    let idx = outcome
        .slides
        .iter()
        .position(|s| s.slide_id() == slide_id)
        .ok_or_else(|| Error::Invalid(format!("unknown slide `{slide_id}`")))?;
    let slide = &outcome.slides[idx];
    let pred = predict(&outcome.model, slide, cfg.finetune.regions_per_slide_eval, cfg.finetune.seed, true)?;
    let (_, plane) = render(&outcome.specs[idx])?;
    let maps = region_maps(&pred, slide, &RegionSpec::new(0, 0), agg)?;
    let mask = compute_tissue_mask(&plane, &cfg.tissue)?;
    let canvas = normalize_and_stitch(&maps, plane.width(), plane.height(), Some(&mask))?;
    let image = render_heatmap(&plane, &canvas, cmap, Some(&mask))?;
    let sidecar = HeatmapSidecar::new(slide_id, &canvas, &maps, agg, cmap);
    Ok((image, canvas, sidecar))
}
