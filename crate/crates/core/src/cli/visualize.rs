use std::path::PathBuf;

use serde::Serialize;

use super::{load_manifest, load_slide_features, Ctx, Outcome};
use crate::pipeline::{predict, read_checkpoint, FinetuneConfig, Stage};
use crate::viz::{normalize_and_stitch, region_maps, render_heatmap, Aggregation, Colormap, HeatmapSidecar};
use crate::wsi::{compute_tissue_mask, downsample_to_target, load_slide, RegionSpec, TissueParams};
use crate::Error;

#[derive(Debug, clap::Args, Serialize)]
pub struct Args {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// Fine-tuning checkpoint.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    slide: String,
    #[arg(long, default_value_t = 0.45)]
    alpha: f64,
    /// Attention rollout over all layers instead of the final layer.
    #[arg(long)]
    rollout: bool,
    #[arg(long)]
    regions: Option<usize>,
    /// Overlay PNG; default `<slide>_attention.png` in the run directory.
    /// The sidecar JSON is written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(a: &Args, ctx: &mut Ctx) -> Result<Outcome, Error> {
    if !(0.0..=1.0).contains(&a.alpha) {
        return Err(Error::Invalid(format!("alpha {} outside [0, 1]", a.alpha)));
    }
    let ck = read_checkpoint(&ctx.path(&a.model))?;
    ck.expect_stage(&[Stage::Finetune])?;
    let model = ck.to_model()?;
    let trained: FinetuneConfig = serde_json::from_value(ck.meta.config.clone()).unwrap_or_default();
    let k = a.regions.unwrap_or(trained.regions_per_slide_eval);
    let manifest = ctx.path(&a.manifest);
    let slides = load_slide_features(&manifest, &ctx.path(&a.features))?;
    let slide = slides
        .iter()
        .find(|s| s.slide_id() == a.slide)
        .ok_or_else(|| Error::Invalid(format!("slide `{}` not in the manifest", a.slide)))?;
    let pred = predict(&model, slide, k, ctx.seed, true)?;
    let agg = if a.rollout { Aggregation::Rollout } else { Aggregation::LastLayerHeadMean };
    let maps = region_maps(&pred, slide, &RegionSpec::new(0, 0), agg)?;

    let (_, dir) = load_manifest(&manifest)?;
    let plane = downsample_to_target(&load_slide(&slide.entry.resolve_path(&dir))?, 1.0)?;
    let mask = compute_tissue_mask(&plane, &TissueParams::default())?;
    let canvas = normalize_and_stitch(&maps, plane.width(), plane.height(), Some(&mask))?;
    let cmap = Colormap { alpha: a.alpha };
    let image = render_heatmap(&plane, &canvas, &cmap, Some(&mask))?;
    let png = ctx.output(a.out.as_deref(), &format!("{}_attention.png", a.slide))?;
    image.write_png(&png)?;
    let sidecar = ctx.output(Some(&png.with_extension("json")), "")?;
    HeatmapSidecar::new(&a.slide, &canvas, &maps, agg, &cmap).write(&sidecar)?;
    Ok(None)
}
