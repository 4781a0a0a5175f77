use std::path::PathBuf;

use serde::Serialize;

use super::{load_manifest, read_tiles, Ctx, Outcome};
use crate::features::{extract_features, write_feature_store};
use crate::pipeline::{read_checkpoint, RunLog};
use crate::wsi::{compute_tissue_mask, downsample_to_target, load_slide, region_candidates, RegionSpec, TissueParams};
use crate::Error;

#[derive(Debug, clap::Args, Serialize)]
pub struct Args {
    #[arg(long)]
    manifest: PathBuf,
    /// CNN checkpoint from `train-cnn`.
    #[arg(long)]
    cnn: PathBuf,
    /// Regions file from `tile`; candidates are recomputed when absent.
    #[arg(long)]
    regions: Option<PathBuf>,
    #[arg(long, default_value_t = 0.25)]
    min_tissue: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Feature store; default `features.endf` in the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(a: &Args, ctx: &mut Ctx) -> Result<Outcome, Error> {
    let cnn = read_checkpoint(&ctx.path(&a.cnn))?.to_cnn()?;
    let (entries, dir) = load_manifest(&ctx.path(&a.manifest))?;
    let tiles = a.regions.as_ref().map(|p| read_tiles(&ctx.path(p))).transpose()?;
    let mut log = RunLog::new("extract-features", ctx.seed, &(cnn.config, a.min_tissue));
    let mut bundles = Vec::new();
    for e in &entries {
        let slide = load_slide(&e.resolve_path(&dir))?;
        let plane = downsample_to_target(&slide, 1.0)?;
        let regions: Vec<RegionSpec> = match &tiles {
            Some(t) => t
                .iter()
                .find(|r| r.slide_id == e.slide_id)
                .ok_or_else(|| Error::Invalid(format!("slide `{}` missing from the regions file", e.slide_id)))?
                .candidates
                .iter()
                .map(|c| c.region)
                .collect(),
            None => {
                let mask = compute_tissue_mask(&plane, &TissueParams::default())?;
                region_candidates(plane.width(), plane.height(), &mask, a.min_tissue).into_iter().map(|c| c.region).collect()
            }
        };
        if regions.is_empty() {
            log.warnings.push(format!("slide `{}` has no candidate region", e.slide_id));
        }
        bundles.extend(extract_features(&cnn, &e.slide_id, &plane, &regions, a.batch_size)?);
        log::info!("{}: {} regions", e.slide_id, regions.len());
    }
    let out = ctx.output(a.out.as_deref(), "features.endf")?;
    write_feature_store(&out, &bundles)?;
    Ok(Some(log))
}
