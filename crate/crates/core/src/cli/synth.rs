use std::path::PathBuf;

use serde::Serialize;

use super::{Ctx, Outcome};
use crate::wsi::{generate_synthetic_slide, save_slide, synthetic_cohort, write_annotations, write_manifest};
use crate::Error;

#[derive(Debug, clap::Args, Serialize)]
pub struct Args {
    /// Output directory for slide containers, manifest.jsonl and annotations.jsonl.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0.3)]
    high_fraction: f64,
    /// Slide side in microns (>= 4480).
    #[arg(long, default_value_t = 4480)]
    side_um: u32,
    /// Level-0 resolution in um/px; a 1.0 um/px level is added below 1.0.
    #[arg(long, default_value_t = 1.0)]
    mpp: f64,
    /// Annotation boxes per slide.
    #[arg(long, default_value_t = 2)]
    boxes: usize,
}

pub fn run(a: &Args, ctx: &mut Ctx) -> Result<Outcome, Error> {
    let out = ctx.path(&a.out);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let specs = synthetic_cohort(a.n, a.high_fraction, a.side_um, ctx.seed)?;
    let mut entries = Vec::with_capacity(specs.len());
    let mut boxes = Vec::new();
    for mut spec in specs {
        spec.mpp = a.mpp;
        spec.annotation_boxes = a.boxes;
        let s = generate_synthetic_slide(&spec)?;
        save_slide(&out.join(&spec.slide_id), &s.slide)?;
        log::info!("rendered {} ({:?})", spec.slide_id, s.entry.subtype);
        entries.push(s.entry);
        boxes.extend(s.boxes);
    }
    let manifest = ctx.output(Some(&out.join("manifest.jsonl")), "")?;
    write_manifest(&manifest, &entries)?;
    let ann = ctx.output(Some(&out.join("annotations.jsonl")), "")?;
    write_annotations(&ann, &boxes)?;
    Ok(None)
}
