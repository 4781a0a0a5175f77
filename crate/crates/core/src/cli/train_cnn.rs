use std::path::PathBuf;

use serde::Serialize;

use super::{load_manifest, read_json, write_json, Ctx, Outcome};
use crate::features::{train_patch_classifier, PatchTrainConfig};
use crate::pipeline::{write_checkpoint, Checkpoint, CheckpointMeta, EpochRecord, RunLog};
use crate::wsi::{extract_annotation_patches, load_slide, read_annotations, Split};
use crate::Error;

#[derive(Debug, clap::Args, Serialize)]
pub struct Args {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    annotations: PathBuf,
    /// JSON patch-training config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    width: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Harvest boxes from every slide instead of the training split only.
    #[arg(long)]
    all_slides: bool,
    /// CNN checkpoint; default `cnn.ckpt` in the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training report; default `cnn_report.json` in the run directory.
    #[arg(long)]
    report: Option<PathBuf>,
}

pub fn run(a: &Args, ctx: &mut Ctx) -> Result<Outcome, Error> {
    let mut cfg: PatchTrainConfig = match &a.config {
        Some(p) => read_json(&ctx.path(p))?,
        None => PatchTrainConfig { seed: ctx.seed, ..Default::default() },
    };
    if ctx.seed_given {
        cfg.seed = ctx.seed;
    }
    if let Some(w) = a.width {
        cfg.cnn.width = w;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    let (entries, dir) = load_manifest(&ctx.path(&a.manifest))?;
    let boxes = read_annotations(&ctx.path(&a.annotations))?;
    let mut patches = Vec::new();
    let mut log = RunLog::new("train-cnn", cfg.seed, &cfg);
    for e in entries.iter().filter(|e| a.all_slides || e.split == Some(Split::Train)) {
        let mine: Vec<_> = boxes.iter().filter(|b| b.slide_id == e.slide_id).cloned().collect();
        if mine.is_empty() {
            continue;
        }
        let slide = load_slide(&e.resolve_path(&dir))?;
        let mut got = extract_annotation_patches(&slide, &mine)?;
        log.warnings.append(&mut got.skipped);
        patches.append(&mut got.patches);
    }
    if patches.is_empty() {
        return Err(Error::Invalid("no annotation patches on the selected slides (run `split` first or pass --all-slides)".into()));
    }
    let trained = train_patch_classifier(&patches, &cfg)?;
    for ep in &trained.report.epochs {
        log.push(EpochRecord {
            epoch: ep.epoch,
            train_loss: ep.train_loss,
            val_loss: None,
            val_auc: Some(ep.val_auc),
            val_f1: Some(ep.val_f1),
            seconds: 0.0,
        });
    }
    log.selected_epoch = Some(trained.report.selected_epoch);
    let meta = CheckpointMeta { epoch: trained.report.selected_epoch, ..CheckpointMeta::new(&cfg, cfg.seed) };
    let out = ctx.output(a.out.as_deref(), "cnn.ckpt")?;
    write_checkpoint(&out, &Checkpoint::from_cnn(&trained.cnn, meta))?;
    let report = ctx.output(a.report.as_deref(), "cnn_report.json")?;
    write_json(&report, &trained.report)?;
    Ok(Some(log))
}
