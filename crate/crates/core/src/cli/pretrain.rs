use std::path::PathBuf;

use serde::Serialize;

use super::{load_slide_features, read_json, Ctx, Outcome};
use crate::pipeline::{pretrain_from, read_checkpoint, select_split, write_checkpoint, PretrainConfig};
use crate::wsi::Split;
use crate::Error;

#[derive(Debug, clap::Args, Serialize)]
pub struct Args {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// JSON file with PretrainConfig fields; `encoder.feature_dim` defaults
    /// to the feature store's dimension.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Continue an interrupted run from its checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many optimizer steps in total (the checkpoint can be resumed).
    #[arg(long)]
    stop_after_steps: Option<u64>,
    /// Checkpoint; default `pretrain.ckpt` in the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(a: &Args, ctx: &mut Ctx) -> Result<Outcome, Error> {
    let slides = load_slide_features(&ctx.path(&a.manifest), &ctx.path(&a.features))?;
    let train = select_split(&slides, Split::Train);
    let raw: serde_json::Value = match &a.config {
        Some(p) => read_json(&ctx.path(p))?,
        None => serde_json::json!({ "seed": ctx.seed }),
    };
    let mut cfg: PretrainConfig =
        serde_json::from_value(raw.clone()).map_err(|e| Error::Invalid(format!("pretrain config: {e}")))?;
    if raw.pointer("/encoder/feature_dim").is_none() {
        if let Some(b) = slides.iter().flat_map(|s| s.regions.first()).next() {
            cfg.encoder.feature_dim = b.dim;
        }
    }
    if ctx.seed_given {
        cfg.seed = ctx.seed;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    let resume = a.resume.as_ref().map(|p| read_checkpoint(&ctx.path(p))).transpose()?;
    let run = pretrain_from(&train, &cfg, resume.as_ref(), a.stop_after_steps)?;
    let out = ctx.output(a.out.as_deref(), "pretrain.ckpt")?;
    write_checkpoint(&out, &run.checkpoint)?;
    Ok(Some(run.log))
}
