use std::path::PathBuf;

use serde::Serialize;

use super::{load_slide_features, read_json, Ctx, Outcome};
use crate::pipeline::{finetune, read_checkpoint, select_split, write_checkpoint, FinetuneConfig, Stage};
use crate::wsi::Split;
use crate::Error;

#[derive(Debug, clap::Args, Serialize)]
pub struct Args {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// Pre-training checkpoint.
    #[arg(long)]
    init: PathBuf,
    /// JSON file with FinetuneConfig fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Train only the classification head.
    #[arg(long)]
    freeze_encoder: bool,
    /// Checkpoint of the selected epoch; default `finetune.ckpt` in the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(a: &Args, ctx: &mut Ctx) -> Result<Outcome, Error> {
    let slides = load_slide_features(&ctx.path(&a.manifest), &ctx.path(&a.features))?;
    let mut cfg: FinetuneConfig = match &a.config {
        Some(p) => read_json(&ctx.path(p))?,
        None => FinetuneConfig { seed: ctx.seed, ..Default::default() },
    };
    if ctx.seed_given {
        cfg.seed = ctx.seed;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.freeze_encoder |= a.freeze_encoder;
    let init = read_checkpoint(&ctx.path(&a.init))?;
    init.expect_stage(&[Stage::Pretrain, Stage::Finetune])?;
    let model = init.to_model()?;
    let run = finetune(&select_split(&slides, Split::Train), &select_split(&slides, Split::Val), &model, &cfg)?;
    let out = ctx.output(a.out.as_deref(), "finetune.ckpt")?;
    write_checkpoint(&out, &run.checkpoint)?;
    Ok(Some(run.log))
}
