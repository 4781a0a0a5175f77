use std::path::PathBuf;

use serde::Serialize;

use super::{load_slide_features, Ctx, Outcome};
use crate::metrics::{write_predictions, ScoredSlide};
use crate::pipeline::{predict_all, read_checkpoint, select_split, FinetuneConfig, RunLog, Stage};
use crate::wsi::Split;
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
    /// Split to score (train, val, test, external); every slide when absent.
    #[arg(long)]
    split: Option<Split>,
    /// Regions per slide (default: the checkpoint's evaluation setting, 25).
    #[arg(long)]
    regions: Option<usize>,
    /// Predictions (JSON lines); default `predictions.jsonl` in the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(a: &Args, ctx: &mut Ctx) -> Result<Outcome, Error> {
    let ck = read_checkpoint(&ctx.path(&a.model))?;
    ck.expect_stage(&[Stage::Finetune])?;
    let model = ck.to_model()?;
    let trained: FinetuneConfig = serde_json::from_value(ck.meta.config.clone()).unwrap_or_default();
    let k = a.regions.unwrap_or(trained.regions_per_slide_eval);
    let slides = load_slide_features(&ctx.path(&a.manifest), &ctx.path(&a.features))?;
    let slides = match a.split {
        Some(s) => select_split(&slides, s),
        None => slides,
    };
    let preds = predict_all(&model, &slides, k, ctx.seed)?;
    let scored: Vec<ScoredSlide> = preds
        .iter()
        .zip(&slides)
        .map(|(p, s)| ScoredSlide {
            slide_id: p.slide_id.clone(),
            subtype: s.entry.subtype,
            true_grade: s.grade(),
            prob_high: p.prob_high,
        })
        .collect();
    let mut log = RunLog::new("predict", ctx.seed, &k);
    log.warnings = preds
        .iter()
        .filter(|p| p.with_replacement)
        .map(|p| format!("slide `{}`: fewer than {k} candidate regions, sampled with replacement", p.slide_id))
        .collect();
    let out = ctx.output(a.out.as_deref(), "predictions.jsonl")?;
    write_predictions(&out, &scored)?;
    Ok(Some(log))
}
