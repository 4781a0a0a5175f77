use std::path::PathBuf;

use serde::Serialize;

use super::{load_manifest, Ctx, Outcome};
use crate::pipeline::RunLog;
use crate::wsi::{split_dataset, write_manifest, Split, SplitFractions};
use crate::Error;

#[derive(Debug, clap::Args, Serialize)]
pub struct Args {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0.7)]
    train: f64,
    #[arg(long, default_value_t = 0.1)]
    val: f64,
    #[arg(long, default_value_t = 0.2)]
    test: f64,
    /// Output manifest (default: rewrite the input).
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(a: &Args, ctx: &mut Ctx) -> Result<Outcome, Error> {
    let input = ctx.path(&a.manifest);
    let (entries, _) = load_manifest(&input)?;
    let fractions = SplitFractions { train: a.train, val: a.val, test: a.test };
    let outcome = split_dataset(&entries, fractions, ctx.seed)?;
    let out = ctx.output(Some(a.out.as_deref().unwrap_or(&input)), "")?;
    write_manifest(&out, &outcome.entries)?;
    log::info!(
        "split: {} train, {} val, {} test",
        outcome.count(Split::Train),
        outcome.count(Split::Val),
        outcome.count(Split::Test)
    );
    let mut log = RunLog::new("split", ctx.seed, &fractions);
    log.warnings = outcome.warnings;
    Ok(Some(log))
}
