use std::path::PathBuf;

use serde::Serialize;

use super::{write_json, Ctx, Outcome};
use crate::metrics::{evaluate, read_predictions, roc_points, EvalOptions};
use crate::Error;

#[derive(Debug, clap::Args, Serialize)]
pub struct Args {
    /// Predictions (JSON lines).
    #[arg(long)]
    pred: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    iterations: u64,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Report; default `report.json` in the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// ROC points as CSV; default `roc.csv` in the run directory.
    #[arg(long)]
    roc: Option<PathBuf>,
}

pub fn run(a: &Args, ctx: &mut Ctx) -> Result<Outcome, Error> {
    let scored = read_predictions(&ctx.path(&a.pred))?;
    let opts = EvalOptions { iterations: a.iterations, level: a.level, threshold: a.threshold, seed: ctx.seed };
    let report = evaluate(&scored, &opts)?;
    let roc = roc_points(&scored)?;
    let out = ctx.output(a.out.as_deref(), "report.json")?;
    write_json(&out, &report)?;
    let roc_path = ctx.output(a.roc.as_deref(), "roc.csv")?;
    roc.write_csv(&roc_path)?;
    eprint!("{}", report.to_table());
    Ok(None)
}
