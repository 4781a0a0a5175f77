use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_manifest, Ctx, Outcome};
use crate::pipeline::RunLog;
use crate::wsi::{
    compute_tissue_mask, downsample_to_target, load_slide, region_candidates, RegionCandidate, TissueParams, WsiError,
};
use crate::Error;

/// One line of the regions file written by `tile`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileRecord {
    pub slide_id: String,
    /// Size of the 1 um/px plane.
    pub width: usize,
    pub height: usize,
    pub tissue_fraction: f64,
    pub candidates: Vec<RegionCandidate>,
}

pub fn write_tiles(path: &Path, records: &[TileRecord]) -> Result<(), Error> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r).expect("record serializes")).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_tiles(path: &Path) -> Result<Vec<TileRecord>, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        out.push(serde_json::from_str(line).map_err(|e| WsiError::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[derive(Debug, clap::Args, Serialize)]
pub struct Args {
    #[arg(long)]
    manifest: PathBuf,
    /// Regions file (JSON lines); default `regions.jsonl` in the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.25)]
    min_tissue: f64,
}

pub fn run(a: &Args, ctx: &mut Ctx) -> Result<Outcome, Error> {
    let (entries, dir) = load_manifest(&ctx.path(&a.manifest))?;
    let params = TissueParams::default();
    let mut records = Vec::with_capacity(entries.len());
    let mut log = RunLog::new("tile", ctx.seed, &(a.min_tissue, params));
    for e in &entries {
        let slide = load_slide(&e.resolve_path(&dir))?;
        let plane = downsample_to_target(&slide, 1.0)?;
        let mask = compute_tissue_mask(&plane, &params)?;
        let candidates = region_candidates(plane.width(), plane.height(), &mask, a.min_tissue);
        if candidates.is_empty() {
            log.warnings.push(format!("slide `{}` has no region with tissue >= {}", e.slide_id, a.min_tissue));
        }
        records.push(TileRecord {
            slide_id: e.slide_id.clone(),
            width: plane.width(),
            height: plane.height(),
            tissue_fraction: mask.tissue_fraction(),
            candidates,
        });
    }
    let out = ctx.output(a.out.as_deref(), "regions.jsonl")?;
    write_tiles(&out, &records)?;
    Ok(Some(log))
}
