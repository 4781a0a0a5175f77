//! Train on a small synthetic cohort and write attention overlays (final
//! layer and rollout) for the test slide with the highest P(high).
//!
//! cargo run --release --example heatmap -- [slides] [out_dir]

use std::path::PathBuf;

use endonet::experiment::{overlay, run_experiment, ExperimentConfig};
use endonet::viz::{Aggregation, Colormap};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let slides: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(20);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "heatmap-out".into()));
    std::fs::create_dir_all(&out)?;
    let cfg = ExperimentConfig { slides, high_fraction: 0.5, ..ExperimentConfig::benchmark(5) };
    let outcome = run_experiment(&cfg)?;
    print!("{}", outcome.report.to_table());
    let top = outcome.scored.iter().max_by(|a, b| a.prob_high.total_cmp(&b.prob_high)).ok_or("empty test split")?;
    for agg in [Aggregation::LastLayerHeadMean, Aggregation::Rollout] {
        let (image, canvas, sidecar) = overlay(&outcome, &cfg, &top.slide_id, agg, &Colormap::default())?;
        let png = out.join(format!("{}_{}.png", top.slide_id, agg.layer_label()));
        image.write_png(&png)?;
        sidecar.write(&png.with_extension("json"))?;
        println!("{}: {} scored cells, raw range {:?}", png.display(), canvas.scores.iter().flatten().count(), canvas.bounds);
    }
    Ok(())
}
