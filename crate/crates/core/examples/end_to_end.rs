//! Run the synthetic benchmark in memory and print the F1/AUC summary with
//! the per-subtype accuracy rows.
//!
//! cargo run --release --example end_to_end -- [slides] [seed]

use endonet::experiment::{run_experiment, ExperimentConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let slides: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(100);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(7);
    let cfg = ExperimentConfig { slides, ..ExperimentConfig::benchmark(seed) };
    let out = run_experiment(&cfg)?;
    print!("{}", out.report.to_table());
    for t in &out.timings {
        println!("{:<20}{:>8.1} s", t.stage, t.seconds);
    }
    println!("{:<20}{:>8.1} s", "total", out.total_seconds());
    for w in &out.warnings {
        println!("warning: {w}");
    }
    Ok(())
}
