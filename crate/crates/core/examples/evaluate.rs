//! Score a simulated prediction set and print the report, the subtype rows
//! and a few ROC points.
//!
//! cargo run --release --example evaluate -- [n] [iterations]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use endonet::metrics::{evaluate, roc_points, EvalOptions, ScoredSlide};
use endonet::wsi::Subtype;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(60);
    let iterations: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(10_000);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // no carcinosarcoma, so its row prints NA
    let pool = [Subtype::EndometrioidG1, Subtype::EndometrioidG2, Subtype::EndometrioidG3, Subtype::Serous];
    let scored: Vec<ScoredSlide> = (0..n)
        .map(|i| {
            let subtype = pool[rng.random_range(0..pool.len())];
            let true_grade = subtype.grade();
            let centre = if true_grade.index() == 1 { 0.7 } else { 0.3 };
            ScoredSlide {
                slide_id: format!("slide_{i:03}"),
                subtype,
                true_grade,
                prob_high: (centre + rng.random_range(-0.35..0.35f64)).clamp(0.0, 1.0),
            }
        })
        .collect();
    let report = evaluate(&scored, &EvalOptions { iterations, seed: 1, ..Default::default() })?;
    print!("{}", report.to_table());
    println!("confusion: {:?}", report.confusion);
    let roc = roc_points(&scored)?;
    println!("ROC: {} points, area {:.4}", roc.points.len(), roc.area());
    for p in roc.points.iter().step_by((roc.points.len() / 6).max(1)) {
        println!("  threshold {:.3}: fpr {:.3} tpr {:.3}", p.threshold, p.fpr, p.tpr);
    }
    Ok(())
}
