//! Render one low-grade and one high-grade synthetic slide, save them as
//! slide containers and report tissue coverage.
//!
//! cargo run --example synth_slide -- /tmp/synth

use std::path::PathBuf;
use std::time::Instant;

use endonet::wsi::{compute_tissue_mask, generate_synthetic_slide, save_slide, Grade, SyntheticSlideSpec, TissueParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "synth-out".into()));
    for (id, grade) in [("low", Grade::Low), ("high", Grade::High)] {
        let t = Instant::now();
        let s = generate_synthetic_slide(&SyntheticSlideSpec::new(id, grade, 4480, 7))?;
        let elapsed = t.elapsed();
        let mask = compute_tissue_mask(&s.slide.levels[0].plane, &TissueParams::default())?;
        save_slide(&out.join(id), &s.slide)?;
        println!(
            "{id}: subtype {:?}, {}x{} px, tissue {:.3}, {} boxes, rendered in {:.2?}",
            s.entry.subtype,
            s.slide.width(),
            s.slide.height(),
            mask.tissue_fraction(),
            s.boxes.len(),
            elapsed
        );
    }
    Ok(())
}
