//! Train the patch classifier on annotation boxes of synthetic slides, then
//! time feature extraction over one full region.
//!
//! cargo run --example train_cnn -- [slides] [width]

use std::time::Instant;

use endonet::features::{extract_features, train_patch_classifier, CnnConfig, PatchTrainConfig};
use endonet::wsi::{
    compute_tissue_mask, extract_annotation_patches, generate_synthetic_slide, sample_regions, Grade, SyntheticSlideSpec,
    TissueParams,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(12);
    let width: f64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0.25);

    let mut patches = Vec::new();
    let mut planes = Vec::new();
    for i in 0..n {
        let grade = if i % 2 == 0 { Grade::Low } else { Grade::High };
        let spec = SyntheticSlideSpec { annotation_boxes: 1, ..SyntheticSlideSpec::new(&format!("s{i:02}"), grade, 4480, i as u64) };
        let s = generate_synthetic_slide(&spec)?;
        patches.extend(extract_annotation_patches(&s.slide, &s.boxes)?.patches);
        if i < 2 {
            planes.push(s.slide.levels[0].plane.clone());
        }
    }
    println!("{} labeled patches from {n} slides", patches.len());

    let cfg = PatchTrainConfig { cnn: CnnConfig { width, ..Default::default() }, epochs: 3, seed: 1, ..Default::default() };
    let t = Instant::now();
    let trained = train_patch_classifier(&patches, &cfg)?;
    println!("trained in {:.2?} ({} parameters)", t.elapsed(), trained.report.num_parameters);
    for e in &trained.report.epochs {
        println!("  epoch {}: loss {:.4} val AUC {:.3} val F1 {:.3}", e.epoch, e.train_loss, e.val_auc, e.val_f1);
    }
    println!("selected epoch {}", trained.report.selected_epoch);

    let plane = &planes[0];
    let mask = compute_tissue_mask(plane, &TissueParams::default())?;
    let regions = sample_regions(plane, &mask, 1, 0.25, 0)?.regions;
    let t = Instant::now();
    let bundles = extract_features(&trained.cnn, "s00", plane, &regions, 32)?;
    let dt = t.elapsed();
    println!(
        "extracted {} x {} features in {:.2?} ({:.1} ms/patch)",
        bundles[0].real_count(),
        bundles[0].dim,
        dt,
        dt.as_secs_f64() * 1e3 / bundles[0].real_count() as f64
    );
    Ok(())
}
